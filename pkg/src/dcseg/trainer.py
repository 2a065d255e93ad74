"""Combined objective and the training loop over the synthetic dataset.

Loss modes follow the seven-row experiment matrix:

====  ===================  ===========================================
row   mode                 objective
====  ===================  ===========================================
a     ce                   cross entropy
b     focal                weighted focal (baseline)
c     focal+pixel          focal + pixel-level supervised contrast
d     focal+self           focal + self-supervised contrast
e     focal+image          focal + image-level supervised contrast
f     focal+self+pixel     focal + self-supervised + pixel-level
g     focal+image+pixel    focal + image-level + pixel-level
====  ===================  ===========================================

The total is ``(1/B) * (L_image_slot + L_pixel) + lambda_s * L_seg``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import contrastive as con
from . import metrics, segloss, synth
from . import numerics as nx
from .model import ToyNetConfig, init_params, model_forward, param_shapes, predict
from .optim import OptimizerState, adam_step, cosine_lr

log = logging.getLogger(__name__)

LOSS_MODES = {
    "a": "ce",
    "b": "focal",
    "c": "focal+pixel",
    "d": "focal+self",
    "e": "focal+image",
    "f": "focal+self+pixel",
    "g": "focal+image+pixel",
}
METRICS_HEADER = ["epoch", "mode", "seed", "lr", "train_loss", "L_seg", "L_image", "L_pixel",
                  "val_miou", "miou_fog", "miou_night", "miou_rain", "miou_snow"]


class TrainError(ValueError):
    pass


def resolve_mode(mode: str) -> str:
    if mode in LOSS_MODES:
        return LOSS_MODES[mode]
    if mode in LOSS_MODES.values():
        return mode
    raise TrainError(f"unknown loss mode {mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "focal+image+pixel"
    temperature: float = 0.07
    gamma: float = 0.5
    eps: float = 0.1
    sigma_edt: float = 10.0
    lambda_s: float = 1.2
    batch_size: int = 8
    epochs: int = 60
    steps_per_epoch: int | None = None
    lr0: float = 4e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    decoupled_decay: bool = False
    beta1: float = 0.9
    beta2: float = 0.99
    anchor_cap: int = 32
    pool_policy: str = "batch"
    crop: int = 48
    scale_range: tuple[float, float] = (0.5, 2.0)
    seed: int = 0
    pretrain_checkpoint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "loss_mode", resolve_mode(self.loss_mode))
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))

    @property
    def lambda_c(self) -> float:
        return 1.0 / self.batch_size

    @property
    def parts(self) -> set[str]:
        return set(self.loss_mode.split("+"))

    def validate(self) -> None:
        if self.batch_size < 1:
            raise TrainError("batch_size must be at least 1")
        if self.lr_min > self.lr0:
            raise TrainError("lr_min must not exceed lr0")
        if not (self.temperature > 0 and self.sigma_edt > 0 and self.gamma >= 0):
            raise TrainError("temperature and sigma_edt must be positive, gamma non-negative")
        if self.pool_policy not in ("batch", "image"):
            raise TrainError(f"unknown pool policy {self.pool_policy!r}")
        if self.epochs < 0:
            raise TrainError("epochs must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


def combined_loss(l_image: float, l_pixel: float, l_seg: float, batch_size: int,
                  lambda_s: float = 1.2) -> float:
    """``(1/B) * (l_image + l_pixel) + lambda_s * l_seg``; unused parts are passed as 0."""
    for name, v in (("L_image", l_image), ("L_pixel", l_pixel), ("L_seg", l_seg)):
        if not math.isfinite(v):
            raise TrainError(f"component {name} is not finite ({v})")
    return (1.0 / batch_size) * (l_image + l_pixel) + lambda_s * l_seg


# loss nodes

def seg_loss_node(logits: nx.Tensor, labels: np.ndarray, cfg: TrainConfig,
                  table: segloss.ClassFrequencyTable | None) -> nx.Tensor:
    """Segmentation loss averaged over the two view sets (even / odd rows)."""
    grad = np.zeros_like(logits.data)
    total = 0.0
    groups = [slice(0, None, 2), slice(1, None, 2)] if logits.shape[0] > 1 else [slice(None)]
    for sl in groups:
        lg, lab = logits.data[sl], labels[sl]
        if cfg.loss_mode == "ce":
            res = segloss.cross_entropy_baseline(lg, lab)
        else:
            delta = np.stack([segloss.build_weight_maps(l, table, cfg.sigma_edt, cfg.eps).delta
                              if np.any(l != segloss.VOID) else np.zeros(l.shape) for l in lab])
            res = segloss.focal_seg_loss(lg, lab, delta, cfg.gamma)
        total += res.loss / len(groups)
        grad[sl] = res.grad_logits / len(groups)
    return nx.custom([logits], total, lambda g: [g * grad], op="seg_loss")


def image_contrast_node(emb: nx.Tensor, conditions: np.ndarray, cfg: TrainConfig) -> tuple[nx.Tensor, str]:
    batch = con.EmbeddingBatch(emb.data, conditions, cfg.temperature)
    if "image" in cfg.parts:
        res, kind = con.image_supcon(batch), "image"
    else:
        res, kind = con.self_contrast(batch), "self"
    return nx.custom([emb], res.loss, lambda g: [g * res.grad], op=f"{kind}_contrast"), kind


def downsample_labels(labels: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour label map at the given feature stride."""
    off = stride // 2
    return labels[:, off::stride, off::stride]


def pixel_contrast_node(pix: nx.Tensor, labels: np.ndarray, stride: int, cfg: TrainConfig,
                        seed) -> nx.Tensor:
    lab = downsample_labels(labels, stride)
    batch, index = con.sample_pixel_anchors(pix.data, lab, cfg.anchor_cap, seed, cfg.pool_policy)
    rows = nx.gather(nx.reshape(pix, (-1, pix.shape[-1])), index)
    res = con.pixel_supcon(batch, cfg.temperature)
    return nx.custom([rows], res.loss, lambda g: [g * res.grad], op="pixel_contrast")


@dataclass
class StepResult:
    total: nx.Tensor
    components: dict


def objective(params, batch: synth.MultiViewBatch, cfg: TrainConfig, model_cfg: ToyNetConfig,
              table, seed) -> StepResult:
    """Forward one multi-view batch and assemble the combined objective."""
    parts = cfg.parts
    heads = (("image",) if parts & {"image", "self"} else ()) + (("pixel",) if "pixel" in parts else ())
    out = model_forward(params, batch.images, model_cfg, heads)
    l_seg = seg_loss_node(out.logits, batch.labels, cfg, table)
    comps = {"L_seg": float(l_seg.data), "L_image": 0.0, "L_pixel": 0.0}
    contrast = []
    if parts & {"image", "self"}:
        node, _ = image_contrast_node(out.image_embedding, batch.conditions, cfg)
        comps["L_image"] = float(node.data)
        contrast.append(node)
    if "pixel" in parts:
        node = pixel_contrast_node(out.pixel_embeddings, batch.labels, model_cfg.pixel_stride, cfg, seed)
        comps["L_pixel"] = float(node.data)
        contrast.append(node)
    total = nx.scale(l_seg, cfg.lambda_s)
    if contrast:
        c = contrast[0] if len(contrast) == 1 else contrast[0] + contrast[1]
        total = total + nx.scale(c, cfg.lambda_c)
    comps["total"] = float(total.data)
    combined_loss(comps["L_image"], comps["L_pixel"], comps["L_seg"], cfg.batch_size, cfg.lambda_s)
    return StepResult(total, comps)


def loss_and_grads(params, batch, cfg, model_cfg, table, seed):
    leaves = {k: nx.Tensor(v, requires_grad=True) for k, v in params.items()}
    res = objective(leaves, batch, cfg, model_cfg, table, seed)
    res.total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return res, grads


# data plumbing

def frequency_table(dataset: synth.Dataset, write_cache: bool = True) -> segloss.ClassFrequencyTable:
    """Train-split class counts, read from ``freq_cache.json`` when it matches the split."""
    train = dataset.split("train")
    fresh = segloss.count_class_frequencies([s.label_map for s in train], dataset.num_classes,
                                            [s.sample_id for s in train])
    if dataset.root is not None:
        path = Path(dataset.root) / "freq_cache.json"
        if path.is_file():
            try:
                cached = segloss.ClassFrequencyTable.load(path)
                if cached.split_hash == fresh.split_hash:
                    return cached
            except (ValueError, KeyError):
                pass
            log.warning("frequency cache %s is stale or unreadable; recomputing", path)
        else:
            log.warning("no frequency cache at %s; computing it", path)
        if write_cache:
            fresh.save(path)
    return fresh


def scene_stack(scenes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in scenes]), np.stack([s.label_map for s in scenes]),
            np.array([s.condition for s in scenes]))


def evaluate(params, model_cfg: ToyNetConfig, scenes, class_names=None) -> dict:
    images, labels, conds = scene_stack(scenes)
    preds = predict(params, images, model_cfg)
    mats = [metrics.confusion_matrix(p, t, model_cfg.num_classes) for p, t in zip(preds, labels)]
    return metrics.condition_report(mats, conds, class_names)


def run_config(cfg: TrainConfig, model_cfg: ToyNetConfig) -> dict:
    return {"train": cfg.to_dict(), "model": model_cfg.to_dict()}


@dataclass
class TrainResult:
    params: dict
    state: OptimizerState
    rows: list[dict] = field(default_factory=list)
    report: dict | None = None

    def metrics_csv(self) -> str:
        return metrics_csv(self.rows)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, METRICS_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def train(cfg: TrainConfig, model_cfg: ToyNetConfig, dataset: synth.Dataset,
          out_dir: str | Path | None = None, on_epoch=None) -> TrainResult:
    cfg.validate()
    model_cfg.validate()
    if model_cfg.num_classes != dataset.num_classes:
        raise TrainError(f"model has {model_cfg.num_classes} classes, dataset {dataset.num_classes}")
    train_scenes = dataset.split("train")
    val_scenes = dataset.split("val")
    if len(train_scenes) < cfg.batch_size:
        raise TrainError("training split smaller than one batch")
    table = frequency_table(dataset)
    class_names = dataset.manifest.get("class_names")

    params = init_params(model_cfg, seed=cfg.seed)
    if cfg.pretrain_checkpoint:
        loaded, _, _ = ckpt.load_checkpoint(cfg.pretrain_checkpoint, param_shapes(model_cfg))
        params = {k: loaded[k].copy() for k in params}
        log.info("warm start from %s", cfg.pretrain_checkpoint)
    state = OptimizerState.zeros_like(params)

    steps = cfg.steps_per_epoch or len(train_scenes) // cfg.batch_size
    total_steps = cfg.epochs * steps
    horizon = max(total_steps - 1, 1)
    result = TrainResult(params, state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    t = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch])).permutation(len(train_scenes))
        sums = {"total": 0.0, "L_seg": 0.0, "L_image": 0.0, "L_pixel": 0.0}
        lr = cfg.lr0
        for step in range(steps):
            idx = order[(step * cfg.batch_size) % len(order):][:cfg.batch_size]
            if idx.size < cfg.batch_size:
                idx = np.concatenate([idx, order[:cfg.batch_size - idx.size]])
            sources = [train_scenes[i] for i in idx]
            batch = synth.build_multiview_batch(sources, (cfg.seed, 2, epoch, step), cfg.crop,
                                                cfg.scale_range, model_cfg.height)
            res, grads = loss_and_grads(params, batch, cfg, model_cfg, table, (cfg.seed, 3, epoch, step))
            if not np.isfinite(res.components["total"]):
                raise TrainError(f"non-finite loss at epoch {epoch} step {step}")
            lr = cosine_lr(t, horizon, cfg.lr0, cfg.lr_min)
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.weight_decay,
                      decoupled=cfg.decoupled_decay)
            for k in sums:
                sums[k] += res.components[k]
            t += 1
        report = evaluate(params, model_cfg, val_scenes, class_names) if val_scenes else None
        pc = report["per_condition"] if report else {}
        row = {
            "epoch": epoch + 1, "mode": cfg.loss_mode, "seed": cfg.seed, "lr": lr,
            "train_loss": sums["total"] / steps, "L_seg": sums["L_seg"] / steps,
            "L_image": sums["L_image"] / steps, "L_pixel": sums["L_pixel"] / steps,
            "val_miou": report["overall"] if report else float("nan"),
            **{f"miou_{c}": (pc.get(c) if pc.get(c) is not None else float("nan"))
               for c in metrics.CONDITIONS},
        }
        result.rows.append(row)
        result.report = report
        log.info("epoch %d/%d loss %.4f val mIoU %.4f", epoch + 1, cfg.epochs, row["train_loss"], row["val_miou"])
        if out is not None:
            (out / "metrics.csv").write_text(metrics_csv(result.rows))
        if on_epoch is not None:
            on_epoch(row)

    if result.report is None and val_scenes:
        result.report = evaluate(params, model_cfg, val_scenes, class_names)
    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(result.rows))
        ckpt.save_checkpoint(out / "checkpoint.bin", params, run_config(cfg, model_cfg), state)
    return result


def with_mode(cfg: TrainConfig, mode: str, seed: int | None = None) -> TrainConfig:
    return replace(cfg, loss_mode=mode, seed=cfg.seed if seed is None else seed)
