"""A miniature three-stage encoder with a lateral-fusion decoder and three heads.

Encoder: two 3x3 convs per stage at strides 2/4/8. Decoder: 1x1 laterals,
nearest upsampling and addition, one 3x3 conv per fused level. Heads:
per-pixel class logits (upsampled to the input size), a unit-norm image
embedding, and unit-norm pixel embeddings. Every conv is followed by a
learnable per-channel scale and bias instead of batch normalization.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

# Compensates the variance lost by U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights (1/3) and ReLU (1/2).
SCALE_INIT = float(np.sqrt(6.0))
HEADS = ("cls", "pix", "proj")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ToyNetConfig:
    height: int = 64
    width: int = 64
    widths: tuple[int, int, int] = (16, 32, 64)
    num_classes: int = 6
    d_proj: int = 32
    d_pix: int = 16
    image_tap: str = "fine"
    pixel_stride: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def validate(self) -> None:
        if self.height % 8 or self.width % 8:
            raise ModelError("input size must be divisible by the deepest stride (8)")
        if self.d_proj < 2 or self.d_pix < 2:
            raise ModelError("embedding dimensions must be at least 2")
        if self.image_tap not in ("fine", "coarse"):
            raise ModelError(f"image_tap must be 'fine' or 'coarse', got {self.image_tap!r}")
        if self.pixel_stride not in (2, 4):
            raise ModelError("pixel_stride must be 2 or 4")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ModelError("need three positive stage widths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def param_shapes(cfg: ToyNetConfig) -> dict[str, tuple[int, ...]]:
    w1, w2, w3 = cfg.widths
    pix_in = w2 if cfg.pixel_stride == 4 else w1
    proj_in = w1 if cfg.image_tap == "fine" else w3
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k, affine=True):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        if affine:
            shapes[f"{name}.scale"] = (cout,)
            shapes[f"{name}.bias"] = (cout,)

    conv("enc1a", 3, w1, 3)
    conv("enc1b", w1, w1, 3)
    conv("enc2a", w1, w2, 3)
    conv("enc2b", w2, w2, 3)
    conv("enc3a", w2, w3, 3)
    conv("enc3b", w3, w3, 3)
    conv("lat3", w3, w2, 1, affine=False)
    conv("lat2", w2, w2, 1, affine=False)
    conv("dec4", w2, w2, 3)
    conv("lat4", w2, w1, 1, affine=False)
    conv("lat1", w1, w1, 1, affine=False)
    conv("dec2", w1, w1, 3)
    shapes["cls.w"] = (cfg.num_classes, w1, 1, 1)
    shapes["cls.bias"] = (cfg.num_classes,)
    shapes["pix.w"] = (cfg.d_pix, pix_in, 1, 1)
    shapes["pix.bias"] = (cfg.d_pix,)
    shapes["proj.w"] = (proj_in, cfg.d_proj)
    shapes["proj.bias"] = (cfg.d_proj,)
    return shapes


def param_count(cfg: ToyNetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "proj.w":
        return shape[0]
    return int(np.prod(shape[1:]))


def init_params(cfg: ToyNetConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Fan-in uniform weights; each tensor has its own stream keyed by its name."""
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        owner = name.rsplit(".", 1)[0]
        if name.endswith(".scale"):
            params[name] = np.full(shape, SCALE_INIT)
        elif name.endswith(".bias") and owner not in HEADS:
            params[name] = np.zeros(shape)
        else:
            # head biases share their weight's bound, so an all-zero input still
            # maps to a non-zero embedding
            key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), key]))
            bound = np.sqrt(1.0 / fan_in(f"{owner}.w", shapes[f"{owner}.w"]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class ModelOutput:
    logits: Tensor  # (N, H, W, C)
    image_embedding: Tensor | None  # (N, D_proj), unit rows
    pixel_embeddings: Tensor | None  # (N, H/s, W/s, D_pix), unit rows
    taps: dict


def _affine(x: Tensor, p, name: str) -> Tensor:
    return x * p[f"{name}.scale"] + p[f"{name}.bias"]


def _block(x: Tensor, p, name: str, stride: int = 1) -> Tensor:
    return nx.relu(_affine(nx.conv2d(x, p[f"{name}.w"], stride), p, name))


def _head(x: Tensor, p, name: str) -> Tensor:
    return nx.conv2d(x, p[f"{name}.w"]) + p[f"{name}.bias"]


def model_forward(params, images, cfg: ToyNetConfig, heads=("image", "pixel")) -> ModelOutput:
    """``images`` is (N, H, W, 3); ``params`` maps names to arrays or Tensors.

    Logits are always computed; ``heads`` selects which embedding heads run.
    Skipped heads come back as None.
    """
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.shape[1:] != (cfg.height, cfg.width, 3):
        raise ModelError(f"expected images of shape (N, {cfg.height}, {cfg.width}, 3), got {x.shape}")

    e2 = _block(_block(x, p, "enc1a", 2), p, "enc1b")
    e4 = _block(_block(e2, p, "enc2a", 2), p, "enc2b")
    e8 = _block(_block(e4, p, "enc3a", 2), p, "enc3b")

    f4 = nx.upsample_nearest(nx.conv2d(e8, p["lat3.w"]), 2) + nx.conv2d(e4, p["lat2.w"])
    d4 = _block(f4, p, "dec4")
    f2 = nx.upsample_nearest(nx.conv2d(d4, p["lat4.w"]), 2) + nx.conv2d(e2, p["lat1.w"])
    d2 = _block(f2, p, "dec2")

    logits = nx.upsample_nearest(_head(d2, p, "cls"), 2)

    image_embedding = pixel_embeddings = None
    if "image" in heads:
        tap = d2 if cfg.image_tap == "fine" else e8
        pooled = nx.global_avg_pool(tap)
        image_embedding = nx.l2_normalize_rows(pooled @ p["proj.w"] + p["proj.bias"])
    if "pixel" in heads:
        pix_src = d4 if cfg.pixel_stride == 4 else d2
        pixel_embeddings = nx.l2_normalize_rows(_head(pix_src, p, "pix"))

    return ModelOutput(logits, image_embedding, pixel_embeddings,
                       {"e2": e2, "e4": e4, "e8": e8, "d4": d4, "d2": d2})


def predict(params, images: np.ndarray, cfg: ToyNetConfig, chunk: int = 32) -> np.ndarray:
    """Argmax class map for a stack of images, evaluated in chunks."""
    preds = []
    for i in range(0, len(images), chunk):
        out = model_forward(params, images[i:i + chunk], cfg, heads=())
        preds.append(out.logits.data.argmax(axis=-1).astype(np.uint8))
    return np.concatenate(preds)
