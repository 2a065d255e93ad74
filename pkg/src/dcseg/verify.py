"""Randomized verification suites and kernel timings used by the CLI and tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import contrastive as con
from . import numerics as nx
from . import segloss, synth
from .model import ToyNetConfig, init_params
from .trainer import TrainConfig, objective


def random_unit(rng, n: int, d: int) -> np.ndarray:
    return con.normalize_embeddings(rng.normal(size=(n, d)))


def random_embedding_batch(rng, n_pairs: int, dim: int, temperature: float,
                           num_labels: int | None = 2, distinct: bool = False) -> con.EmbeddingBatch:
    """Two views per source; views of one source share its label."""
    if distinct:
        source_labels = rng.permutation(n_pairs)
    else:
        source_labels = rng.integers(0, num_labels, size=n_pairs)
    return con.EmbeddingBatch(random_unit(rng, 2 * n_pairs, dim), np.repeat(source_labels, 2), temperature)


def random_pixel_batch(rng, images: int = 2, side: int = 4, classes: int = 3, dim: int = 8,
                       pool_policy: str = "batch") -> con.PixelContrastBatch:
    m = images * side * side
    return con.PixelContrastBatch(random_unit(rng, m, dim), rng.integers(0, classes, size=m),
                                  np.repeat(np.arange(images), side * side), pool_policy)


def random_label_map(rng, h: int, w: int, classes: int) -> np.ndarray:
    """Blocky random map: a coarse random grid upsampled, so regions have extent."""
    cell = int(rng.integers(1, 6))
    coarse = rng.integers(0, classes, size=(-(-h // cell), -(-w // cell)))
    return np.kron(coarse, np.ones((cell, cell), dtype=np.int64))[:h, :w].astype(np.uint8)


@dataclass
class SuiteResult:
    worst: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def record(self, name: str, value: float, tol: float, case: dict) -> None:
        self.counts[name] = self.counts.get(name, 0) + 1
        self.worst[name] = max(self.worst.get(name, 0.0), float(value))
        if not value <= tol:
            self.failures.append({"check": name, "value": float(value), "tolerance": tol, **case})

    @property
    def ok(self) -> bool:
        return not self.failures


def loss_oracle_suite(instances: int = 200, seed: int = 0, tol: float = 1e-10,
                      edt_maps: int = 5) -> SuiteResult:
    """Fast contrastive kernels and EDT against their brute-force references."""
    rng = np.random.default_rng(seed)
    out = SuiteResult()
    for k in range(instances):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(4, 17))
        tau = float(rng.uniform(0.05, 1.0))
        case = {"instance": k, "seed": seed, "N": n, "D": d, "tau": tau}
        batch = random_embedding_batch(rng, n, d, tau, num_labels=int(rng.integers(1, 4)))
        out.record("self", abs(con.self_contrast(batch).loss - con.contrast_oracle("self", batch)), tol, case)
        out.record("image", abs(con.image_supcon(batch).loss - con.contrast_oracle("image", batch)), tol, case)
        policy = "batch" if k % 2 == 0 else "image"
        pix = random_pixel_batch(rng, images=2, side=int(rng.integers(2, 5)), classes=3, dim=d,
                                 pool_policy=policy)
        try:
            fast = con.pixel_supcon(pix, tau).loss
        except con.ContrastError:
            continue
        out.record("pixel", abs(fast - con.contrast_oracle("pixel", pix, tau)), tol, case)
    for k in range(edt_maps):
        lab = random_label_map(rng, 32, 32, int(rng.integers(1, 7)))
        dev = float(np.abs(segloss.edt(lab) - segloss.edt_oracle(lab)).max())
        out.record("edt", dev, 1e-9, {"map": k, "seed": seed})
    return out


def _contrast_fd(rng, kind: str, h: float) -> tuple[float, dict]:
    n = int(rng.integers(2, 6))
    d = int(rng.integers(4, 12))
    tau = float(rng.uniform(0.1, 1.0))
    case = {"N": n, "D": d, "tau": tau}
    if kind == "pixel":
        side = int(rng.integers(2, 4))
        pix = random_pixel_batch(rng, images=2, side=side, classes=3, dim=d)
        raw = pix.pixel_embeddings * rng.uniform(0.5, 2.0, size=(pix.pixel_embeddings.shape[0], 1))

        def f(x):
            b = con.PixelContrastBatch(con.normalize_embeddings(x), pix.pixel_labels, pix.image_of_pixel)
            r = con.pixel_supcon(b, tau)
            return r.loss, con.normalize_backward(x, r.grad)
    else:
        batch = random_embedding_batch(rng, n, d, tau, num_labels=2)
        raw = batch.embeddings * rng.uniform(0.5, 2.0, size=(2 * n, 1))
        op = con.self_contrast if kind == "self" else con.image_supcon

        def f(x):
            r = op(con.EmbeddingBatch(con.normalize_embeddings(x), batch.image_labels, tau))
            return r.loss, con.normalize_backward(x, r.grad)
    return nx.finite_diff_check(f, raw, h), case


def _focal_fd(rng, h: float) -> tuple[float, dict]:
    hh, ww, c = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
    lab = rng.integers(0, c, size=(hh, ww)).astype(np.uint8)
    lab[rng.random((hh, ww)) < 0.15] = segloss.VOID
    if np.all(lab == segloss.VOID):
        lab[0, 0] = 0
    counts = rng.integers(1, 100, size=c)
    table = segloss.ClassFrequencyTable(counts)
    weights = segloss.build_weight_maps(lab, table, sigma_edt=float(rng.uniform(0.5, 5.0)))
    gamma = float(rng.uniform(0.0, 2.0))
    logits = rng.normal(scale=2.0, size=(hh, ww, c))

    def f(x):
        r = segloss.focal_seg_loss(x, lab, weights, gamma)
        return r.loss, r.grad_logits

    return nx.finite_diff_check(f, logits, h), {"H": hh, "W": ww, "C": c, "gamma": gamma}


TINY_MODEL = ToyNetConfig(height=16, width=16, widths=(4, 6, 8), num_classes=3, d_proj=4, d_pix=4)


def _combined_fd(rng, h: float, coords_per_instance: int = 8, mode: str = "focal+image+pixel") -> tuple[float, dict]:
    seed = int(rng.integers(1 << 30))
    mcfg = TINY_MODEL
    cfg = TrainConfig(loss_mode=mode, batch_size=2, anchor_cap=6, crop=12, sigma_edt=3.0)
    params = init_params(mcfg, seed=seed)
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.05, size=params[k].shape)
    geometry = synth.GeometryConfig(height=16, width=16)
    sources = [synth.generate_scene((seed, i), geometry, condition=int(rng.integers(0, 2))) for i in range(2)]
    batch = synth.build_multiview_batch(sources, seed, crop=12, out_size=16)
    table = segloss.ClassFrequencyTable(rng.integers(1, 50, size=3))
    batch.labels = np.where(batch.labels == segloss.VOID, segloss.VOID, batch.labels % 3).astype(np.uint8)

    def relu_pattern(p):
        leaves = {k: nx.Tensor(v, requires_grad=True) for k, v in p.items()}
        nodes = nx._topological(objective(leaves, batch, cfg, mcfg, table, seed).total)
        return b"".join(np.packbits(n._parents[0].data > 0).tobytes() for n in nodes if n.op == "relu")

    leaves = {k: nx.Tensor(v, requires_grad=True) for k, v in params.items()}
    res = objective(leaves, batch, cfg, mcfg, table, seed)
    res.total.backward()
    names = sorted(params)
    center = relu_pattern(params)
    worst = 0.0
    redrawn = 0
    checked = 0
    while checked < coords_per_instance:
        name = names[int(rng.integers(len(names)))]
        flat_i = int(rng.integers(params[name].size))
        base = params[name]
        # the network is piecewise smooth; a central difference straddling a
        # ReLU switch measures no derivative, so such coordinates are redrawn
        smooth = True
        for sign in (1.0, -1.0):
            moved = base.copy()
            moved.flat[flat_i] += sign * h
            smooth = smooth and relu_pattern({**params, name: moved}) == center
        if not smooth:
            redrawn += 1
            if redrawn > 20 * coords_per_instance:
                raise RuntimeError("could not find smooth coordinates for the gradient check")
            continue
        checked += 1
        grad = leaves[name].grad if leaves[name].grad is not None else np.zeros_like(base)

        def f(x, name=name):
            p = dict(params)
            p[name] = x
            return objective(p, batch, cfg, mcfg, table, seed).components["total"]

        err = nx.finite_diff_check(f, base, h, grad=grad, coords=[flat_i])
        worst = max(worst, err)
    return worst, {"model_seed": seed, "mode": mode, "redrawn": redrawn}


def grad_check_suite(instances: int = 50, seed: int = 0, step: float = 1e-5, tol: float = 1e-4,
                     kinds=("self", "image", "pixel", "focal", "combined")) -> SuiteResult:
    rng = np.random.default_rng(seed)
    out = SuiteResult()
    for kind in kinds:
        for k in range(instances):
            if kind in ("self", "image", "pixel"):
                err, case = _contrast_fd(rng, kind, step)
            elif kind == "focal":
                err, case = _focal_fd(rng, step)
            else:
                err, case = _combined_fd(rng, step)
                out.counts["combined_redrawn"] = out.counts.get("combined_redrawn", 0) + case["redrawn"]
            out.record(kind, err, tol, {"instance": k, "seed": seed, **case})
    return out


def _time(fn, min_time: float = 0.05, repeat: int = 3) -> float:
    calls, elapsed = 0, 0.0
    fn()
    best = float("inf")
    for _ in range(repeat):
        calls, start = 0, time.perf_counter_ns()
        while True:
            fn()
            calls += 1
            elapsed = time.perf_counter_ns() - start
            if elapsed >= min_time * 1e9:
                break
        best = min(best, elapsed / calls)
    return best


def bench(sizes=(4, 16, 64), edt_sizes=(32, 64, 128), dim: int = 32, seed: int = 0,
          min_time: float = 0.05) -> list[dict]:
    """ns per call for the three contrastive kernels (by source count N) and EDT (by side)."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        batch = random_embedding_batch(rng, n, dim, 0.07, num_labels=4)
        rows.append({"kernel": "self_contrast", "size": n, "ns_per_call": _time(lambda: con.self_contrast(batch), min_time)})
        rows.append({"kernel": "image_supcon", "size": n, "ns_per_call": _time(lambda: con.image_supcon(batch), min_time)})
        pix = random_pixel_batch(rng, images=2 * n, side=4, classes=6, dim=16)
        rows.append({"kernel": "pixel_supcon", "size": n, "ns_per_call": _time(lambda: con.pixel_supcon(pix, 0.07), min_time)})
    for side in edt_sizes:
        lab = random_label_map(rng, side, side, 6)
        rows.append({"kernel": "edt", "size": side, "ns_per_call": _time(lambda: segloss.edt(lab), min_time)})
    return rows
