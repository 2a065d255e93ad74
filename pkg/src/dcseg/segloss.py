"""Class-balanced, distance-weighted focal loss for dense prediction.

Per-pixel weight::

    delta(p) = 1 / ln(1 + eps + freq_c / N_p)  *  exp(-d(p) / (2 sigma))

where ``d(p)`` sums, over every class present in the label map, the Euclidean
distance from ``p`` to the nearest pixel of that class. The distances come
from an exact squared distance transform (lower envelope of parabolas,
one pass along columns then one along rows).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numba
import numpy as np

from .numerics import logsumexp

VOID = 255
_INF = 1e20


class SegLossError(ValueError):
    pass


@dataclass
class ClassFrequencyTable:
    counts: np.ndarray
    void_count: int = 0
    split_hash: str = ""

    @property
    def num_classes(self) -> int:
        return int(self.counts.size)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_json(self) -> dict:
        return {
            "counts": {str(c): int(n) for c, n in enumerate(self.counts)},
            "N_p": self.total,
            "void_count": int(self.void_count),
            "split_hash": self.split_hash,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ClassFrequencyTable":
        counts = doc["counts"]
        arr = np.array([counts[str(c)] for c in range(len(counts))], dtype=np.int64)
        if int(arr.sum()) != int(doc["N_p"]):
            raise SegLossError("frequency cache is inconsistent: counts do not sum to N_p")
        return cls(arr, int(doc.get("void_count", 0)), doc.get("split_hash", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ClassFrequencyTable":
        return cls.from_json(json.loads(Path(path).read_text()))


def count_class_frequencies(label_maps: Iterable, num_classes: int,
                            names: Iterable[str] | None = None) -> ClassFrequencyTable:
    """Exact per-class pixel counts over a split; void pixels are tallied separately."""
    counts = np.zeros(num_classes, dtype=np.int64)
    void = 0
    digest = hashlib.sha256()
    names = list(names) if names is not None else None
    for k, lab in enumerate(label_maps):
        lab = np.asarray(lab)
        flat = lab.reshape(-1).astype(np.int64)
        bad = (flat != VOID) & ((flat < 0) | (flat >= num_classes))
        if np.any(bad):
            name = names[k] if names else f"#{k}"
            raise SegLossError(f"sample {name}: label id {flat[bad][0]} outside [0, {num_classes})")
        valid = flat[flat != VOID]
        counts += np.bincount(valid, minlength=num_classes)
        void += flat.size - valid.size
        digest.update(np.ascontiguousarray(lab, dtype=np.uint8).tobytes())
    return ClassFrequencyTable(counts, void, digest.hexdigest())


def class_balance_weight(table: ClassFrequencyTable, c: int, eps: float = 0.1) -> float:
    if table.total <= 0:
        raise SegLossError("frequency table has no non-void pixels")
    return 1.0 / np.log(1.0 + eps + table.counts[c] / table.total)


def class_balance_weights(table: ClassFrequencyTable, eps: float = 0.1) -> np.ndarray:
    if table.total <= 0:
        raise SegLossError("frequency table has no non-void pixels")
    return 1.0 / np.log(1.0 + eps + table.counts / table.total)


@numba.njit(cache=True)
def _dt1d(f, out, v, z):
    # squared distance transform of one sampled function (lower envelope of parabolas)
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@numba.njit(cache=True)
def _sq_edt(mask):
    h, w = mask.shape
    n = max(h, w)
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    grid = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            grid[i, j] = 0.0 if mask[i, j] else _INF
    for j in range(w):
        for i in range(h):
            f[i] = grid[i, j]
        _dt1d(f[:h], out[:h], v, z)
        for i in range(h):
            grid[i, j] = out[i]
    for i in range(h):
        for j in range(w):
            f[j] = grid[i, j]
        _dt1d(f[:w], out[:w], v, z)
        for j in range(w):
            grid[i, j] = out[j]
    return grid


def squared_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from every pixel to the nearest True pixel."""
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if not mask.any():
        raise SegLossError("distance transform of an empty mask")
    return _sq_edt(mask)


def present_classes(label_map: np.ndarray) -> np.ndarray:
    vals = np.unique(label_map)
    return vals[vals != VOID]


def edt(label_map: np.ndarray) -> np.ndarray:
    """Sum over present classes of the distance to that class's nearest pixel."""
    label_map = np.asarray(label_map)
    if label_map.size == 0:
        raise SegLossError("empty label map")
    classes = present_classes(label_map)
    if classes.size == 0:
        raise SegLossError("label map has no non-void pixels")
    total = np.zeros(label_map.shape)
    for c in classes:
        total += np.sqrt(squared_distance_transform(label_map == c))
    return total


def edt_oracle(label_map: np.ndarray) -> np.ndarray:
    """Brute force over all pixel pairs per class; for tests only."""
    label_map = np.asarray(label_map)
    h, w = label_map.shape
    out = np.zeros((h, w))
    for c in present_classes(label_map):
        members = np.argwhere(label_map == c).astype(np.float64)
        for i in range(h):
            for j in range(w):
                out[i, j] += np.sqrt(((members - (i, j)) ** 2).sum(axis=1)).min()
    return out


@dataclass
class WeightMaps:
    delta: np.ndarray
    balance: np.ndarray
    edt_factor: np.ndarray
    distance: np.ndarray = field(repr=False)
    sigma_edt: float = 10.0


def build_weight_maps(label_map: np.ndarray, table: ClassFrequencyTable,
                      sigma_edt: float = 10.0, eps: float = 0.1) -> WeightMaps:
    if not sigma_edt > 0:
        raise SegLossError("sigma_edt must be positive")
    label_map = np.asarray(label_map)
    valid = label_map != VOID
    per_class = class_balance_weights(table, eps)
    balance = np.zeros(label_map.shape)
    balance[valid] = per_class[label_map[valid].astype(np.intp)]
    dist = edt(label_map)
    factor = np.where(valid, np.exp(-dist / (2.0 * sigma_edt)), 0.0)
    return WeightMaps(balance * factor, balance, factor, dist, sigma_edt)


@dataclass
class SegLossResult:
    loss: float
    grad_logits: np.ndarray
    pixel_loss: np.ndarray


def focal_seg_loss(logits: np.ndarray, label_map: np.ndarray, weights, gamma: float = 0.5) -> SegLossResult:
    """Mean over non-void pixels of ``-delta * exp(gamma * (1 - P_t)) * log(P_t)``.

    ``logits`` is (..., C) aligned with ``label_map`` (...). ``weights`` is a
    WeightMaps, a raw delta array, or None for unit weights.
    """
    if gamma < 0:
        raise SegLossError("gamma must be non-negative")
    logits = np.asarray(logits, dtype=np.float64)
    label_map = np.asarray(label_map)
    if logits.shape[:-1] != label_map.shape:
        raise SegLossError(f"logits {logits.shape} not aligned with labels {label_map.shape}")
    valid = label_map != VOID
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise SegLossError("label map is entirely void")
    if weights is None:
        delta = valid.astype(np.float64)
    else:
        delta = np.asarray(getattr(weights, "delta", weights), dtype=np.float64)
        if delta.shape != label_map.shape:
            raise SegLossError("weight map not aligned with labels")
        delta = np.where(valid, delta, 0.0)
    target = np.where(valid, label_map, 0).astype(np.intp)
    logp = logits - logsumexp(logits, axis=-1, keepdims=True)
    prob = np.exp(logp)
    logpt = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    pt = np.exp(logpt)
    focal = np.exp(gamma * (1.0 - pt))
    pixel_loss = np.where(valid, -delta * focal * logpt, 0.0)
    # d loss / d logit_k = -delta * focal * (1 - gamma * pt * log pt) * (1[k=t] - p_k)
    coef = np.where(valid, -delta * focal * (1.0 - gamma * pt * logpt), 0.0) / n_valid
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    grad = coef[..., None] * (onehot - prob)
    return SegLossResult(float(pixel_loss.sum() / n_valid), grad, pixel_loss)


def cross_entropy_baseline(logits: np.ndarray, label_map: np.ndarray) -> SegLossResult:
    return focal_seg_loss(logits, label_map, None, gamma=0.0)
