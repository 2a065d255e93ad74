"""Temperature-scaled contrastive losses over unit-norm embeddings.

Three variants share one kernel, :func:`masked_supcon`:

* ``self_contrast``   -- each anchor's only positive is its augmentation partner.
* ``image_supcon``    -- positives are all other views with the same image label.
* ``pixel_supcon``    -- positives are pixels sharing a semantic class; the loss
  is averaged over anchors instead of summed.

Each fast path has a literal nested-loop counterpart in :func:`contrast_oracle`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import logsumexp

VOID = 255


class ContrastError(ValueError):
    pass


@dataclass
class EmbeddingBatch:
    """2N embeddings where rows (2k, 2k+1) are two views of source k."""

    embeddings: np.ndarray
    image_labels: np.ndarray
    temperature: float = 0.07
    normalized: bool = True
    pairing: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.image_labels = np.asarray(self.image_labels)
        n = self.embeddings.shape[0]
        if self.embeddings.ndim != 2 or n < 2:
            raise ContrastError("embeddings must be a (2N, D) matrix with 2N >= 2")
        if self.pairing is None:
            self.pairing = np.arange(n) ^ 1
        self.pairing = np.asarray(self.pairing, dtype=np.intp)
        idx = np.arange(n)
        if (self.pairing.shape != (n,) or np.any(self.pairing == idx)
                or np.any(self.pairing[self.pairing] != idx)):
            raise ContrastError("pairing must be a fixed-point-free involution")
        if self.image_labels.shape != (n,):
            raise ContrastError("need one image label per row")
        if not self.temperature > 0:
            raise ContrastError("temperature must be positive")
        if self.normalized:
            norms = np.linalg.norm(self.embeddings, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-9)
            if bad.size:
                raise ContrastError(f"row {bad[0]} is flagged normalized but has norm {norms[bad[0]]}")


@dataclass
class PixelContrastBatch:
    pixel_embeddings: np.ndarray
    pixel_labels: np.ndarray
    image_of_pixel: np.ndarray
    pool_policy: str = "batch"  # "batch" or "image"

    def __post_init__(self):
        self.pixel_embeddings = np.asarray(self.pixel_embeddings, dtype=np.float64)
        self.pixel_labels = np.asarray(self.pixel_labels)
        self.image_of_pixel = np.asarray(self.image_of_pixel)
        m = self.pixel_embeddings.shape[0]
        if m == 0:
            raise ContrastError("empty pixel pool")
        if m < 2:
            raise ContrastError(f"pixel pool needs at least 2 pixels, got {m}")
        if self.pixel_labels.shape != (m,) or self.image_of_pixel.shape != (m,):
            raise ContrastError("labels and image ids must have one entry per pixel")
        if np.any(self.pixel_labels == VOID):
            raise ContrastError("void pixels must be removed before contrast")
        if self.pool_policy not in ("batch", "image"):
            raise ContrastError(f"unknown pool policy {self.pool_policy!r}")


@dataclass
class ContrastResult:
    loss: float
    grad: np.ndarray
    anchors_used: int
    anchors_skipped: int = 0


def normalize_embeddings(raw: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    small = np.flatnonzero(norms.reshape(-1) < eps)
    if small.size:
        raise ContrastError(f"row {small[0]} has near-zero norm")
    return raw / norms


def normalize_backward(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back to the raw rows."""
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    u = raw / norms
    return (grad_unit - u * (grad_unit * u).sum(axis=-1, keepdims=True)) / norms


def masked_supcon(z: np.ndarray, positives: np.ndarray, candidates: np.ndarray,
                  temperature: float, reduce: str = "sum"):
    """Loss and gradient of the masked supervised-contrastive objective.

    ``candidates[i, a]`` marks the softmax denominator set A(i) and
    ``positives[i, p]`` the positive set P(i) (a subset of A(i)). Anchors with
    an empty P(i) are skipped. Returns ``(loss, grad, used, skipped)``.
    """
    n = z.shape[0]
    sim = (z @ z.T) / temperature
    has_cand = candidates.any(axis=1)
    logits = np.where(candidates, sim, -np.inf)
    lse = logsumexp(np.where(has_cand[:, None], logits, 0.0), axis=1)
    n_pos = positives.sum(axis=1)
    used = n_pos > 0
    n_used = int(used.sum())
    if n_used == 0:
        raise ContrastError("no positive pairs in batch")
    inv = np.where(used, 1.0 / np.maximum(n_pos, 1), 0.0)
    per_anchor = inv * (n_pos * lse - np.where(positives, sim, 0.0).sum(axis=1))
    loss = float(per_anchor.sum())
    prob = np.where(candidates, np.exp(logits - lse[:, None]), 0.0)
    gsim = used[:, None] * prob - positives * inv[:, None]
    if reduce == "mean":
        loss /= n_used
        gsim /= n_used
    grad = ((gsim + gsim.T) @ z) / temperature
    return loss, grad, n_used, n - n_used


def _pair_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = labels.shape[0]
    off_diag = ~np.eye(n, dtype=bool)
    return (labels[:, None] == labels[None, :]) & off_diag, off_diag


def _require_normalized(batch: EmbeddingBatch) -> None:
    if not batch.normalized:
        raise ContrastError("batch is not normalized; call normalize_embeddings first")


def self_contrast(batch: EmbeddingBatch) -> ContrastResult:
    _require_normalized(batch)
    n = batch.embeddings.shape[0]
    positives = np.zeros((n, n), dtype=bool)
    positives[np.arange(n), batch.pairing] = True
    candidates = ~np.eye(n, dtype=bool)
    loss, grad, used, skipped = masked_supcon(batch.embeddings, positives, candidates,
                                              batch.temperature)
    return ContrastResult(loss, grad, used, skipped)


def image_supcon(batch: EmbeddingBatch) -> ContrastResult:
    _require_normalized(batch)
    positives, candidates = _pair_masks(batch.image_labels)
    loss, grad, used, skipped = masked_supcon(batch.embeddings, positives, candidates,
                                              batch.temperature)
    return ContrastResult(loss, grad, used, skipped)


def pixel_masks(batch: PixelContrastBatch) -> tuple[np.ndarray, np.ndarray]:
    positives, candidates = _pair_masks(batch.pixel_labels)
    if batch.pool_policy == "image":
        same = batch.image_of_pixel[:, None] == batch.image_of_pixel[None, :]
        positives &= same
        candidates &= same
    return positives, candidates


def pixel_supcon(batch: PixelContrastBatch, temperature: float = 0.07) -> ContrastResult:
    if not temperature > 0:
        raise ContrastError("temperature must be positive")
    positives, candidates = pixel_masks(batch)
    loss, grad, used, skipped = masked_supcon(batch.pixel_embeddings, positives, candidates,
                                              temperature, reduce="mean")
    return ContrastResult(loss, grad, used, skipped)


def contrast_oracle(kind: str, batch, temperature: float | None = None) -> float:
    """Reference value by explicit loops and direct exponentials (no log-sum-exp)."""
    if kind in ("self", "image"):
        _require_normalized(batch)
        z, tau = batch.embeddings, batch.temperature
        n = z.shape[0]
        total, contributing = 0.0, 0
        for i in range(n):
            denom = 0.0
            for a in range(n):
                if a != i:
                    denom += math.exp(float(np.dot(z[i], z[a])) / tau)
            if kind == "self":
                pos = [int(batch.pairing[i])]
            else:
                pos = [p for p in range(n) if p != i and batch.image_labels[p] == batch.image_labels[i]]
            if not pos:
                continue
            contributing += 1
            acc = 0.0
            for p in pos:
                acc += math.log(math.exp(float(np.dot(z[i], z[p])) / tau) / denom)
            total -= acc / len(pos)
        if contributing == 0:
            raise ContrastError("no positive pairs in batch")
        return total
    if kind == "pixel":
        if temperature is None or not temperature > 0:
            raise ContrastError("temperature must be positive")
        z = batch.pixel_embeddings
        lab, img = batch.pixel_labels, batch.image_of_pixel
        m = z.shape[0]
        same_image_only = batch.pool_policy == "image"
        total, contributing = 0.0, 0
        for i in range(m):
            cand = [a for a in range(m) if a != i and (not same_image_only or img[a] == img[i])]
            pos = [p for p in cand if lab[p] == lab[i]]
            if not pos:
                continue
            denom = 0.0
            for a in cand:
                denom += math.exp(float(np.dot(z[i], z[a])) / temperature)
            acc = 0.0
            for p in pos:
                acc += math.log(math.exp(float(np.dot(z[i], z[p])) / temperature) / denom)
            total -= acc / len(pos)
            contributing += 1
        if contributing == 0:
            raise ContrastError("no positive pairs in batch")
        return total / contributing
    raise ValueError(f"unknown contrast kind {kind!r}")


def sample_pixel_anchors(feature_map: np.ndarray, label_map: np.ndarray, cap_per_image: int,
                         seed, pool_policy: str = "batch") -> tuple[PixelContrastBatch, np.ndarray]:
    """Class-stratified per-image sampling of non-void pixels.

    ``feature_map`` is (B, H, W, D) or (H, W, D); ``label_map`` matches its
    spatial shape. Returns the batch and the flat indices into (B*H*W) that
    were sampled, so callers can gather the corresponding rows of a
    differentiable feature tensor.
    """
    if cap_per_image < 2:
        raise ContrastError("cap_per_image must be at least 2")
    feats = np.asarray(feature_map, dtype=np.float64)
    labels = np.asarray(label_map)
    if feats.ndim == 3:
        feats, labels = feats[None], labels[None]
    if feats.shape[:3] != labels.shape:
        raise ContrastError(f"label map {labels.shape} not aligned with features {feats.shape[:3]}")
    rng = np.random.default_rng(seed)
    b, h, w, d = feats.shape
    chosen = []
    for k in range(b):
        flat = labels[k].reshape(-1)
        valid = np.flatnonzero(flat != VOID)
        if valid.size <= cap_per_image:
            picked = valid
        else:
            classes = np.unique(flat[valid])
            first = []
            if classes.size <= cap_per_image:
                for c in classes:
                    members = valid[flat[valid] == c]
                    first.append(members[rng.integers(members.size)])
            else:
                for c in rng.choice(classes, size=cap_per_image, replace=False):
                    members = valid[flat[valid] == c]
                    first.append(members[rng.integers(members.size)])
            first = np.array(first, dtype=np.intp)
            rest = np.setdiff1d(valid, first)
            extra = rng.choice(rest, size=cap_per_image - first.size, replace=False)
            picked = np.sort(np.concatenate([first, extra]))
        chosen.append(picked + k * h * w)
    index = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.intp)
    if index.size == 0:
        raise ContrastError("all pixels are void")
    flat_feats = feats.reshape(-1, d)
    flat_labels = labels.reshape(-1)
    batch = PixelContrastBatch(flat_feats[index], flat_labels[index], index // (h * w), pool_policy)
    return batch, index
