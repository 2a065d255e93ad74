"""Procedural road scenes, weather transforms, and two-view augmentation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm

VOID = 255
CLASS_NAMES = ("sky", "road", "sidewalk", "building", "vehicle", "pole")
SKY, ROAD, SIDEWALK, BUILDING, VEHICLE, POLE = range(6)
CONDITIONS = ("fog", "night", "rain", "snow")
SPLITS = ("train", "val")

_BASE_COLORS = np.array([
    [0.55, 0.70, 0.90],  # sky
    [0.35, 0.35, 0.37],  # road
    [0.62, 0.58, 0.52],  # sidewalk
    [0.55, 0.42, 0.35],  # building
    [0.70, 0.15, 0.15],  # vehicle (recolored per blob)
    [0.20, 0.20, 0.22],  # pole
])


class SynthError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    height: int = 64
    width: int = 64
    horizon: tuple[float, float] = (0.35, 0.5)
    road_bottom: tuple[float, float] = (0.55, 0.9)  # width of road at the bottom row, fraction of W
    road_top: tuple[float, float] = (0.04, 0.12)  # width at the horizon
    sidewalk: tuple[float, float] = (0.08, 0.2)
    vehicles: tuple[int, int] = (1, 4)
    poles: tuple[int, int] = (0, 3)

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise SynthError("scene must be at least 8x8")
        if not (0 < self.horizon[0] <= self.horizon[1] < 0.9):
            raise SynthError("horizon fraction must lie in (0, 0.9)")
        if self.road_bottom[0] <= 0 or self.road_bottom[1] <= 0 or self.road_bottom[0] > self.road_bottom[1]:
            raise SynthError("degenerate geometry: zero-area road")
        if self.road_top[0] < 0 or self.road_top[0] > self.road_top[1]:
            raise SynthError("invalid road top width")
        if self.vehicles[0] > self.vehicles[1] or self.poles[0] > self.poles[1]:
            raise SynthError("invalid object count range")


@dataclass
class LabeledScene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    label_map: np.ndarray  # (H, W) uint8, VOID = 255
    condition: int
    split: str = "train"
    sample_id: str = ""
    depth: np.ndarray | None = field(default=None, repr=False)


def _rng(*seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))


def generate_scene(seed, geometry: GeometryConfig | None = None, condition: int = 0,
                   split: str = "train", sample_id: str = "") -> LabeledScene:
    """Clear-weather scene; ``condition`` is only recorded, not applied."""
    g = geometry or GeometryConfig()
    g.validate()
    rng = _rng(*np.atleast_1d(seed))
    h, w = g.height, g.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    label = np.full((h, w), SKY, dtype=np.uint8)

    hz = rng.uniform(*g.horizon) * h
    vx = rng.uniform(0.35, 0.65) * w
    bottom = rng.uniform(*g.road_bottom) * w
    top = rng.uniform(*g.road_top) * w
    bx = rng.uniform(0.3, 0.7) * w
    walk = rng.uniform(*g.sidewalk) * w

    below = yy >= hz
    t = np.clip((yy - hz) / max(h - 1 - hz, 1.0), 0.0, 1.0)  # 0 at horizon, 1 at bottom
    center = vx + (bx - vx) * t
    half = 0.5 * (top + (bottom - top) * t)
    road = below & (np.abs(xx - center) <= half)
    side = below & ~road & (np.abs(xx - center) <= half + walk * (0.3 + t))

    label[below] = BUILDING
    label[side] = SIDEWALK
    label[road] = ROAD

    # building skyline on both sides
    for x0, x1 in ((0, vx - top), (vx + top, w)):
        x = x0
        while x < x1:
            bw = rng.uniform(0.08, 0.25) * w
            roof = rng.uniform(0.1, 0.9) * hz
            cols = (xx >= x) & (xx < min(x + bw, x1))
            label[cols & (yy >= roof) & ~below] = BUILDING
            x += bw

    depth = np.where(below, 1.0 - t, 1.0)
    depth = np.where(label == BUILDING, np.maximum(depth, 0.8), depth)

    image = _BASE_COLORS[label].copy()
    tint = rng.uniform(-0.06, 0.06, size=(len(CLASS_NAMES), 3))
    image += tint[label]
    image[label == SKY] += ((yy[label == SKY] / h) * 0.15)[:, None]

    # lane marking: dashed line along the road centre
    dash = road & (np.abs(xx - center) <= 0.5 + 0.8 * t) & (((yy - hz) // 3) % 2 == 0)
    image[dash] = [0.9, 0.9, 0.85]

    # windows on buildings
    win = (label == BUILDING) & (xx % 5 < 2) & (yy % 6 < 2) & ~below
    image[win] *= rng.uniform(0.5, 0.8)

    n_veh = rng.integers(g.vehicles[0], g.vehicles[1] + 1)
    for _ in range(n_veh):
        tv = rng.uniform(0.25, 0.95)
        cy = hz + tv * (h - 1 - hz)
        cx = vx + (bx - vx) * tv + rng.uniform(-0.7, 0.7) * 0.5 * (top + (bottom - top) * tv)
        rx = (0.04 + 0.12 * tv) * w * rng.uniform(0.8, 1.3)
        ry = rx * rng.uniform(0.55, 0.8)
        blob = (np.abs((xx - cx) / rx) ** 4 + np.abs((yy - cy) / ry) ** 4) <= 1.0
        label[blob] = VEHICLE
        image[blob] = rng.uniform(0.05, 0.95, size=3)
        depth[blob] = np.maximum(0.0, 1.0 - tv)

    n_pole = rng.integers(g.poles[0], g.poles[1] + 1)
    for _ in range(n_pole):
        tp = rng.uniform(0.2, 1.0)
        base = hz + tp * (h - 1 - hz)
        sign = rng.choice([-1.0, 1.0])
        px = vx + (bx - vx) * tp + sign * (0.5 * (top + (bottom - top) * tp) + walk * 0.4 * (0.3 + tp))
        width = 1.0 + 1.5 * tp
        height = (0.35 + 0.5 * tp) * h
        pole = (np.abs(xx - px) < width / 2 + 0.25) & (yy <= base) & (yy >= base - height)
        label[pole] = POLE
        image[pole] = _BASE_COLORS[POLE] + tint[POLE]
        depth[pole] = np.maximum(0.0, 1.0 - tp)

    image += rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return LabeledScene(image, label, int(condition), split, sample_id, depth)


def apply_condition(scene: LabeledScene, condition, seed, strength: float | None = None) -> LabeledScene:
    """Photometric weather transform; the label map is never touched."""
    if isinstance(condition, str):
        if condition not in CONDITIONS:
            raise SynthError(f"unknown condition {condition!r}")
        condition = CONDITIONS.index(condition)
    if condition not in range(len(CONDITIONS)):
        raise SynthError(f"unknown condition id {condition}")
    rng = _rng(*np.atleast_1d(seed), 7919 + condition)
    img = scene.image.astype(np.float64).copy()
    h, w = img.shape[:2]
    if strength is None:
        strength = rng.uniform(0.5, 0.85)
    name = CONDITIONS[condition]
    if name == "fog":
        depth = scene.depth if scene.depth is not None else np.linspace(1.0, 0.0, h)[:, None] * np.ones((1, w))
        a = strength * (0.35 + 0.65 * depth)
        img = (1.0 - a[..., None]) * img + a[..., None] * 0.7
    elif name == "night":
        img = img ** 2.2 * np.array([0.55, 0.6, 0.8]) * (1.2 - strength * 0.5)
        img[..., 2] += 0.02 * (1.0 - img[..., 2]) * img[..., 2]
    elif name == "rain":
        img *= 0.85
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(int(strength * h * w / 40)):
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            length = rng.integers(3, 8)
            for s in range(length):
                y, x = y0 + s, x0 + s // 2
                if y < h and x < w:
                    img[y, x] += 0.25
    else:  # snow
        img = 0.85 * img + 0.1
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(int(strength * h * w / 60)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(0.6, 1.6)
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            img[disk] = 0.95
    img = np.clip(img, 0.0, 1.0)
    return LabeledScene(img, scene.label_map, condition, scene.split, scene.sample_id, scene.depth)


@dataclass(frozen=True)
class AugmentRecord:
    y0: float
    x0: float
    side: float
    scale: float
    out_size: int


def _sample_grid(rec: AugmentRecord) -> tuple[np.ndarray, np.ndarray]:
    step = rec.side / rec.out_size
    coords = (np.arange(rec.out_size) + 0.5) * step - 0.5
    return rec.y0 + coords, rec.x0 + coords


def resample(image: np.ndarray, labels: np.ndarray, rec: AugmentRecord) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear for the image, nearest for labels; outside the source is 0 / void."""
    h, w = labels.shape
    ys, xs = _sample_grid(rec)

    yi = np.rint(ys).astype(np.intp)
    xi = np.rint(xs).astype(np.intp)
    inside = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
    lab = np.full((rec.out_size, rec.out_size), VOID, dtype=np.uint8)
    lab[inside] = labels[np.clip(yi, 0, h - 1)[:, None], np.clip(xi, 0, w - 1)[None, :]][inside]

    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)))
    ys_p = np.clip(ys + 1, 0, h + 1)
    xs_p = np.clip(xs + 1, 0, w + 1)
    y0 = np.clip(np.floor(ys_p).astype(np.intp), 0, h)
    x0 = np.clip(np.floor(xs_p).astype(np.intp), 0, w)
    fy = (ys_p - y0)[:, None, None]
    fx = (xs_p - x0)[None, :, None]
    a = padded[y0][:, x0]
    b = padded[y0][:, x0 + 1]
    c = padded[y0 + 1][:, x0]
    d = padded[y0 + 1][:, x0 + 1]
    img = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
    return img, lab


def augment_view(scene: LabeledScene, seed, crop: int = 48, scale_range=(0.5, 2.0),
                 out_size: int | None = None) -> tuple[np.ndarray, np.ndarray, AugmentRecord]:
    """Random square crop then rescale by u ~ U(scale_range), resampled to ``out_size``.

    Cropping ``crop`` pixels at scale ``u`` covers ``crop / u`` source pixels;
    any part of that window outside the scene is padded (image 0, label void).
    """
    h, w = scene.label_map.shape
    if crop > min(h, w):
        raise SynthError(f"crop {crop} larger than image {h}x{w}")
    out_size = out_size or h
    rng = _rng(*np.atleast_1d(seed))
    u = rng.uniform(*scale_range)
    side = crop / u
    lo_y, hi_y = min(0.0, h - side), max(0.0, h - side)
    lo_x, hi_x = min(0.0, w - side), max(0.0, w - side)
    rec = AugmentRecord(float(rng.uniform(lo_y, hi_y)), float(rng.uniform(lo_x, hi_x)),
                        float(side), float(u), int(out_size))
    img, lab = resample(scene.image, scene.label_map, rec)
    return img, lab, rec


def identity_record(size: int) -> AugmentRecord:
    return AugmentRecord(0.0, 0.0, float(size), 1.0, size)


@dataclass
class MultiViewBatch:
    images: np.ndarray  # (2N, H, W, 3)
    labels: np.ndarray  # (2N, H, W)
    conditions: np.ndarray  # (2N,)
    records: list[AugmentRecord]
    source_ids: list[str]

    @property
    def pairing(self) -> np.ndarray:
        return np.arange(len(self.records)) ^ 1


def build_multiview_batch(sources: list[LabeledScene], seed, crop: int = 48,
                          scale_range=(0.5, 2.0), out_size: int | None = None) -> MultiViewBatch:
    if len(sources) < 1:
        raise SynthError("need at least one source scene")
    images, labels, conds, records, ids = [], [], [], [], []
    for k, scene in enumerate(sources):
        for v in range(2):
            img, lab, rec = augment_view(scene, (*np.atleast_1d(seed), k, v), crop, scale_range, out_size)
            images.append(img)
            labels.append(lab)
            conds.append(scene.condition)
            records.append(rec)
            ids.append(scene.sample_id)
    return MultiViewBatch(np.stack(images), np.stack(labels), np.array(conds), records, ids)


# dataset generation and on-disk layout

def generate_dataset(seed: int, per_condition: dict | None = None, resolution: int = 64,
                     clear: bool = False) -> list[LabeledScene]:
    """Balanced split: sample k of a split gets condition k mod 4."""
    per_condition = per_condition or {"train": 400, "val": 100}
    geometry = GeometryConfig(height=resolution, width=resolution)
    scenes = []
    for s_code, split in enumerate(SPLITS):
        n = per_condition.get(split, 0) * len(CONDITIONS)
        for k in range(n):
            cond = k % len(CONDITIONS)
            sid = f"{split}_{k:05d}"
            scene = generate_scene((seed, s_code, k), geometry, cond, split, sid)
            if not clear:
                scene = apply_condition(scene, cond, (seed, s_code, k, 1))
            scenes.append(scene)
    return scenes


@dataclass
class Dataset:
    root: Path | None
    manifest: dict
    scenes: list[LabeledScene]

    def split(self, name: str) -> list[LabeledScene]:
        return [s for s in self.scenes if s.split == name]

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])


def manifest_for(scenes: list[LabeledScene]) -> dict:
    h, w = scenes[0].label_map.shape if scenes else (0, 0)
    return {
        "format": "dcseg-dataset",
        "version": 1,
        "num_classes": len(CLASS_NAMES),
        "class_names": list(CLASS_NAMES),
        "conditions": list(CONDITIONS),
        "void": VOID,
        "height": int(h),
        "width": int(w),
        "samples": [
            {"id": s.sample_id, "condition": CONDITIONS[s.condition], "split": s.split,
             "image": f"images/{s.sample_id}.ppm", "label": f"labels/{s.sample_id}.pgm"}
            for s in scenes
        ],
    }


def write_dataset(directory, scenes: list[LabeledScene]) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in scenes:
        netpbm.write_ppm(root / "images" / f"{s.sample_id}.ppm", netpbm.quantize(s.image))
        netpbm.write_pgm(root / "labels" / f"{s.sample_id}.pgm", s.label_map.astype(np.uint8))
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest_for(scenes), indent=1, sort_keys=True) + "\n")
    return path


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"{root}: no manifest")
    try:
        manifest = json.loads(path.read_text())
        samples = manifest["samples"]
        h, w = int(manifest["height"]), int(manifest["width"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from None
    scenes = []
    for entry in samples:
        try:
            cond = CONDITIONS.index(entry["condition"])
            img_path, lab_path = root / entry["image"], root / entry["label"]
            sid, split = entry["id"], entry["split"]
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{path}: malformed sample entry {entry!r} ({exc})") from None
        for p in (img_path, lab_path):
            if not p.is_file():
                raise DatasetError(f"{p}: listed in manifest but missing")
        try:
            img = netpbm.read_ppm(img_path)
            lab = netpbm.read_pgm(lab_path)
        except netpbm.NetpbmError as exc:
            raise DatasetError(str(exc)) from None
        if img.shape[:2] != (h, w) or lab.shape != (h, w):
            raise DatasetError(f"{img_path.name}: dimension mismatch with manifest ({h}x{w})")
        scenes.append(LabeledScene(img.astype(np.float64) / 255.0, lab, cond, split, sid))
    return Dataset(root, manifest, scenes)


def directory_digest(directory) -> str:
    """SHA-256 over relative paths and contents of every file, in sorted order."""
    root = Path(directory)
    digest = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        digest.update(str(p.relative_to(root)).encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()
