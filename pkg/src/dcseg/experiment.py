"""Multi-seed comparison of loss modes on one synthetic dataset."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import synth
from .model import ToyNetConfig
from .trainer import TrainConfig, resolve_mode, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    modes: tuple[str, ...] = ("focal", "focal+image+pixel", "focal+self+pixel")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 40
    data_seed: int = 0

    def to_dict(self) -> dict:
        return {"modes": [resolve_mode(m) for m in self.modes], "seeds": list(self.seeds),
                "epochs": self.epochs, "data_seed": self.data_seed}


# modules whose code can change a training run's numbers
TRAINING_MODULES = ("numerics", "contrastive", "segloss", "synth", "netpbm", "model", "optim",
                    "trainer", "metrics")


def source_digest() -> str:
    """Hash of the training code, so cached results expire when it changes."""
    h = hashlib.sha256()
    for path in (Path(__file__).parent / f"{m}.py" for m in TRAINING_MODULES):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def run_key(train_cfg: TrainConfig, model_cfg: ToyNetConfig, data_seed: int) -> str:
    doc = {"train": train_cfg.to_dict(), "model": model_cfg.to_dict(), "data_seed": data_seed,
           "source": source_digest()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def run_experiment(cfg: ExperimentConfig, train_cfg: TrainConfig | None = None,
                   model_cfg: ToyNetConfig | None = None, cache_dir: str | Path | None = None,
                   dataset: synth.Dataset | None = None) -> dict:
    """Final-epoch validation mIoU for every (mode, seed).

    With ``cache_dir`` each finished run is stored as ``<key>.json`` and reused
    while the sources and configs are unchanged.
    """
    train_cfg = train_cfg or TrainConfig()
    model_cfg = model_cfg or ToyNetConfig()
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    runs = {}
    for mode in cfg.modes:
        mode = resolve_mode(mode)
        runs[mode] = {}
        for seed in cfg.seeds:
            tc = replace(train_cfg, loss_mode=mode, seed=seed, epochs=cfg.epochs)
            path = cache / f"{run_key(tc, model_cfg, cfg.data_seed)}.json" if cache else None
            if path is not None and path.is_file():
                doc = json.loads(path.read_text())
            else:
                if dataset is None:
                    scenes = synth.generate_dataset(cfg.data_seed)
                    dataset = synth.Dataset(None, synth.manifest_for(scenes), scenes)
                log.info("training mode=%s seed=%d for %d epochs", mode, seed, cfg.epochs)
                t0 = time.perf_counter()
                rows = train(tc, model_cfg, dataset).rows
                doc = {"config": tc.to_dict(), "rows": rows, "seconds": time.perf_counter() - t0}
                if path is not None:
                    path.write_text(json.dumps(doc))
            runs[mode][seed] = doc
    return summarize(runs)


def summarize(runs: dict) -> dict:
    final = {m: {s: d["rows"][-1]["val_miou"] for s, d in by_seed.items()} for m, by_seed in runs.items()}
    return {
        "final_miou": {m: {str(s): v for s, v in d.items()} for m, d in final.items()},
        "mean_miou": {m: float(np.mean(list(d.values()))) for m, d in final.items()},
        "seconds": {m: {str(s): d["seconds"] for s, d in by_seed.items()} for m, by_seed in runs.items()},
        "curves": {m: {str(s): [r["val_miou"] for r in d["rows"]] for s, d in by_seed.items()}
                   for m, by_seed in runs.items()},
    }


def compare(summary: dict, better: str, baseline: str) -> dict:
    a = summary["final_miou"][resolve_mode(better)]
    b = summary["final_miou"][resolve_mode(baseline)]
    seeds = sorted(set(a) & set(b), key=int)
    diffs = [a[s] - b[s] for s in seeds]
    return {"wins": sum(d > 0 for d in diffs), "seeds": len(seeds),
            "mean_gain_pp": 100.0 * float(np.mean(diffs)), "per_seed_pp": [100.0 * d for d in diffs]}
