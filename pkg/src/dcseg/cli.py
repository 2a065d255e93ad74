"""``dcseg`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
Human-readable output goes to stderr; stdout carries JSON or paths only.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import checkpoint as ckpt
from . import experiment as exp
from . import metrics, synth, trainer, verify
from .model import ToyNetConfig, param_shapes
from .segloss import SegLossError, count_class_frequencies

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2
RUN_CONFIG_KEYS = {"train", "model", "data", "out", "seeds"}

log = logging.getLogger("dcseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def echo_config(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


def emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _build(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise UsageError(f"{where}: unknown keys {unknown}")
    doc = dict(doc)
    for k in ("widths", "scale_range"):
        if k in doc and isinstance(doc[k], list):
            doc[k] = tuple(doc[k])
    try:
        obj = cls(**doc)
        obj.validate()
    except (TypeError, ValueError) as err:
        raise UsageError(f"{where}: {err}") from None
    return obj


def load_run_config(path) -> dict:
    """Parse and validate a run config; see README for the schema."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read config {path}: {err}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(doc) - RUN_CONFIG_KEYS)
    if unknown:
        raise UsageError(f"config: unknown keys {unknown}")
    for key in ("data", "out"):
        if not isinstance(doc.get(key), str):
            raise UsageError(f"config: '{key}' must be a path string")
    train_cfg = _build(trainer.TrainConfig, doc.get("train", {}), "config.train")
    model_cfg = _build(ToyNetConfig, doc.get("model", {}), "config.model")
    seeds = doc.get("seeds", [train_cfg.seed])
    if not (isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds)):
        raise UsageError("config: 'seeds' must be a non-empty list of integers")
    return {"train": train_cfg, "model": model_cfg, "data": doc["data"], "out": doc["out"], "seeds": seeds}


def resolved(run: dict) -> dict:
    return {"train": run["train"].to_dict(), "model": run["model"].to_dict(),
            "data": run["data"], "out": run["out"], "seeds": list(run["seeds"])}


# commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    echo_config({"command": "gen-data", "out": str(out), "seed": args.seed, "size": args.size,
                 "resolution": args.resolution, "clear": args.clear})
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    if args.size < 1 or args.resolution < 16:
        raise UsageError("--size must be >= 1 and --resolution >= 16")
    per = {"train": args.size, "val": max(1, args.size // 4)}
    scenes = synth.generate_dataset(args.seed, per, args.resolution, clear=args.clear)
    manifest = synth.write_dataset(out, scenes)
    train_maps = [s for s in scenes if s.split == "train"]
    table = count_class_frequencies([s.label_map for s in train_maps], len(synth.CLASS_NAMES),
                                    [s.sample_id for s in train_maps])
    table.save(out / "freq_cache.json")
    log.info("wrote %d samples to %s", len(scenes), out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    echo_config(resolved(run))
    dataset = synth.read_dataset(run["data"])
    out = Path(run["out"])
    outputs = []
    for seed in run["seeds"]:
        cfg = replace(run["train"], seed=seed)
        target = out if len(run["seeds"]) == 1 else out / f"seed_{seed}"
        trainer.train(cfg, run["model"], dataset, target)
        config_doc = trainer.run_config(cfg, run["model"])
        (target / "run_config.json").write_text(json.dumps(config_doc, indent=2, sort_keys=True) + "\n")
        outputs.append({"seed": seed, "metrics": str(target / "metrics.csv"),
                        "checkpoint": str(target / "checkpoint.bin")})
    emit(outputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else path.with_name("run_config.json")
    if not config_path.is_file():
        raise UsageError(f"no run config at {config_path} (pass --config)")
    doc = json.loads(config_path.read_text())
    model_cfg = _build(ToyNetConfig, doc["model"], "model")
    echo_config({"command": "eval", "checkpoint": str(path), "data": args.data, "split": args.split,
                 "model": model_cfg.to_dict()})
    params, _, digest = ckpt.load_checkpoint(path, param_shapes(model_cfg))
    if digest != ckpt.config_hash(doc):
        log.warning("config hash in %s does not match %s", path, config_path)
    dataset = synth.read_dataset(args.data)
    scenes = dataset.split(args.split)
    if not scenes:
        raise UsageError(f"split {args.split!r} is empty")
    report = trainer.evaluate(params, model_cfg, scenes, dataset.manifest.get("class_names"))
    text = metrics.report_json(report)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _suite_exit(name: str, result: verify.SuiteResult) -> int:
    for kind, worst in sorted(result.worst.items()):
        log.info("%s %-8s worst %.3e", name, kind, worst)
    emit({"suite": name, "worst": result.worst, "counts": result.counts, "failures": result.failures, "ok": result.ok})
    return EXIT_OK if result.ok else EXIT_VERIFY


def cmd_grad_check(args) -> int:
    echo_config({"command": "grad-check", "instances": args.instances, "seed": args.seed,
                 "step": args.step, "tol": args.tol})
    return _suite_exit("grad-check", verify.grad_check_suite(args.instances, args.seed, args.step, args.tol))


def cmd_loss_oracle(args) -> int:
    echo_config({"command": "loss-oracle", "instances": args.instances, "seed": args.seed, "tol": args.tol})
    return _suite_exit("loss-oracle", verify.loss_oracle_suite(args.instances, args.seed, args.tol))


def cmd_bench(args) -> int:
    echo_config({"command": "bench", "sizes": args.sizes, "edt_sizes": args.edt_sizes, "seed": args.seed})
    emit(verify.bench(tuple(args.sizes), tuple(args.edt_sizes), seed=args.seed, min_time=args.min_time))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = exp.ExperimentConfig(tuple(args.modes), tuple(args.seeds), args.epochs, args.data_seed)
    echo_config({"command": "experiment", **cfg.to_dict(), "cache": args.cache})
    summary = exp.run_experiment(cfg, cache_dir=args.cache)
    modes = [trainer.resolve_mode(m) for m in args.modes]
    summary["comparisons"] = {f"{m} vs {modes[0]}": exp.compare(summary, m, modes[0]) for m in modes[1:]}
    emit(summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=400, help="train samples per condition (val gets a quarter)")
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--clear", action="store_true", help="disable weather transforms (pretraining set)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="run config written by train (default: next to the checkpoint)")
    e.add_argument("--split", default="val")
    e.add_argument("--out", help="also write the report JSON here")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suites")
    gc.add_argument("--instances", type=int, default=50)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_grad_check)

    lo = sub.add_parser("loss-oracle", help="fast kernels vs brute-force references")
    lo.add_argument("--instances", type=int, default=200)
    lo.add_argument("--seed", type=int, default=0)
    lo.add_argument("--tol", type=float, default=1e-10)
    lo.set_defaults(func=cmd_loss_oracle)

    b = sub.add_parser("bench", help="time the loss kernels and EDT")
    b.add_argument("--sizes", type=int, nargs="+", default=[4, 16, 64])
    b.add_argument("--edt-sizes", type=int, nargs="+", default=[32, 64, 128])
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--min-time", type=float, default=0.05)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("experiment", help="compare loss modes over several seeds")
    x.add_argument("--modes", nargs="+", default=["b", "g", "f"], help="first mode is the baseline")
    x.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    x.add_argument("--epochs", type=int, default=exp.ExperimentConfig.epochs)
    x.add_argument("--data-seed", type=int, default=0)
    x.add_argument("--cache", help="directory for per-run results")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"dcseg: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (synth.DatasetError, ckpt.CheckpointError, trainer.TrainError, SegLossError) as err:
        print(f"dcseg: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
