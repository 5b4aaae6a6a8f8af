"""Command line: ``labelshift <subcommand> --config <file|E1|E2|E3> --seed N``.

Subcommands map onto pipeline stages and exchange artifacts through the
output directory, so each can run on its own:

    generate   write source/target datasets            -> data/
    train      align (or source-only) training          -> checkpoints/net.ckpt
    estimate   label distribution estimates             -> distributions.json
    rectify    classifier refinement or IA record       -> checkpoints/rectified-<mode>.ckpt
    evaluate   score a checkpoint on target_eval        -> evaluation-<name>.json
    experiment the whole pipeline                       -> report.json and CSVs
    sweep      estimation-quality sweep (oracle model)  -> sweep.json, sweep.csv

The output directory is ``--out`` if given, else ``<root>/<output_dir>``
where root is ``$LABELSHIFT_OUTPUT_ROOT`` (default ``runs``) and
output_dir defaults to ``<preset>-seed<seed>``. Exit status is 0 only on
success, 2 for an invalid configuration and 1 for any other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import storage
from .core import LabelDistribution
from .experiment import (ConfigError, Datasets, Estimates, ExperimentConfig, Predictor,
                         build_datasets, emit_report, estimate_stage, estimation_sweep,
                         evaluate, priors_for, rectification_record, rectify, run_experiment,
                         train_stage)

ENV_ROOT = "LABELSHIFT_OUTPUT_ROOT"
LOCK_NAME = ".lock"
_SPLITS = ("source_train", "target_train", "target_eval")


class LockedError(RuntimeError):
    pass


@contextmanager
def output_lock(out: Path):
    """Exclusive ownership of ``out`` for the life of the command."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def resolve_output(cfg: ExperimentConfig, out_arg: str | None) -> Path:
    if out_arg:
        return Path(out_arg)
    root = Path(os.environ.get(ENV_ROOT, "runs"))
    name = cfg.raw["output_dir"] or f"{cfg.preset}-seed{cfg.seed}"
    return root / name


def _load_cfg(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _datasets(cfg: ExperimentConfig, data_dir: Path | None) -> Datasets:
    if data_dir is None or not (data_dir / "source_train").exists():
        return build_datasets(cfg)
    parts = [storage.load_dataset(data_dir / s, expect=cfg.source) for s in _SPLITS]
    return Datasets(*parts)


def _data_dir(args, out: Path) -> Path:
    return Path(args.data) if getattr(args, "data", None) else out / "data"


def _ckpt_path(args, out: Path, default: str) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / "checkpoints" / default


def _dims(cfg):
    return {"net": cfg.net_dims()}


def cmd_generate(cfg, args, out):
    data = build_datasets(cfg)
    for name in _SPLITS:
        storage.save_dataset(getattr(data, name), out / "data" / name)
    return {"datasets": str(out / "data"), "scenes": {s: len(getattr(data, s)) for s in _SPLITS}}


def cmd_train(cfg, args, out):
    data = _datasets(cfg, _data_dir(args, out))
    res = train_stage(cfg, data)
    nets = {"net": res.net}
    if res.disc is not None:
        nets["disc"] = res.disc
    path = storage.save_checkpoint(out / "checkpoints" / "net.ckpt",
                                   storage.Checkpoint(nets, len(res.history)))
    if res.source_only is not None:
        storage.save_checkpoint(out / "checkpoints" / "source_only.ckpt",
                                storage.Checkpoint({"net": res.source_only}, cfg.align.iterations))
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "L_seg", "L_adv", "L_D"])
        for it, ls, la, ld in res.history:
            w.writerow([int(it), repr(float(ls)), repr(float(la)), repr(float(ld))])
    return {"checkpoint": str(path), "iterations": len(res.history)}


def cmd_estimate(cfg, args, out):
    data = _datasets(cfg, _data_dir(args, out))
    ckpt = storage.load_checkpoint(_ckpt_path(args, out, "net.ckpt"), _dims(cfg))
    est = estimate_stage(cfg, data, ckpt.net)
    path = storage.write_json(out / "distributions.json", est.to_dict())
    return {"distributions": str(path), "l1_p_t": est.l1}


def _priors(cfg, args, out):
    dist = Path(args.distributions) if args.distributions else out / "distributions.json"
    est = Estimates.from_dict(json.loads(dist.read_text())) if dist.exists() else None
    return priors_for(cfg, est)


def cmd_rectify(cfg, args, out):
    data = _datasets(cfg, _data_dir(args, out))
    ckpt = storage.load_checkpoint(_ckpt_path(args, out, "net.ckpt"), _dims(cfg))
    p_s, p_t, provenance = _priors(cfg, args, out)
    modes = [args.mode] if args.mode else [m for m in cfg.raw["rectification"] if m != "none"]
    written = {}
    for mode in modes:
        pred = rectify(cfg, ckpt.net, data.source_train, mode, p_s, p_t)
        path = storage.save_checkpoint(
            out / "checkpoints" / f"rectified-{mode}.ckpt",
            storage.Checkpoint({"net": pred.net}, ckpt.iteration,
                               rectification_record(mode, p_s, p_t, provenance)))
        written[mode] = str(path)
    return {"checkpoints": written}


def cmd_evaluate(cfg, args, out):
    data = _datasets(cfg, _data_dir(args, out))
    path = _ckpt_path(args, out, "net.ckpt")
    ckpt = storage.load_checkpoint(path, _dims(cfg))
    rec = ckpt.rectification or {"mode": "none"}
    ia = None
    if rec["mode"] == "IA":
        ia = (LabelDistribution(rec["p_t"]), LabelDistribution(rec["p_s"]))
    metrics = evaluate(Predictor(ckpt.net, ia, rec["mode"]), data.target_eval)
    result = {"checkpoint": str(path), "rectification": rec, **metrics}
    storage.write_json(out / f"evaluation-{path.stem}.json", result)
    return result


def cmd_experiment(cfg, args, out):
    report = run_experiment(cfg, out)
    return {"report": str(out / "report.json"),
            "miou": {k: v["miou"] for k, v in report.variants.items()}}


def cmd_sweep(cfg, args, out):
    rows = estimation_sweep(cfg)
    storage.write_json(out / "sweep.json", {"config_hash": cfg.config_hash(), "rows": rows})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["blob_count", "scenes", "min_pixels", "l1_p_t", "source_exact"])
        for r in rows:
            w.writerow([r["blob_count"], r["scenes"], r["min_pixels"], repr(r["l1_p_t"]),
                        int(r["source_exact"])])
    return {"sweep": str(out / "sweep.csv"), "rows": len(rows)}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "rectify": cmd_rectify,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelshift", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="JSON config file or a packaged preset name (E1, E2, E3)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        if name in ("train", "estimate", "rectify", "evaluate"):
            p.add_argument("--data", default=None,
                           help="dataset directory from `generate` (default <out>/data; "
                                "regenerated in memory when absent)")
        if name in ("estimate", "rectify", "evaluate"):
            p.add_argument("--checkpoint", default=None)
        if name == "rectify":
            p.add_argument("--mode", choices=["IA", "CR", "CLS"], default=None)
            p.add_argument("--distributions", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
    except ConfigError as exc:
        print(json.dumps(exc.to_dict(), indent=2), file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    out = resolve_output(cfg, args.out)
    try:
        with output_lock(out):
            result = COMMANDS[args.command](cfg, args, out)
    except LockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure maps to a non-zero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
