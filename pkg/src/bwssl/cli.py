"""Command-line front end: train runs from JSON configs, probe/diagnose
finished runs, and flatten run directories into plot-data CSVs.

`--threads 1` caps the BLAS pools for bitwise-reproducible metrics; the env
var BWSSL_DATA_DIR supplies a default dataset path for file-backed sources.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

_THREAD_LIMITS = None  # keeps the threadpoolctl controller alive


def _set_threads(n: int):
    global _THREAD_LIMITS
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    import threadpoolctl
    _THREAD_LIMITS = threadpoolctl.threadpool_limits(limits=n)


def _apply_data_dir(cfg):
    d = cfg.dataset
    if d.source != "synthetic" and d.path is None:
        env = os.environ.get("BWSSL_DATA_DIR")
        if env:
            return replace(cfg, dataset=replace(d, path=env))
    return cfg


def _load_run(run_dir):
    """Rehydrate a finished run: config, dataset and frozen encoder."""
    from .augment import stream
    from .config import load_config
    from .data import load_dataset
    from .errors import DataFormatError
    from .layers import Encoder, load_checkpoint

    run = Path(run_dir)
    cfg_path = run / "config.json"
    ckpt_path = run / "encoder.ckpt"
    missing = [str(p) for p in (cfg_path, ckpt_path) if not p.is_file()]
    if missing:
        raise DataFormatError("not a finished run, missing: " + ", ".join(missing))
    cfg = _apply_data_dir(load_config(cfg_path))
    dataset = load_dataset(cfg.dataset)
    encoder = Encoder(cfg.effective_encoder(), rng=stream(cfg.seed, 1, 0))
    encoder.load_checkpoint_entries(load_checkpoint(ckpt_path))
    encoder.set_training(False)
    return run, cfg, dataset, encoder


def cmd_train(args) -> int:
    from .config import load_config
    from .experiments import run_experiment

    cfg = _apply_data_dir(load_config(args.config))
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = replace(cfg, **overrides)
    res = run_experiment(cfg, audit_every=args.audit_every)
    print(f"run complete: {res.run_dir}")
    for e in res.probe.entries:
        print(f"block {e.block}: top1={e.top1:.4f} (lr={e.best_lr})")
    return 0


def cmd_probe(args) -> int:
    from .evaluate import probe_report, write_probe_csv

    run, cfg, dataset, encoder = _load_run(args.run_dir)
    report = probe_report(encoder, dataset, lr_grid=cfg.probe_lr_grid,
                          epochs=cfg.probe_epochs, batch=cfg.batch_size,
                          seed=cfg.seed)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    write_probe_csv(report, out / "probe.csv")
    for e in report.entries:
        print(f"block {e.block}: top1={e.top1:.4f} (lr={e.best_lr})")
    return 0


def cmd_diagnose(args) -> int:
    from .evaluate import correlation_diagnostics, write_correlation_json

    run, cfg, dataset, encoder = _load_run(args.run_dir)
    stats = correlation_diagnostics(encoder, dataset.val_images,
                                    pipeline=cfg.augmentation.pipeline,
                                    seed=cfg.seed, batch=cfg.batch_size)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    write_correlation_json(stats, out / "correlation.json")
    for e in stats.entries:
        print(f"block {e.block}: on-diag mean={e.on_diagonal.mean():.4f} "
              f"off-diag mean|.|={abs(e.off_diagonal).mean():.4f}")
    return 0


def cmd_corrupt_eval(args) -> int:
    from .errors import ConfigurationError
    from .evaluate import (CORRUPTION_KINDS, corruption_eval, linear_probe,
                           write_corruption_csv)

    kinds = CORRUPTION_KINDS
    if args.kinds:
        kinds = tuple(k.strip() for k in args.kinds.split(","))
        unknown = [k for k in kinds if k not in CORRUPTION_KINDS]
        if unknown:
            raise ConfigurationError(
                f"unknown corruption kinds {unknown}; "
                f"choose from {list(CORRUPTION_KINDS)}")
    run, cfg, dataset, encoder = _load_run(args.run_dir)
    probe = linear_probe(encoder, len(encoder.blocks), dataset,
                         lr_grid=cfg.probe_lr_grid, epochs=cfg.probe_epochs,
                         batch=cfg.batch_size, seed=cfg.seed)
    report = corruption_eval(encoder, probe, dataset, kinds=kinds,
                             seed=cfg.seed, batch=cfg.batch_size)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    write_corruption_csv(report, out / "corruption.csv")
    print(f"clean error: {report.clean_error:.4f}")
    for kind, row in report.table.items():
        print(f"{kind}: mean error={row['mean']:.4f} (std {row['std']:.4f})")
    return 0


def cmd_emit_plotdata(args) -> int:
    from .experiments import emit_plotdata

    written = emit_plotdata(args.run_dir, out_dir=args.out)
    for path in written:
        print(path)
    return 0


def cmd_preset(args) -> int:
    from .config import PRESETS
    from .experiments import run_preset

    if args.name is None:
        for name in PRESETS:
            from .config import get_preset
            print(f"{name}: {get_preset(name).description}")
        return 0
    out = args.out or os.path.join("runs", args.name)
    variants = [v.strip() for v in args.variants.split(",")] if args.variants \
        else None
    results = run_preset(args.name, out, seed=args.seed, epochs=args.epochs,
                         variants=variants, audit_every=args.audit_every)
    for name, res in results.items():
        accs = " ".join(f"{e.top1:.4f}" for e in res.probe.entries)
        print(f"{name}: top1 by block [{accs}]")
    print(f"sweep complete: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, metavar="N",
                        help="cap BLAS/worker threads (1 = bitwise runs)")

    p = argparse.ArgumentParser(
        prog="bwssl",
        description="blockwise self-supervised training engine")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common],
                       help="run one experiment from a JSON config")
    t.add_argument("--config", required=True, help="experiment config JSON")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None, help="run directory override")
    t.add_argument("--audit-every", type=int, default=0, metavar="N",
                   help="gradient-isolation audit period in steps")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", parents=[common],
                        help="linear probes over a finished run")
    pr.add_argument("run_dir")
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_probe)

    dg = sub.add_parser("diagnose", parents=[common],
                        help="two-view correlation diagnostics of a run")
    dg.add_argument("run_dir")
    dg.add_argument("--out", default=None)
    dg.set_defaults(func=cmd_diagnose)

    ce = sub.add_parser("corrupt-eval", parents=[common],
                        help="corruption robustness of a finished run")
    ce.add_argument("run_dir")
    ce.add_argument("--out", default=None)
    ce.add_argument("--kinds", default=None,
                    help="comma-separated corruption kinds")
    ce.set_defaults(func=cmd_corrupt_eval)

    ep = sub.add_parser("emit-plotdata", parents=[common],
                        help="flatten run artifacts into tidy CSVs")
    ep.add_argument("run_dir")
    ep.add_argument("--out", default=None)
    ep.set_defaults(func=cmd_emit_plotdata)

    ps = sub.add_parser("preset", parents=[common],
                        help="run a named experiment family (no name: list)")
    ps.add_argument("name", nargs="?", default=None)
    ps.add_argument("--out", default=None)
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--epochs", type=int, default=None)
    ps.add_argument("--variants", default=None,
                    help="comma-separated variant subset")
    ps.add_argument("--audit-every", type=int, default=0)
    ps.set_defaults(func=cmd_preset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        _set_threads(args.threads)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
