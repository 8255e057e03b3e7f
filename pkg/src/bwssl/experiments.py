"""Run orchestration: execute one configured experiment into a self-describing
run directory, sweep preset variant lists, and flatten finished runs into
tidy plot-data CSVs.

A run directory carries config.json (verbatim echo), metrics.jsonl,
encoder.ckpt, probe.csv, correlation.json, corruption.csv and summary.json;
those files alone regenerate every plot table without re-training.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .config import ExperimentConfig, Preset, config_to_json, get_preset
from .data import load_dataset
from .errors import ConfigurationError, DataFormatError
from .evaluate import (correlation_diagnostics, corruption_eval, probe_report,
                       write_correlation_json, write_corruption_csv,
                       write_probe_csv)
from .layers import save_checkpoint
from .trainer import train

RUN_FILES = ("config.json", "metrics.jsonl", "encoder.ckpt", "probe.csv",
             "correlation.json", "corruption.csv", "summary.json")


@dataclass
class RunResult:
    run_dir: Path
    probe: object
    correlation: object
    corruption: object
    train_result: object


def run_experiment(cfg: ExperimentConfig, run_dir=None,
                   audit_every: int = 0) -> RunResult:
    """Train per the config, then probe, diagnose and corruption-test the
    frozen encoder, leaving all artifacts in the run directory."""
    if run_dir is None:
        run_dir = cfg.out_dir
    if run_dir is None:
        raise ConfigurationError("no output directory: set out_dir or run_dir")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    (run_dir / "config.json").write_text(config_to_json(cfg), encoding="utf-8")
    dataset = load_dataset(cfg.dataset)

    result = train(cfg, dataset, metrics_path=run_dir / "metrics.jsonl",
                   audit_every=audit_every)
    save_checkpoint(run_dir / "encoder.ckpt", result.encoder.checkpoint_entries())

    probe = probe_report(result.encoder, dataset, lr_grid=cfg.probe_lr_grid,
                         epochs=cfg.probe_epochs, batch=cfg.batch_size,
                         seed=cfg.seed)
    write_probe_csv(probe, run_dir / "probe.csv")

    stats = correlation_diagnostics(result.encoder, dataset.val_images,
                                    pipeline=cfg.augmentation.pipeline,
                                    seed=cfg.seed, batch=cfg.batch_size)
    write_correlation_json(stats, run_dir / "correlation.json")

    corruption = corruption_eval(result.encoder, probe.entries[-1], dataset,
                                 seed=cfg.seed, batch=cfg.batch_size)
    write_corruption_csv(corruption, run_dir / "corruption.csv")

    summary = {
        "regime": cfg.regime.kind,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "steps": result.steps,
        "top1_by_block": [e.top1 for e in probe.entries],
        "best_lr_by_block": [e.best_lr for e in probe.entries],
        "mean_on_diagonal_by_block": [float(e.on_diagonal.mean())
                                      for e in stats.entries],
        "clean_error": corruption.clean_error,
        "audit_failures": len(result.audit_failures),
    }
    with open(run_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)

    return RunResult(run_dir, probe, stats, corruption, result)


def _resolve_pretrained(cfg: ExperimentConfig, root: Path) -> ExperimentConfig:
    ckpt = cfg.regime.pretrained_checkpoint
    if cfg.regime.kind != "first-block-pretrained" or ckpt is None:
        return cfg
    path = Path(ckpt)
    if not path.is_absolute():
        path = root / path
    return replace(cfg, regime=replace(cfg.regime, pretrained_checkpoint=str(path)))


def run_preset(preset, out_root, seed=None, epochs=None, variants=None,
               audit_every: int = 0) -> dict:
    """Run every variant of a preset into out_root/<variant>/.

    ``preset`` is a name or a Preset. ``variants`` optionally restricts to a
    subset by name. Relative pretrained-checkpoint paths resolve against
    out_root, so earlier variants can feed later ones."""
    if not isinstance(preset, Preset):
        preset = get_preset(preset)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    selected = preset.variants
    if variants is not None:
        wanted = set(variants)
        unknown = wanted - {name for name, _ in preset.variants}
        if unknown:
            raise ConfigurationError(
                f"unknown variants {sorted(unknown)} in preset {preset.name}")
        selected = [(n, c) for n, c in preset.variants if n in wanted]

    results = {}
    for name, cfg in selected:
        overrides = {"out_dir": str(out_root / name)}
        if seed is not None:
            overrides["seed"] = seed
        if epochs is not None:
            overrides["epochs"] = epochs
        cfg = _resolve_pretrained(replace(cfg, **overrides), out_root)
        results[name] = run_experiment(cfg, audit_every=audit_every)

    _write_accuracy_table(results, out_root / "accuracy_vs_depth.csv")
    return results


def _write_accuracy_table(results: dict, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["variant", "block", "top1", "best_lr"])
        for name, res in results.items():
            for e in res.probe.entries:
                w.writerow([name, e.block, f"{e.top1:.6f}", e.best_lr])


# ---------------------------------------------------------------------------
# plot-data emission from finished run directories

def _check_run_dir(run_dir: Path):
    missing = [str(run_dir / f) for f in RUN_FILES
               if not (run_dir / f).is_file()]
    if missing:
        raise DataFormatError(
            "run directory missing artifacts: " + ", ".join(missing))


def _collect_runs(root: Path) -> list:
    """(variant, run_dir) pairs: the directory itself if it is a run,
    otherwise its immediate run subdirectories."""
    if not root.is_dir():
        raise DataFormatError(f"not a run directory: {root}")
    if (root / "config.json").is_file():
        return [(root.name, root)]
    runs = [(d.name, d) for d in sorted(root.iterdir())
            if d.is_dir() and (d / "config.json").is_file()]
    if not runs:
        raise DataFormatError(f"no runs found under {root}")
    return runs


def emit_plotdata(run_dir, out_dir=None) -> list:
    """Flatten one run (or a directory of variant runs) into tidy CSVs:
    accuracy vs depth, correlation violin samples, loss curves, corruption
    errors. Returns the written paths."""
    root = Path(run_dir)
    runs = _collect_runs(root)
    for _, d in runs:
        _check_run_dir(d)
    out = Path(out_dir) if out_dir is not None else root / "plotdata"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def table(name, header, rows):
        path = out / name
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    acc_rows, violin_rows, loss_rows, corr_rows = [], [], [], []
    for variant, d in runs:
        with open(d / "probe.csv", encoding="utf-8") as f:
            for row in list(csv.reader(f))[1:]:
                acc_rows.append([variant, row[0], row[1], row[2]])
        payload = json.loads((d / "correlation.json").read_text(encoding="utf-8"))
        for block in payload:
            for v in block["on_diagonal"]:
                violin_rows.append([variant, block["block"], "on", f"{v:.6f}"])
            for v in block["off_diagonal"]:
                violin_rows.append([variant, block["block"], "off", f"{v:.6f}"])
        with open(d / "metrics.jsonl", encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                loss_rows.append([variant, rec["step"], rec["block"],
                                  rec["loss"], rec["lr"]])
        with open(d / "corruption.csv", encoding="utf-8") as f:
            for row in list(csv.reader(f))[1:]:
                corr_rows.append([variant, row[0], row[1], row[2]])

    table("accuracy_vs_depth.csv", ["variant", "block", "top1", "best_lr"], acc_rows)
    table("correlation_violin.csv", ["variant", "block", "diagonal", "value"],
          violin_rows)
    table("loss_curves.csv", ["variant", "step", "block", "loss", "lr"], loss_rows)
    table("corruption_errors.csv", ["variant", "kind", "severity", "error"],
          corr_rows)
    return written
