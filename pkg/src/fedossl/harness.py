"""Run directories: write every artifact of an experiment, sweep values, compare runs.

Layout of one run directory::

    config.json        resolved configuration
    metrics.csv        per-round accuracies (deterministic given the config)
    rounds.csv         per-round timing, sampled clients, mean loss terms
    train_log.csv      per-batch loss breakdown of every client
    centroids/         round_NNN.json, local and global centroid sets
    matching/          round_NNN.json, unseen-class matching
    model.ckpt         final global model
    summary.json       best-round and final-round metrics
"""
from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from . import clustering, evaluation
from .config import ExperimentConfig, apply_preset, dump_config, load_config
from .federation import ExperimentResult, RoundRecord, run_experiment
from .numerics import ConfigurationError, save_checkpoint
from .objective import BREAKDOWN_KEYS

OUTPUT_ENV = "FEDOSSL_OUT"
TRAIN_LOG_COLUMNS = ("round", "client", "epoch", "batch") + BREAKDOWN_KEYS


def output_root(out: str | os.PathLike | None = None) -> Path:
    """Explicit directory, else $FEDOSSL_OUT, else ./runs."""
    if out is not None:
        return Path(out)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def rounds_csv_text(records: Sequence[RoundRecord]) -> str:
    """One row per sampled client per round: mean loss terms and the n/L anonymity."""
    header = ("round", "client", "duration_s", "anonymity") + tuple(f"mean_{k}" for k in BREAKDOWN_KEYS)
    rows = []
    for r in records:
        for c in r.sampled:
            rows.append([r.round_index, c, f"{r.duration:.4f}", _fmt(r.anonymity[c])]
                        + [_fmt(r.losses[c][k]) for k in BREAKDOWN_KEYS])
    return _csv_text(header, rows)


def train_log_csv_text(records: Sequence[RoundRecord]) -> str:
    rows = [[row[k] if k in ("round", "client", "epoch", "batch") else _fmt(row[k])
             for k in TRAIN_LOG_COLUMNS]
            for r in records for row in r.train_log]
    return _csv_text(TRAIN_LOG_COLUMNS, rows)


def _summary(result: ExperimentResult, cfg: ExperimentConfig) -> dict:
    def pack(index):
        if index is None:
            return None
        rep = result.records[index].metrics
        return {"round": index + 1, **rep.row()}

    gaps = evaluation.gap_report(result.reports) if result.records else None
    return {
        "preset": cfg.preset,
        "seed": cfg.seed,
        "rounds": len(result.records),
        "best": pack(result.best_index),
        "final": pack(len(result.records) - 1 if result.records else None),
        "best_gap": None if gaps is None else gaps.best_gap,
        "final_gap": None if gaps is None else gaps.final_gap,
    }


def run_to_directory(cfg: ExperimentConfig, out_dir) -> ExperimentResult:
    """Run one experiment and write its artifacts; per-round files appear as rounds finish."""
    out = Path(out_dir)
    (out / "centroids").mkdir(parents=True, exist_ok=True)
    (out / "matching").mkdir(exist_ok=True)
    dump_config(cfg, out / "config.json")

    def on_round(rec: RoundRecord):
        sets = list(rec.local_centroids) + ([rec.global_centroids] if rec.global_centroids else [])
        clustering.dump_centroids(sets, out / "centroids" / f"round_{rec.round_index:03d}.json",
                                  rec.round_index)
        if rec.metrics is not None:
            evaluation.dump_matching(rec.metrics, out / "matching" / f"round_{rec.round_index:03d}.json",
                                     rec.round_index)

    result = run_experiment(cfg, callback=on_round)
    write_atomic(out / "metrics.csv", evaluation.metrics_csv_text(result.reports))
    write_atomic(out / "rounds.csv", rounds_csv_text(result.records))
    write_atomic(out / "train_log.csv", train_log_csv_text(result.records))
    save_checkpoint(result.final_model, out / "model.ckpt")
    write_atomic(out / "summary.json", json.dumps(_summary(result, cfg), indent=2) + "\n")
    return result


def parse_value(text: str):
    """Sweep values are JSON literals; bare words fall back to strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def sweep(cfg: ExperimentConfig, param: str, values: Sequence, out_root) -> list[Path]:
    """One run directory per value, named ``<param>=<value>``. Every value is
    validated before anything runs."""
    if param == "preset":
        configs = [apply_preset(cfg, v) for v in values]
    else:
        configs = [cfg.replace(**{param: v}) for v in values]
    dirs = []
    for v, c in zip(values, configs):
        d = Path(out_root) / f"{param}={json.dumps(v)}"
        run_to_directory(c, d)
        dirs.append(d)
    return dirs


# -- comparison ---------------------------------------------------------------

COMPARE_KEYS = ("acc_all", "acc_seen", "acc_lu", "acc_gu", "acc_au", "lu_gu_gap")


def _group_key(cfg: dict) -> str:
    """Runs that differ only in seed or output location share a group."""
    cfg = {k: v for k, v in cfg.items() if k not in ("seed", "output_dir")}
    return json.dumps(cfg, sort_keys=True)


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    for name in ("config.json", "metrics.csv", "summary.json"):
        if not (run_dir / name).exists():
            raise ConfigurationError(f"{run_dir}: missing {name}; not a run directory")
    cfg = load_config(run_dir / "config.json")
    return {
        "dir": run_dir,
        "config": cfg,
        "summary": json.loads((run_dir / "summary.json").read_text()),
        "metrics": evaluation.read_metrics_csv(run_dir / "metrics.csv"),
    }


def compare(run_dirs: Sequence, out_dir=None) -> str:
    """Aligned table of best-round metrics per run, then per-group medians over
    seeds with deltas against the first group. Plot-ready CSVs go to ``out_dir``."""
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise ConfigurationError("nothing to compare")
    groups: dict[str, list[dict]] = {}
    for r in runs:
        groups.setdefault(_group_key(r["config"].to_dict()), []).append(r)
    labels = {}
    for i, (key, members) in enumerate(groups.items()):
        presets = sorted({m["config"].preset for m in members})
        labels[key] = f"g{i}:{'+'.join(presets)}"

    lines = []
    head = f"{'run':<28} {'group':<18} {'seed':>4} {'best':>4} " + " ".join(f"{k:>9}" for k in COMPARE_KEYS)
    lines += [head, "-" * len(head)]
    for key, members in groups.items():
        for r in members:
            best = r["summary"]["best"] or {}
            cells = " ".join(f"{best.get(k):9.4f}" if best.get(k) is not None else f"{'-':>9}"
                             for k in COMPARE_KEYS)
            lines.append(f"{Path(r['dir']).name[:28]:<28} {labels[key][:18]:<18} "
                         f"{r['config'].seed:>4} {best.get('round', '-'):>4} {cells}")
    lines.append("")
    lines.append(f"{'group medians':<28} {'n':>4} " + " ".join(f"{k:>9}" for k in COMPARE_KEYS))
    medians = {}
    for key, members in groups.items():
        medians[key] = {k: _median([(m["summary"]["best"] or {}).get(k) for m in members])
                        for k in COMPARE_KEYS}
        cells = " ".join(f"{v:9.4f}" if v is not None else f"{'-':>9}" for v in medians[key].values())
        lines.append(f"{labels[key][:28]:<28} {len(members):>4} {cells}")
    keys = list(groups)
    if len(keys) > 1:
        lines.append("")
        lines.append(f"deltas against {labels[keys[0]]}")
        ref = medians[keys[0]]
        for key in keys[1:]:
            cells = " ".join(f"{medians[key][k] - ref[k]:+9.4f}"
                             if medians[key][k] is not None and ref[k] is not None else f"{'-':>9}"
                             for k in COMPARE_KEYS)
            lines.append(f"{labels[key][:28]:<28} {'':>4} {cells}")
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / "comparison.txt", text)
        rows = [[labels[k]] + [_fmt(v) if v is not None else "" for v in medians[k].values()] for k in keys]
        write_atomic(out / "group_medians.csv", _csv_text(("group",) + COMPARE_KEYS, rows))
        # per-round median curves, one column block per group
        n_rounds = max(len(r["metrics"]) for r in runs)
        header = ["round"] + [f"{labels[k]}:{m}" for k in keys for m in ("acc_all", "acc_au", "lu_gu_gap")]
        curve_rows = []
        for i in range(n_rounds):
            row = [i + 1]
            for k in keys:
                for m in ("acc_all", "acc_au", "lu_gu_gap"):
                    v = _median([r["metrics"][i][m] for r in groups[k] if i < len(r["metrics"])])
                    row.append("" if v is None else _fmt(v))
            curve_rows.append(row)
        write_atomic(out / "curves.csv", _csv_text(header, curve_rows))
    return text
