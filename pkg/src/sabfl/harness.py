"""Experiment matrices, batch execution and comparison reports.

A matrix file is TOML with a ``[base]`` run config, a ``repeats`` count and
one ``[[cells]]`` entry per experiment cell. Cells carry ``label``,
``experiment`` and ``variant`` metadata, an optional ``aggregators`` list
that expands the cell once per method, and any run-config keys to
override (dotted keys such as ``partition.lambda = 0.1`` work).
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .aggregation import AGGREGATORS
from .config import RunConfig, config_from_dict, deep_merge, read_toml
from .models import ConfigurationError
from .protocol import run_experiment

META_KEYS = ("label", "experiment", "variant", "aggregators")


@dataclass
class Cell:
    label: str
    experiment: str
    variant: str
    config: RunConfig


@dataclass
class ExperimentMatrix:
    cells: List[Cell]
    repeats: int = 5

    def __post_init__(self):
        labels = [c.label for c in self.cells]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("cell labels must be unique")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")


def matrix_from_dict(raw: Dict) -> ExperimentMatrix:
    base = raw.get("base", {})
    cells = []
    for i, entry in enumerate(raw.get("cells", [])):
        entry = dict(entry)
        meta = {k: entry.pop(k) for k in META_KEYS if k in entry}
        merged = deep_merge(base, entry)
        methods = meta.get("aggregators") or [merged.get("aggregator", "softmax")]
        label = meta.get("label", f"cell{i}")
        for method in methods:
            cfg = config_from_dict({**merged, "aggregator": method})
            name = label if len(methods) == 1 and "aggregators" not in meta else f"{label}-{method}"
            cells.append(Cell(name, meta.get("experiment", label), meta.get("variant", ""), cfg))
    unknown = set(raw) - {"base", "cells", "repeats"}
    if unknown:
        raise ConfigurationError(f"unknown matrix key(s): {', '.join(sorted(unknown))}")
    return ExperimentMatrix(cells, int(raw.get("repeats", 5)))


def load_matrix(path) -> ExperimentMatrix:
    return matrix_from_dict(read_toml(path))


def _run_job(job):
    cfg, out_dir, meta = job
    rep = run_experiment(cfg, out_dir, meta)
    return rep.summary()


def run_batch(matrix: ExperimentMatrix, out_dir, seed: Optional[int] = None,
              jobs: int = 1) -> List[Dict]:
    """Run every cell ``repeats`` times (seed offset by the repeat index), then report."""
    out = Path(out_dir)
    work = []
    for cell in matrix.cells:
        base_cfg = cell.config if seed is None else cell.config.with_seed(seed)
        for k in range(matrix.repeats):
            cfg = base_cfg.with_seed(base_cfg.seed + k)
            meta = {"label": cell.label, "experiment": cell.experiment,
                    "variant": cell.variant, "repeat": k}
            work.append((cfg, out / "runs" / cell.label / f"rep{k}", meta))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            summaries = list(pool.map(_run_job, work))
    else:
        summaries = [_run_job(job) for job in work]
    emit_report(out)
    return summaries


def robustness_score(acc_lh: float, acc_hh: float) -> float:
    """min/max ratio of the two heterogeneity variants' accuracies, in (0, 1]."""
    if not (0 < acc_lh <= 1 and 0 < acc_hh <= 1):
        raise ValueError("accuracies must lie in (0, 1]")
    return min(acc_lh, acc_hh) / max(acc_lh, acc_hh)


@dataclass
class ComparisonReport:
    methods: List[str]
    rows: List[str]
    ranks: Dict[str, Dict[str, int]]
    mean_rank: Dict[str, float]
    std_rank: Dict[str, float]


def rank_methods(table: Dict[str, Dict[str, float]],
                 methods: Optional[Sequence[str]] = None) -> ComparisonReport:
    """Rank methods per row, 1 = highest accuracy.

    Ties share the smaller rank and the next rank is skipped (1, 1, 3).
    Mean and population standard deviation are taken over the rows where the
    method appears.
    """
    if methods is None:
        seen = {m for row in table.values() for m in row}
        methods = [m for m in AGGREGATORS if m in seen] + sorted(seen - set(AGGREGATORS))
    ranks: Dict[str, Dict[str, int]] = {}
    for row, accs in table.items():
        present = [m for m in methods if m in accs]
        r = rankdata([-accs[m] for m in present], method="min")
        ranks[row] = {m: int(v) for m, v in zip(present, r)}
    mean, std = {}, {}
    for m in methods:
        vals = [ranks[row][m] for row in ranks if m in ranks[row]]
        mean[m] = float(np.mean(vals)) if vals else math.nan
        std[m] = float(np.std(vals)) if vals else math.nan
    return ComparisonReport(list(methods), list(table), ranks, mean, std)


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def collect_summaries(results_dir) -> List[Dict]:
    root = Path(results_dir)
    files = sorted(root.rglob("summary.json"))
    if not files:
        raise FileNotFoundError(f"no summary.json files under {root}")
    return [json.loads(f.read_text()) for f in files]


def emit_report(results_dir, out_dir=None) -> Dict[str, Path]:
    """Write comparison, robustness, ranking and trend CSVs from run summaries."""
    summaries = collect_summaries(results_dir)
    out = Path(out_dir) if out_dir is not None else Path(results_dir)
    out.mkdir(parents=True, exist_ok=True)

    cells: Dict[Tuple[str, str], Dict[str, List[float]]] = {}
    info: Dict[Tuple[str, str], Tuple[int, int]] = {}
    for s in summaries:
        key = (str(s.get("experiment", s.get("label", ""))), str(s.get("variant", "")))
        cells.setdefault(key, {}).setdefault(s["aggregator"], []).append(s["final_accuracy"])
        info[key] = (s["num_participants"], s["num_malicious"])
    seen = {m for v in cells.values() for m in v}
    methods = [m for m in AGGREGATORS if m in seen]
    keys = sorted(cells)
    table = {f"{e}-{v}" if v else e: {m: float(np.mean(accs)) for m, accs in cells[(e, v)].items()}
             for e, v in keys}

    paths = {}
    paths["comparison"] = out / "comparison.csv"
    with open(paths["comparison"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "variant", "num_participants", "num_malicious", *methods])
        for (e, v), row in zip(keys, table.values()):
            w.writerow([e, v, *info[(e, v)], *(_fmt(row.get(m)) for m in methods)])

    paths["robustness"] = out / "robustness.csv"
    gaps: Dict[str, List[float]] = {m: [] for m in methods}
    with open(paths["robustness"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "method", "acc_lh", "acc_hh", "robustness", "one_minus_r"])
        for e in sorted({e for e, _ in keys}):
            lh, hh = table.get(f"{e}-LH"), table.get(f"{e}-HH")
            if lh is None or hh is None:
                continue
            for m in methods:
                if m in lh and m in hh and lh[m] > 0 and hh[m] > 0:
                    r = robustness_score(lh[m], hh[m])
                    gaps[m].append(1 - r)
                    w.writerow([e, m, _fmt(lh[m]), _fmt(hh[m]), _fmt(r), _fmt(1 - r)])
        for m in methods:
            if gaps[m]:
                w.writerow(["ALL", m, "", "", _fmt(1 - float(np.mean(gaps[m]))),
                            _fmt(float(np.mean(gaps[m])))])

    ranking = rank_methods(table, methods)
    paths["rankings"] = out / "rankings.csv"
    with open(paths["rankings"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", *methods])
        for row in ranking.rows:
            w.writerow([row, *(ranking.ranks[row].get(m, "") for m in methods)])
        w.writerow(["mean", *(_fmt(ranking.mean_rank[m]) for m in methods)])
        w.writerow(["std", *(_fmt(ranking.std_rank[m]) for m in methods)])

    paths["trends"] = out / "trends.csv"
    trend: Dict[Tuple[str, int, int], Dict[str, List[float]]] = {}
    for (e, v), row in zip(keys, table.values()):
        n, bad = info[(e, v)]
        slot = trend.setdefault((v, n, bad), {})
        for m, acc in row.items():
            slot.setdefault(m, []).append(acc)
    with open(paths["trends"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "num_participants", "num_malicious", *methods])
        for key in sorted(trend):
            vals = trend[key]
            w.writerow([*key, *(_fmt(float(np.mean(vals[m]))) if m in vals else ""
                                for m in methods)])
    return paths


def read_csv_rows(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
