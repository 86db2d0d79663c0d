"""Declarative ablation matrix and trade-off sweep.

Thirteen experiment settings toggle modules, loss terms, and data fractions.
Each row maps onto a (step-1 toggles, step-2 toggles, data plan) triple and
runs the standard pipeline; results are persisted as an append-friendly table.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import UsageError
from .synthdata import Corpus
from .training import LossToggles, RunPlan, TrainConfig, run_pipeline

LOSS_ORDER = ("id_s", "id_t", "tri_s", "tri_t", "att_s", "att_t", "dom", "con")
MODULE_ORDER = ("e1", "e2", "c_id_s", "c_id_t", "c_att", "c_d")


@dataclass(frozen=True)
class AblationRow:
    row_id: int
    description: str
    modules: tuple  # checkmarks in MODULE_ORDER
    losses: tuple  # checkmarks in LOSS_ORDER
    target_fraction: float
    training_data: str  # none | source | target | source+target


def _row(row_id, description, modules, losses, fraction, data):
    return AblationRow(row_id, description, tuple(bool(m) for m in modules),
                       tuple(bool(l) for l in losses), fraction, data)


# Checkmark matrix, rows (1)-(13). Module columns: E1, E2, C_id_s, C_id_t,
# C_att, C_d. Loss columns: id_s, id_t, tri_s, tri_t, att_s, att_t, dom, con.
ABLATION_TABLE: dict[int, AblationRow] = {r.row_id: r for r in [
    _row(1, "no training (random encoders)",
         (1, 1, 0, 0, 0, 0), (0, 0, 0, 0, 0, 0, 0, 0), 1.0, "none"),
    _row(2, "source only",
         (1, 1, 1, 0, 1, 0), (1, 0, 1, 0, 1, 0, 0, 0), 1.0, "source"),
    _row(3, "target only",
         (1, 1, 0, 1, 0, 0), (0, 1, 0, 1, 0, 0, 0, 0), 1.0, "target"),
    _row(4, "full, 50% target identities",
         (1, 1, 1, 1, 1, 1), (1, 1, 1, 1, 1, 1, 1, 1), 0.5, "source+target"),
    _row(5, "full, 80% target identities",
         (1, 1, 1, 1, 1, 1), (1, 1, 1, 1, 1, 1, 1, 1), 0.8, "source+target"),
    _row(6, "no attribute or domain losses (pretrain + co-id/tri)",
         (1, 1, 1, 1, 0, 0), (1, 1, 1, 1, 0, 0, 0, 0), 1.0, "source+target"),
    _row(7, "attributes in pretraining only",
         (1, 1, 1, 1, 1, 0), (1, 1, 1, 1, 1, 0, 0, 0), 1.0, "source+target"),
    _row(8, "no attribute losses (marginal adaptation only)",
         (1, 1, 1, 1, 0, 1), (1, 1, 1, 1, 0, 0, 1, 0), 1.0, "source+target"),
    _row(9, "no target attribute losses",
         (1, 1, 1, 1, 0, 1), (1, 1, 1, 1, 1, 0, 1, 0), 1.0, "source+target"),
    _row(10, "no consistency loss",
         (1, 1, 1, 1, 1, 1), (1, 1, 1, 1, 1, 1, 1, 0), 1.0, "source+target"),
    _row(11, "no entropy loss",
         (1, 1, 1, 1, 1, 1), (1, 1, 1, 1, 1, 0, 1, 1), 1.0, "source+target"),
    _row(12, "no domain loss",
         (1, 1, 1, 1, 1, 0), (1, 1, 1, 1, 1, 1, 0, 1), 1.0, "source+target"),
    _row(13, "full setting",
         (1, 1, 1, 1, 1, 1), (1, 1, 1, 1, 1, 1, 1, 1), 1.0, "source+target"),
]}


def loss_flags(row: AblationRow) -> dict[str, bool]:
    return dict(zip(LOSS_ORDER, row.losses))


def modules_implied(row: AblationRow) -> dict[str, bool]:
    """Modules actually required by the row's active losses (e1/e2 always).
    This is what the runner instantiates; the printed module column of row 9
    omits the attribute head its own att_s checkmark requires."""
    l = loss_flags(row)
    return {"e1": True, "e2": True, "c_id_s": l["id_s"], "c_id_t": l["id_t"],
            "c_att": l["att_s"] or l["att_t"] or l["con"], "c_d": l["dom"]}


def plan_for_row(row: AblationRow) -> tuple[RunPlan, LossToggles]:
    l = loss_flags(row)
    do_step1 = l["id_s"] or l["tri_s"] or l["att_s"]
    do_step2 = l["id_t"] or l["tri_t"] or l["att_t"] or l["con"] or l["dom"]
    # source attribute BCE stays in the step-2 total only when the row
    # co-trains (some adaptation loss is active); otherwise it was
    # pretraining-only
    co_training = l["att_t"] or l["con"] or l["dom"]
    toggles = LossToggles(
        id_s=l["id_s"], tri_s=l["tri_s"], att_s=l["att_s"],
        id_t=l["id_t"], tri_t=l["tri_t"], att_t=l["att_t"], con_t=l["con"],
        dom=l["dom"], step2_att_s=l["att_s"] and co_training)
    plan = RunPlan(do_step1=do_step1, do_step2=do_step2,
                   target_fraction=row.target_fraction)
    return plan, toggles


@dataclass
class AblationResults:
    rows: dict = field(default_factory=dict)
    config_note: dict = field(default_factory=dict)

    def mean_rank1(self, row_id: int) -> float:
        return self.rows[row_id]["mean_r1"]

    def rank1_by_seed(self, row_id: int) -> dict[int, float]:
        return {int(s): v["r1"] for s, v in self.rows[row_id]["per_seed"].items()}

    def to_dict(self) -> dict:
        return {"config": self.config_note,
                "rows": {str(k): v for k, v in self.rows.items()}}


def run_ablation(corpus: Corpus, rows, seeds, config: TrainConfig,
                 step1_cache: dict | None = None) -> AblationResults:
    """One training + evaluation per (row, seed); the same seed is reused
    across rows so per-seed comparisons are paired."""
    results = AblationResults(config_note={"seeds": list(map(int, seeds)),
                                           "epochs_step1": config.epochs_step1,
                                           "epochs_step2": config.epochs_step2,
                                           "base_lr": config.base_lr})
    cache = step1_cache if step1_cache is not None else {}
    for row_id in rows:
        if row_id not in ABLATION_TABLE:
            raise UsageError(f"unknown ablation row {row_id}; valid: 1..13")
        row = ABLATION_TABLE[row_id]
        plan, toggles = plan_for_row(row)
        per_seed = {}
        for seed in seeds:
            cfg = replace(config, seed=int(seed), toggles=toggles)
            res = run_pipeline(corpus, cfg, plan, step1_cache=cache)
            curve = res.cmc["sketch_to_photo"]
            per_seed[int(seed)] = {
                "r1": curve.rank(1),
                "r5": curve.rank(min(5, curve.n_gallery)),
                "r10": curve.rank(min(10, curve.n_gallery)),
            }
        r1s = np.array([v["r1"] for v in per_seed.values()])
        results.rows[row_id] = {
            "description": row.description,
            "training_data": row.training_data,
            "per_seed": per_seed,
            "mean_r1": float(r1s.mean()),
            "std_r1": float(r1s.std()),
        }
    return results


def sign_test_greater(diffs) -> float:
    """Exact one-sided sign test p-value for H1: median(diff) > 0; ties drop."""
    diffs = [d for d in diffs if d != 0]
    n = len(diffs)
    if n == 0:
        return 1.0
    pos = sum(1 for d in diffs if d > 0)
    return sum(math.comb(n, i) for i in range(pos, n + 1)) / 2 ** n


@dataclass
class SweepResults:
    curves: dict = field(default_factory=dict)  # lambda name -> {value: stats}

    def to_dict(self) -> dict:
        return {name: {str(v): s for v, s in vals.items()}
                for name, vals in self.curves.items()}


def sweep_tradeoffs(corpus: Corpus, grid, seeds, config: TrainConfig,
                    lambdas=("lambda1", "lambda2", "lambda3"),
                    step1_cache: dict | None = None) -> SweepResults:
    """Vary one trade-off weight at a time over the grid, others at default."""
    if any(v <= 0 for v in grid):
        raise UsageError("grid values must be positive")
    out = SweepResults()
    cache = step1_cache if step1_cache is not None else {}
    for name in lambdas:
        out.curves[name] = {}
        for value in grid:
            r1s = []
            for seed in seeds:
                weights = replace(config.weights, **{name: float(value)})
                cfg = replace(config, seed=int(seed), weights=weights)
                res = run_pipeline(corpus, cfg, RunPlan(), step1_cache=cache)
                r1s.append(res.cmc["sketch_to_photo"].rank(1))
            out.curves[name][float(value)] = {
                "mean_r1": float(np.mean(r1s)), "std_r1": float(np.std(r1s)),
                "per_seed": [float(v) for v in r1s]}
    return out


def save_results(results, path) -> None:
    Path(path).write_text(json.dumps(results.to_dict(), sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def format_table(results: AblationResults) -> str:
    lines = [f"{'row':>4}  {'R1':>6}  {'std':>6}  {'R5':>6}  {'R10':>6}  description"]
    for row_id, row in sorted(results.rows.items()):
        r5 = np.mean([v["r5"] for v in row["per_seed"].values()])
        r10 = np.mean([v["r10"] for v in row["per_seed"].values()])
        lines.append(f"{row_id:>4}  {row['mean_r1']:.4f}  {row['std_r1']:.4f}  "
                     f"{r5:.4f}  {r10:.4f}  {row['description']}")
    return "\n".join(lines) + "\n"
