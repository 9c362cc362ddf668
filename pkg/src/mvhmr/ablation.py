"""Ablation suites: aggregation kind, orientation strategy, global scale solve.

Every suite pairs a scenario family with a list of engine variants. Each
seed generates one scenario and runs every variant on it, so variants are
compared on identical inputs. Seeds may run in parallel worker processes;
rows are sorted by (variant order, seed) afterwards, so the report does not
depend on the worker count.
"""

from __future__ import annotations

import concurrent.futures as cf
import multiprocessing
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import EngineConfig, run
from .report import METRICS, PROTOCOL_NOTE, evaluate, write_csv, write_json
from .scenario import ScenarioConfig, generate_scenario

THREADS_ENV = "MVHMR_THREADS"


@dataclass(frozen=True)
class Suite:
    id: str
    title: str
    scenario: dict  # ScenarioConfig overrides
    variants: tuple  # ((name, EngineConfig overrides), ...)
    primary: str  # metric the table is ranked by


SUITES = {
    "T3": Suite(
        "T3", "vertex-wise aggregation kind, two views 25% occluded",
        {"occluded_views": 2, "occluder_frac": 0.25},
        (("max", {"aggregation": "max"}),
         ("avg", {"aggregation": "avg"}),
         ("softmax_sum", {"aggregation": "softmax_sum"}),
         ("transformer_max", {"aggregation": "transformer_max"})),
        "mpjpe",
    ),
    "T4": Suite(
        "T4", "orientation strategy, one view's init orientation skewed 30 degrees",
        {"skew_view": 0, "skew_deg": 30.0},
        (("ind_o", {"aligner": False, "shared_orientation": False}),
         ("ind_o_align", {"aligner": True, "shared_orientation": False}),
         ("tran_align", {"aligner": True, "shared_orientation": True})),
        "o_err_deg",
    ),
    "T5": Suite(
        "T5", "global translation and scale solve, body scale in [0.8, 1.2]",
        {"scale_range": (0.8, 1.2)},
        (("w_scale", {"scale_solve": True}),
         ("wo_scale", {"scale_solve": False})),
        "mpjpe_abs",
    ),
}

ROW_HEADER = ("suite", "variant", "seed", *METRICS, "init_mpjpe", "final_residual_px")


def get_suite(suite_id) -> Suite:
    try:
        return SUITES[str(suite_id).upper()]
    except KeyError:
        raise ValueError(f"unknown suite {suite_id!r}; choose from {sorted(SUITES)}") from None


def _scenario_config(suite: Suite, base: ScenarioConfig | None):
    d = (base or ScenarioConfig()).to_dict()
    d.update(suite.scenario)
    return ScenarioConfig.from_dict(d)


def run_seed(suite_id, seed, base_config: dict | None = None, scenario_config: dict | None = None):
    """Rows of every variant of ``suite_id`` on the scenario of ``seed``."""
    suite = get_suite(suite_id)
    scfg = _scenario_config(suite, ScenarioConfig.from_dict(scenario_config) if scenario_config else None)
    scenario = generate_scenario(scfg, seed)
    base = dict(base_config or {})
    rows = []
    for name, overrides in suite.variants:
        cfg = EngineConfig.from_dict({**base, **overrides})
        state, trace = run(scenario, cfg)
        row = {"suite": suite.id, "variant": name, "seed": int(seed)}
        row.update(evaluate(scenario, state, trace))
        row["init_mpjpe"] = trace.mpjpe[0]
        row["final_residual_px"] = trace.residual_px[-1]
        rows.append(row)
    return rows


@dataclass
class SuiteReport:
    suite: str
    title: str
    primary: str
    seeds: list
    base_config: dict
    rows: list
    summary: list = field(default_factory=list)

    def variant_values(self, variant, metric):
        return np.array([r[metric] for r in self.rows if r["variant"] == variant])

    def median(self, variant, metric):
        return float(np.median(self.variant_values(variant, metric)))


def summarize(suite: Suite, rows):
    out = []
    for order, (name, _) in enumerate(suite.variants):
        sel = [r for r in rows if r["variant"] == name]
        entry = {"variant": name, "order": order, "n": len(sel)}
        for m in METRICS:
            vals = np.array([r[m] for r in sel])
            entry[f"median_{m}"] = float(np.median(vals))
            entry[f"mean_{m}"] = float(np.mean(vals))
        out.append(entry)
    ranked = sorted(out, key=lambda e: (e[f"median_{suite.primary}"], e["order"]))
    for rank, e in enumerate(ranked, start=1):
        e["rank"] = rank
    return ranked


def worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def _pool(workers):
    methods = multiprocessing.get_all_start_methods()
    ctx = multiprocessing.get_context("fork" if "fork" in methods else None)
    return cf.ProcessPoolExecutor(workers, mp_context=ctx)


def ablate(suite_id, base_config: EngineConfig | dict | None = None, n_seeds=20, first_seed=0,
           workers=None, scenario_config: ScenarioConfig | None = None) -> SuiteReport:
    """Run one suite over ``n_seeds`` consecutive seeds."""
    suite = get_suite(suite_id)
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    if isinstance(base_config, EngineConfig):
        base = base_config.to_dict()
    else:
        base = dict(base_config or {})
    sdict = scenario_config.to_dict() if scenario_config is not None else None
    seeds = list(range(first_seed, first_seed + n_seeds))
    n_workers = worker_count(workers)
    if n_workers == 1:
        chunks = [run_seed(suite.id, s, base, sdict) for s in seeds]
    else:
        with _pool(n_workers) as pool:
            chunks = list(pool.map(run_seed, [suite.id] * len(seeds), seeds, [base] * len(seeds),
                                   [sdict] * len(seeds)))
    order = {name: i for i, (name, _) in enumerate(suite.variants)}
    rows = sorted((r for c in chunks for r in c), key=lambda r: (order[r["variant"]], r["seed"]))
    rep = SuiteReport(suite.id, suite.title, suite.primary, seeds, base, rows)
    rep.summary = summarize(suite, rows)
    return rep


SUMMARY_HEADER = ("rank", "variant", "n", *[f"median_{m}" for m in METRICS], *[f"mean_{m}" for m in METRICS])


def write_suite_report(report: SuiteReport, out_dir, figures=True):
    """CSV rows and summary, a JSON summary and (optionally) a PNG figure."""
    out_dir = Path(out_dir)
    stem = f"ablation_{report.suite}"
    paths = [
        write_csv(out_dir / f"{stem}_rows.csv", ROW_HEADER, report.rows),
        write_csv(out_dir / f"{stem}_summary.csv", SUMMARY_HEADER, report.summary),
        write_json(out_dir / f"{stem}_summary.json", {
            "suite": report.suite,
            "title": report.title,
            "primary_metric": report.primary,
            "seeds": report.seeds,
            "engine_config": report.base_config,
            "protocol": PROTOCOL_NOTE,
            "summary": report.summary,
            "curves": {
                s["variant"]: {
                    "median_mpjpe": np.median([r["curve_mpjpe"] for r in report.rows
                                               if r["variant"] == s["variant"]], axis=0).tolist(),
                }
                for s in report.summary
            },
        }),
    ]
    if figures:
        from .plotting import plot_suite

        paths.append(plot_suite(report, out_dir / f"{stem}.png"))
    return paths
