"""
Offline analyses: per-axis displacement CDFs, one-parameter-at-a-time hyperparameter
sweeps, and multi-seed strategy comparisons.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from ocflow.config import STRATEGIES, RunConfig, preset, with_overrides
from ocflow.evaluation import build_eval_split
from ocflow.flow import FlowField
from ocflow.training import train

logger = logging.getLogger(__name__)

CDF_RANGE = (-100, 100)
ASYMMETRY_THRESHOLD = 0.5
SWEEP_GRID: dict[str, tuple[float, ...]] = {
    "loss.lambda1": (1.0, 0.1, 0.01, 0.001),
    "loss.lambda2": (1.0, 0.1, 0.01, 0.001),
    "loss.epsilon": (9.0, 25.0, 49.0, math.inf),
}


# ── Displacement CDF ─────────────────────────────────────────────────────

@dataclass
class DisplacementCdf:
    table: pd.DataFrame
    median_u: float
    median_v: float
    samples: int
    excluded_u: int
    excluded_v: int

    @property
    def asymmetric(self) -> bool:
        """Vertical motion skewed away from zero by more than half a pixel."""
        return abs(self.median_v) > ASYMMETRY_THRESHOLD

    def stats(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "samples": self.samples,
            "excluded_u": self.excluded_u,
            "excluded_v": self.excluded_v,
            "median_u": self.median_u,
            "median_v": self.median_v,
            "asymmetric_v": self.asymmetric,
        }])


def _axis_cdf(values: np.ndarray, grid: np.ndarray, lo: int, hi: int, axis: str) -> tuple[np.ndarray, float, int]:
    inside = values[(values >= lo) & (values <= hi)]
    if inside.size == 0:
        raise ValueError(f"every {axis} displacement lies outside [{lo}, {hi}]")
    ordered = np.sort(inside)
    cdf = np.searchsorted(ordered, grid, side="right") / ordered.size
    return cdf, float(np.median(ordered)), int(values.size - inside.size)


def displacement_cdf(flows: Sequence[FlowField], lo: int = CDF_RANGE[0], hi: int = CDF_RANGE[1]) -> DisplacementCdf:
    """Empirical per-axis CDFs on the integer grid lo..hi; displacements outside the range are dropped."""
    if not flows:
        raise ValueError("displacement_cdf needs at least one flow field")
    if lo >= hi:
        raise ValueError(f"empty range [{lo}, {hi}]")
    u = np.concatenate([f.u.ravel() for f in flows]).astype(np.float64)
    v = np.concatenate([f.v.ravel() for f in flows]).astype(np.float64)
    grid = np.arange(lo, hi + 1, dtype=np.float64)
    cdf_u, med_u, out_u = _axis_cdf(u, grid, lo, hi, "u")
    cdf_v, med_v, out_v = _axis_cdf(v, grid, lo, hi, "v")
    table = pd.DataFrame({"value": grid.astype(int), "cdf_u": cdf_u, "cdf_v": cdf_v})
    return DisplacementCdf(table, med_u, med_v, int(u.size), out_u, out_v)


def cdf_figure(result: DisplacementCdf) -> go.Figure:
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=result.table["value"], y=result.table["cdf_u"], mode="lines",
                             name="u (horizontal)", line=dict(shape="hv", color="#1B4F72")))
    fig.add_trace(go.Scatter(x=result.table["value"], y=result.table["cdf_v"], mode="lines",
                             name="v (vertical)", line=dict(shape="hv", color="#C0392B")))
    fig.update_layout(
        xaxis_title="Displacement (px)", yaxis_title="Cumulative fraction",
        yaxis_range=[0, 1.02], margin=dict(t=30, b=40), height=420,
        legend=dict(orientation="h", y=1.08),
    )
    return fig


def write_cdf(result: DisplacementCdf, out_dir: str) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "cdf": os.path.join(out_dir, "cdf.csv"),
        "stats": os.path.join(out_dir, "cdf_stats.csv"),
        "plot": os.path.join(out_dir, "cdf.html"),
    }
    result.table.to_csv(paths["cdf"], index=False, float_format="%.6f")
    result.stats().to_csv(paths["stats"], index=False)
    cdf_figure(result).write_html(paths["plot"], include_plotlyjs="cdn")
    if result.asymmetric:
        logger.info("vertical displacements are skewed: median(v) = %.3f px", result.median_v)
    return paths


# ── Sweeps and comparisons ───────────────────────────────────────────────

def _final(result) -> dict:
    last = result.eval_log.iloc[-1]
    return {"epe": float(last["epe"]), "fl": float(last["fl"])}


def grid_sweep(
    base: RunConfig,
    grid: Mapping[str, Sequence[float]] = SWEEP_GRID,
    steps: int | None = None,
    out_dir: str | None = None,
) -> pd.DataFrame:
    """Vary one parameter at a time from base; every run is evaluated on the same held-out split."""
    if steps is not None:
        base = with_overrides(base, {"steps": steps})
    split = build_eval_split(base)
    rows = []
    for key, values in grid.items():
        for value in values:
            cfg = with_overrides(base, {key: value})
            logger.info("sweep %s=%s", key, value)
            rows.append({"parameter": key, "value": value, **_final(train(cfg, write=False, eval_split=split))})
    table = pd.DataFrame(rows, columns=["parameter", "value", "epe", "fl"])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        table.to_csv(os.path.join(out_dir, "sweep.csv"), index=False)
    return table


@dataclass
class Comparison:
    runs: pd.DataFrame
    summary: pd.DataFrame

    def mean_epe(self, strategy: str) -> float:
        return float(self.summary.set_index("strategy").loc[strategy, "epe"])


def compare_strategies(
    base: RunConfig,
    seeds: Sequence[int] = (0, 1, 2),
    strategies: Sequence[str] = STRATEGIES,
    out_dir: str | None = None,
) -> Comparison:
    """Train each strategy preset under every seed; all runs share the base config's held-out split."""
    split = build_eval_split(base)
    rows = []
    for strategy in strategies:
        k_set = preset(strategy).k_set
        for seed in seeds:
            cfg = with_overrides(base, {"strategy": strategy, "k_set": k_set, "seed": seed, "model.seed": seed})
            logger.info("compare: strategy=%s seed=%d", strategy, seed)
            rows.append({"strategy": strategy, "seed": seed, **_final(train(cfg, write=False, eval_split=split))})
    runs = pd.DataFrame(rows, columns=["strategy", "seed", "epe", "fl"])
    summary = (
        runs.groupby("strategy", sort=False)[["epe", "fl"]].mean().reset_index()
    )
    comparison = Comparison(runs, summary)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        runs.to_csv(os.path.join(out_dir, "compare_runs.csv"), index=False)
        summary.to_csv(os.path.join(out_dir, "compare.csv"), index=False)
        fig = go.Figure(go.Bar(x=summary["strategy"], y=summary["epe"], marker_color="#1B4F72"))
        fig.update_layout(yaxis_title="Mean EPE (px)", margin=dict(t=30, b=40), height=380)
        fig.write_html(os.path.join(out_dir, "compare.html"), include_plotlyjs="cdn")
    return comparison
