"""
Run-artifact loaders for the training dashboard.
All functions use @st.cache_data for performance; pass the directory explicitly so a
new run directory invalidates the cache.
"""
import glob
import os

import pandas as pd
import streamlit as st

from ocflow.config import parse_lines
from ocflow.data import MANIFEST_NAME, flow_files, read_flo

RUNS_DIR = os.environ.get("OCFLOW_RUNS_DIR", "runs")

TRAIN_LOG = "train_log.csv"
EVAL_LOG = "eval_log.csv"
REPORT = "report.csv"
MODEL_STATS = "model_stats.csv"
CONFIG = "config.txt"
COMPONENT_COLUMNS = ["base", "zero_forcing", "mask_match", "transformation"]


def _path(run_dir: str, filename: str) -> str:
    return os.path.join(run_dir, filename)


def _read_csv(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        return pd.DataFrame()
    return pd.read_csv(path)


# ── Run discovery ────────────────────────────────────────────────────────

@st.cache_data
def list_runs(runs_dir: str) -> list[str]:
    """Subdirectories that hold a training log or an evaluation report, sorted by name."""
    if not os.path.isdir(runs_dir):
        return []
    runs = []
    for name in sorted(os.listdir(runs_dir)):
        d = os.path.join(runs_dir, name)
        if os.path.isdir(d) and any(os.path.exists(_path(d, f)) for f in (TRAIN_LOG, REPORT)):
            runs.append(name)
    return runs


@st.cache_data
def load_run_config(run_dir: str) -> dict:
    """config.txt as a flat key -> value mapping (strings, as written)."""
    path = _path(run_dir, CONFIG)
    if not os.path.exists(path):
        return {}
    with open(path, encoding="utf-8") as fh:
        return parse_lines(fh.read(), path)


# ── Logs ─────────────────────────────────────────────────────────────────

@st.cache_data
def load_train_log(run_dir: str) -> pd.DataFrame:
    """Per-step losses; only the components the run's strategy computes appear as columns."""
    data = _read_csv(_path(run_dir, TRAIN_LOG))
    for col in ["total", "grad_norm"] + COMPONENT_COLUMNS:
        if col in data.columns:
            data[col] = pd.to_numeric(data[col], errors="coerce")
    return data


@st.cache_data
def load_eval_log(run_dir: str) -> pd.DataFrame:
    return _read_csv(_path(run_dir, EVAL_LOG))


@st.cache_data
def load_report(run_dir: str) -> pd.DataFrame:
    data = _read_csv(_path(run_dir, REPORT))
    if "k" in data.columns:
        data["k"] = data["k"].astype(str)
    return data


@st.cache_data
def load_model_stats(run_dir: str) -> dict:
    data = _read_csv(_path(run_dir, MODEL_STATS))
    return {} if data.empty else data.iloc[0].to_dict()


def component_columns(train_log: pd.DataFrame) -> list[str]:
    return [c for c in COMPONENT_COLUMNS if c in train_log.columns]


def smooth(series: pd.Series, window: int) -> pd.Series:
    """Trailing rolling mean that skips steps where a component was absent."""
    if window <= 1:
        return series
    return series.rolling(window, min_periods=1).mean()


# ── Summary across runs ──────────────────────────────────────────────────

@st.cache_data
def summarize_runs(runs_dir: str) -> pd.DataFrame:
    """One row per run: strategy, steps and the last periodic evaluation."""
    rows = []
    for name in list_runs(runs_dir):
        run_dir = os.path.join(runs_dir, name)
        cfg = load_run_config(run_dir)
        evals = load_eval_log(run_dir)
        last = evals.iloc[-1] if not evals.empty else {}
        rows.append({
            "Run": name,
            "Strategy": cfg.get("strategy", "?"),
            "Steps": int(cfg["steps"]) if "steps" in cfg else None,
            "Seed": int(cfg["seed"]) if "seed" in cfg else None,
            "EPE": last.get("epe"),
            "Fl": last.get("fl"),
            "Occlusion EPE": last.get("occlusion_epe"),
            "Mask Accuracy": last.get("mask_accuracy"),
        })
    return pd.DataFrame(rows, columns=["Run", "Strategy", "Steps", "Seed", "EPE", "Fl",
                                       "Occlusion EPE", "Mask Accuracy"])


def compute_kpis(run_dir: str) -> dict:
    """Headline numbers for one run; missing artifacts give None."""
    evals = load_eval_log(run_dir)
    train_log = load_train_log(run_dir)
    stats = load_model_stats(run_dir)
    kpis = {"epe": None, "epe_start": None, "fl": None, "mask_accuracy": None,
            "steps": 0, "final_loss": None, "parameter_count": stats.get("parameter_count"),
            "inference_ms": stats.get("inference_ms")}
    if not evals.empty:
        kpis["epe"] = float(evals["epe"].iloc[-1])
        kpis["epe_start"] = float(evals["epe"].iloc[0])
        kpis["fl"] = float(evals["fl"].iloc[-1])
        if "mask_accuracy" in evals.columns:
            kpis["mask_accuracy"] = float(evals["mask_accuracy"].iloc[-1])
    if not train_log.empty:
        kpis["steps"] = int(train_log["step"].max()) + 1
        kpis["final_loss"] = float(train_log["total"].iloc[-1])
    return kpis


# ── Analyses and datasets ────────────────────────────────────────────────

@st.cache_data
def load_cdf(analysis_dir: str) -> tuple[pd.DataFrame, pd.DataFrame]:
    return _read_csv(_path(analysis_dir, "cdf.csv")), _read_csv(_path(analysis_dir, "cdf_stats.csv"))


@st.cache_data
def load_comparison(analysis_dir: str) -> tuple[pd.DataFrame, pd.DataFrame]:
    return _read_csv(_path(analysis_dir, "compare.csv")), _read_csv(_path(analysis_dir, "compare_runs.csv"))


@st.cache_data
def load_sweep(analysis_dir: str) -> pd.DataFrame:
    return _read_csv(_path(analysis_dir, "sweep.csv"))


@st.cache_data
def list_flow_files(root: str) -> list[str]:
    """.flo files below root; dataset directories are listed in manifest order."""
    if os.path.exists(os.path.join(root, MANIFEST_NAME)):
        return flow_files(root)
    return sorted(glob.glob(os.path.join(root, "**", "*.flo"), recursive=True))


@st.cache_data
def load_flow(path: str):
    return read_flo(path)
