"""
Page 2: Evaluation
Checkpoint report stratified by frame gap, and strategy / hyperparameter comparisons.
"""
import os

import streamlit as st
import plotly.graph_objects as go

st.set_page_config(page_title="Evaluation | Flow", layout="wide", page_icon=":ocean:")

from utils.data_loader import load_comparison, load_model_stats, load_report, load_sweep
from utils.theme import ACCENT_COLORS, STRATEGY_COLORS, apply_css, pick_run, runs_dir_input, style_chart

apply_css()

st.title("Evaluation")
st.caption("EPE and Fl outlier rate on the held-out synthetic split; k is the frame gap of the pair")

runs_dir = runs_dir_input()

# ── Section 1: checkpoint report ─────────────────────────────────────────
st.header("Checkpoint Report")
run_dir = pick_run(runs_dir)
report = load_report(run_dir) if run_dir else None

if report is None or report.empty:
    st.info("No report.csv for this run. Create one with `python -m ocflow eval --out <run>`.")
else:
    seq = report[report["subset"] == "sequence"]
    overall = seq[seq["k"] == "all"]
    occ = report[report["subset"] == "occlusion"]
    col1, col2, col3 = st.columns(3)
    with col1:
        st.metric("EPE (all k)", f"{overall['epe'].iloc[0]:.3f} px" if not overall.empty else "n/a")
    with col2:
        st.metric("Fl (all k)", f"{overall['fl'].iloc[0]:.2%}" if not overall.empty else "n/a")
    with col3:
        st.metric("Mask accuracy (occlusion pairs)",
                  f"{occ['mask_accuracy'].iloc[0]:.2%}" if not occ.empty else "n/a")

    by_k = seq[seq["k"] != "all"]
    fig = go.Figure()
    fig.add_trace(go.Bar(x=["k = " + k for k in by_k["k"]], y=by_k["epe"], name="EPE",
                         marker_color="#64ffda", text=[f"{v:.3f}" for v in by_k["epe"]],
                         textposition="outside"))
    fig.update_layout(title="EPE by Frame Gap", yaxis_title="EPE (px)")
    st.plotly_chart(style_chart(fig, 380), use_container_width=True)

    st.dataframe(report.style.format({"epe": "{:.4f}", "fl": "{:.2%}", "mask_accuracy": "{:.2%}"},
                                     na_rep="n/a"),
                 use_container_width=True, hide_index=True)

    stats = load_model_stats(run_dir)
    if stats:
        st.caption(f"{int(stats['parameter_count']):,} parameters | "
                   f"{stats['inference_ms']:.1f} ms per pair (CPU, single image)")

st.markdown("---")

# ── Section 2: strategy comparison ───────────────────────────────────────
st.header("Strategy Comparison")
analysis_dir = st.text_input("Comparison / sweep directory", value=os.path.join(runs_dir, "compare"))
summary, runs = load_comparison(analysis_dir)

if summary.empty:
    st.info("No compare.csv here. Produce one with `python -m ocflow compare --out <dir>`.")
else:
    fig_cmp = go.Figure()
    fig_cmp.add_trace(go.Bar(
        x=summary["strategy"], y=summary["epe"],
        marker=dict(color=[STRATEGY_COLORS.get(s, "#abb8c3") for s in summary["strategy"]]),
        text=[f"{v:.3f}" for v in summary["epe"]], textposition="outside", name="seed mean",
    ))
    if not runs.empty:
        fig_cmp.add_trace(go.Scatter(x=runs["strategy"], y=runs["epe"], mode="markers",
                                     marker=dict(color="#e6f1ff", size=7), name="per seed"))
    fig_cmp.update_layout(title="Seed-mean EPE by Strategy", yaxis_title="EPE (px)")
    st.plotly_chart(style_chart(fig_cmp, 420), use_container_width=True)

    base = summary.set_index("strategy")["epe"]
    if "baseline" in base and "octc" in base and base["baseline"] > 0:
        gain = 1.0 - base["octc"] / base["baseline"]
        st.metric("OCTC vs baseline (relative EPE reduction)", f"{gain:.1%}",
                  delta="meets 3% target" if gain >= 0.03 else "below 3% target",
                  delta_color="normal" if gain >= 0.03 else "inverse")

# ── Section 3: hyperparameter sweep ──────────────────────────────────────
sweep = load_sweep(analysis_dir)
if not sweep.empty:
    st.header("Hyperparameter Sweep")
    fig_sw = go.Figure()
    for i, (param, rows) in enumerate(sweep.groupby("parameter", sort=False)):
        fig_sw.add_trace(go.Bar(x=[f"{param}={v:g}" for v in rows["value"]], y=rows["epe"], name=param,
                                marker_color=ACCENT_COLORS[i % len(ACCENT_COLORS)]))
    fig_sw.update_layout(title="EPE per Swept Value (one parameter at a time)", yaxis_title="EPE (px)",
                         xaxis_tickangle=-30)
    st.plotly_chart(style_chart(fig_sw, 420), use_container_width=True)
