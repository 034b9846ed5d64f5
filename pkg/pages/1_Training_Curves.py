"""
Page 1: Training Curves
Per-step loss components, gradient norm and periodic held-out evaluation.
"""
import streamlit as st
import plotly.graph_objects as go

st.set_page_config(page_title="Training Curves | Flow", layout="wide", page_icon=":ocean:")

from utils.data_loader import component_columns, load_eval_log, load_run_config, load_train_log, smooth
from utils.theme import COMPONENT_COLORS, apply_css, pick_run, runs_dir_input, style_chart

apply_css()

st.title("Training Curves")
st.caption("Loss components as logged per optimizer step; only the strategy's active components appear")

runs_dir = runs_dir_input()
run_dir = pick_run(runs_dir)
if run_dir is None:
    st.stop()

window = st.sidebar.slider("Smoothing window (steps)", 1, 100, 10)
log_scale = st.sidebar.checkbox("Log-scale losses", value=True)

train_log = load_train_log(run_dir)
if train_log.empty:
    st.info("This run has no training log yet.")
    st.stop()

components = component_columns(train_log)

# ── Section 1: loss components ───────────────────────────────────────────
st.header("Loss Components")
selected = st.multiselect("Components", ["total"] + components, default=["total"] + components)

fig = go.Figure()
for name in selected:
    series = train_log[["step", name]].dropna()
    fig.add_trace(go.Scatter(
        x=series["step"],
        y=smooth(series[name], window),
        name=name,
        mode="lines",
        line=dict(color=COMPONENT_COLORS.get(name), width=2),
        hovertemplate="<b>" + name + "</b><br>step %{x}<br>%{y:.4f}<extra></extra>",
    ))
fig.update_layout(title="Smoothed Loss per Step", xaxis_title="Step", yaxis_title="Loss",
                  yaxis_type="log" if log_scale else "linear")
st.plotly_chart(style_chart(fig, 460), use_container_width=True)

col1, col2 = st.columns(2)
with col1:
    fig_norm = go.Figure(go.Scatter(
        x=train_log["step"], y=smooth(train_log["grad_norm"], window),
        mode="lines", line=dict(color="#abb8c3"), name="grad norm",
    ))
    clip = float(load_run_config(run_dir).get("grad_clip", 1.0))
    fig_norm.add_hline(y=clip, line_dash="dash", line_color="#eb144c",
                       annotation_text="clip threshold", annotation_font_color="#eb144c")
    fig_norm.update_layout(title="Gradient Norm (before clipping)", xaxis_title="Step")
    st.plotly_chart(style_chart(fig_norm, 360), use_container_width=True)

with col2:
    if "transform" in train_log.columns and train_log["transform"].notna().any():
        counts = train_log["transform"].dropna().str.split(",").explode().value_counts()
        fig_tr = go.Figure(go.Bar(x=counts.index, y=counts.values, marker_color="#8ed1fc"))
        fig_tr.update_layout(title="Transforms Drawn for Consistency Pairs", yaxis_title="Count")
        st.plotly_chart(style_chart(fig_tr, 360), use_container_width=True)
    else:
        st.info("No transformation-consistency samples in this run.")

# ── Section 2: evaluation ────────────────────────────────────────────────
st.header("Held-out Evaluation")
evals = load_eval_log(run_dir)
if evals.empty:
    st.info("No periodic evaluations logged.")
    st.stop()

fig_eval = go.Figure()
for col, color in [("epe", "#64ffda"), ("occlusion_epe", "#fcb900")]:
    if col in evals.columns:
        fig_eval.add_trace(go.Scatter(x=evals["step"], y=evals[col], name=col, mode="lines+markers",
                                      line=dict(color=color, width=2)))
for col in [c for c in evals.columns if c.startswith("epe_k")]:
    fig_eval.add_trace(go.Scatter(x=evals["step"], y=evals[col], name=col, mode="lines",
                                  line=dict(dash="dot", width=1)))
fig_eval.update_layout(title="Endpoint Error over Training", xaxis_title="Step", yaxis_title="EPE (px)")
st.plotly_chart(style_chart(fig_eval, 420), use_container_width=True)

if "mask_accuracy" in evals.columns:
    fig_mask = go.Figure(go.Scatter(x=evals["step"], y=evals["mask_accuracy"], mode="lines+markers",
                                    line=dict(color="#f78da7", width=2)))
    fig_mask.update_layout(title="Occlusion Mask Accuracy (threshold 0.5)", xaxis_title="Step",
                           yaxis_tickformat=".0%", yaxis_range=[0, 1])
    st.plotly_chart(style_chart(fig_mask, 340), use_container_width=True)

with st.expander("Raw evaluation log"):
    st.dataframe(evals, use_container_width=True, hide_index=True)
