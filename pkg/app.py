"""
Flow Training Dashboard: Home Page
Run overview for occlusion- and transformation-consistency training runs.
"""
import streamlit as st
import plotly.graph_objects as go

st.set_page_config(
    page_title="Flow Training Dashboard",
    page_icon=":ocean:",
    layout="wide",
    initial_sidebar_state="expanded",
)

from utils.data_loader import compute_kpis, load_run_config, summarize_runs
from utils.theme import STRATEGY_COLORS, apply_css, pick_run, runs_dir_input, style_chart

apply_css()

# ── Sidebar ──────────────────────────────────────────────────────────────
st.sidebar.title("Flow Training Dashboard")
st.sidebar.markdown(
    """
    **Navigation**
    - **Home**: Run overview
    - **Training Curves**: Loss components per step
    - **Evaluation**: EPE / Fl by frame gap, strategy comparison
    - **Displacement CDF**: Per-axis motion statistics
    - **Flow Viewer**: Colour-wheel renderings
    """
)
st.sidebar.markdown("---")
runs_dir = runs_dir_input()

# ── Main content ─────────────────────────────────────────────────────────
st.title("Optical Flow Training Runs")
st.subheader("Occlusion consistency and transformation consistency")

run_dir = pick_run(runs_dir)
if run_dir is None:
    st.stop()

cfg = load_run_config(run_dir)
kpis = compute_kpis(run_dir)
st.markdown(f"**Strategy:** `{cfg.get('strategy', '?')}` | **Seed:** {cfg.get('seed', '?')} "
            f"| **k set:** {cfg.get('k_set', '?')} | **Transforms:** {cfg.get('transforms', '?')}")
st.markdown("---")

col1, col2, col3 = st.columns(3)
with col1:
    if kpis["epe"] is not None:
        st.metric(
            label="Held-out EPE (px)",
            value=f"{kpis['epe']:.3f}",
            delta=f"{kpis['epe'] - kpis['epe_start']:+.3f} since step 0",
            delta_color="inverse",
        )
    else:
        st.metric("Held-out EPE (px)", "n/a")
with col2:
    st.metric("Fl outlier rate", f"{kpis['fl']:.2%}" if kpis["fl"] is not None else "n/a")
with col3:
    st.metric("Occlusion mask accuracy",
              f"{kpis['mask_accuracy']:.2%}" if kpis["mask_accuracy"] is not None else "n/a")

col4, col5, col6 = st.columns(3)
with col4:
    st.metric("Steps trained", f"{kpis['steps']:,}")
with col5:
    st.metric("Final total loss", f"{kpis['final_loss']:.4f}" if kpis["final_loss"] is not None else "n/a")
with col6:
    count = kpis["parameter_count"]
    st.metric("Parameters", f"{int(count):,}" if count is not None else "n/a",
              delta=f"{kpis['inference_ms']:.1f} ms / pair" if kpis["inference_ms"] is not None else None,
              delta_color="off")

st.markdown("---")

# ── All runs ─────────────────────────────────────────────────────────────
st.header("All Runs")
summary = summarize_runs(runs_dir)
st.dataframe(
    summary.style.format({"EPE": "{:.3f}", "Fl": "{:.2%}", "Occlusion EPE": "{:.3f}",
                          "Mask Accuracy": "{:.2%}"}, na_rep="n/a"),
    use_container_width=True,
    hide_index=True,
)

scored = summary.dropna(subset=["EPE"])
if not scored.empty:
    fig = go.Figure(go.Bar(
        x=scored["Run"],
        y=scored["EPE"],
        marker=dict(color=[STRATEGY_COLORS.get(s, "#abb8c3") for s in scored["Strategy"]]),
        text=[f"{v:.3f}" for v in scored["EPE"]],
        textposition="outside",
        hovertemplate="<b>%{x}</b><br>EPE %{y:.3f} px<extra></extra>",
    ))
    fig.update_layout(title="Final Held-out EPE by Run", yaxis_title="EPE (px)")
    st.plotly_chart(style_chart(fig, 400), use_container_width=True)

st.markdown(
    """
    ---
    | Strategy | Loss components |
    |----------|-----------------|
    | **baseline** | supervised sequence loss |
    | **oc** | + zero forcing and mask match on cow-mask occlusion pairs |
    | **tc** | + gated transformation consistency on flipped/rotated pairs, frame gaps k = 1, 2 |
    | **octc** | all four |

    *Use the sidebar to navigate to detailed pages.*
    """
)
