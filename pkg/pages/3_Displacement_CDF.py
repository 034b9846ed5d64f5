"""
Page 3: Displacement CDF
Per-axis cumulative distributions of ground-truth displacements in [-100, 100].
"""
import os

import streamlit as st
import plotly.graph_objects as go

st.set_page_config(page_title="Displacement CDF | Flow", layout="wide", page_icon=":ocean:")

from ocflow.analysis import displacement_cdf
from utils.data_loader import list_flow_files, load_cdf, load_flow
from utils.theme import apply_css, runs_dir_input, style_chart

apply_css()

st.title("Displacement CDF")
st.caption("Values outside [-100, 100] px are excluded as outliers; |median(v)| > 0.5 px flags vertical skew")

runs_dir = runs_dir_input()
source = st.sidebar.radio("Source", ["Saved analysis (cdf.csv)", "Dataset directory (.flo)"])

if source.startswith("Saved"):
    analysis_dir = st.text_input("Analysis directory", value=os.path.join(runs_dir, "cdf"))
    table, stats = load_cdf(analysis_dir)
    if table.empty:
        st.info("No cdf.csv here. Produce one with `python -m ocflow cdf --data <dataset> --out <dir>`.")
        st.stop()
    stats = stats.iloc[0].to_dict() if not stats.empty else {}
else:
    data_dir = st.text_input("Dataset directory", value="data")
    files = list_flow_files(data_dir)
    if not files:
        st.warning(f"No .flo files below `{data_dir}`.")
        st.stop()
    result = displacement_cdf([load_flow(f) for f in files])
    table, stats = result.table, result.stats().iloc[0].to_dict()
    st.caption(f"{len(files)} flow files")

# ── Summary ──────────────────────────────────────────────────────────────
if stats:
    col1, col2, col3 = st.columns(3)
    with col1:
        st.metric("Samples", f"{int(stats['samples']):,}",
                  delta=f"{int(stats['excluded_u']) + int(stats['excluded_v'])} excluded", delta_color="off")
    with col2:
        st.metric("median(u)", f"{stats['median_u']:.2f} px")
    with col3:
        skewed = bool(stats["asymmetric_v"])
        st.metric("median(v)", f"{stats['median_v']:.2f} px",
                  delta="vertical skew" if skewed else "symmetric",
                  delta_color="inverse" if skewed else "off")

# ── CDF chart ────────────────────────────────────────────────────────────
fig = go.Figure()
fig.add_trace(go.Scatter(x=table["value"], y=table["cdf_u"], name="u (horizontal)", mode="lines",
                         line=dict(shape="hv", color="#64ffda", width=2)))
fig.add_trace(go.Scatter(x=table["value"], y=table["cdf_v"], name="v (vertical)", mode="lines",
                         line=dict(shape="hv", color="#f78da7", width=2)))
fig.add_vline(x=0, line_dash="dot", line_color="#abb8c3")
fig.update_layout(title="Cumulative Distribution of Displacements", xaxis_title="Displacement (px)",
                  yaxis_title="Cumulative fraction", yaxis_range=[0, 1.02])
zoom = st.slider("Zoom (px)", 5, 100, 100)
fig.update_xaxes(range=[-zoom, zoom])
st.plotly_chart(style_chart(fig, 480), use_container_width=True)

with st.expander("CDF table"):
    st.dataframe(table, use_container_width=True, hide_index=True)
