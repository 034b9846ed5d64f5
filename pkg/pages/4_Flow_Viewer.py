"""
Page 4: Flow Viewer
Colour-wheel rendering of .flo files: hue is direction, saturation is magnitude.
"""
import os

import numpy as np
import streamlit as st
from PIL import Image

st.set_page_config(page_title="Flow Viewer | Flow", layout="wide", page_icon=":ocean:")

from ocflow.data import decode_flo
from ocflow.errors import FormatError
from ocflow.flow import FlowField, OcclusionMask
from ocflow.visualize import flow_to_rgb, occlusion_to_gray, overlay_occlusion
from utils.data_loader import list_flow_files, load_flow
from utils.theme import apply_css

apply_css()

st.title("Flow Viewer")
st.caption("Zero motion is white; saturation reaches full at the field's chosen magnitude percentile")

percentile = st.sidebar.slider("Normalisation percentile", 50.0, 100.0, 99.0, 0.5)
show_overlay = st.sidebar.checkbox("Darken occluded pixels on the flow", value=True)
upload = st.sidebar.file_uploader("Upload a .flo file", type=["flo"])

flow, occlusion, label = None, None, ""
if upload is not None:
    try:
        flow = decode_flo(upload.getvalue(), upload.name)
        label = upload.name
    except FormatError as exc:
        st.warning(str(exc))
else:
    data_dir = st.text_input("Dataset directory", value="data")
    files = list_flow_files(data_dir)
    if not files:
        st.info(f"No .flo files below `{data_dir}`. Write a dataset with `python -m ocflow synth --out {data_dir}`.")
        st.stop()
    label = st.selectbox("Flow file", files, format_func=lambda p: os.path.relpath(p, data_dir))
    flow = load_flow(label)
    occ_path = os.path.join(os.path.dirname(label), os.path.basename(label).replace("flow_", "occ_")[:-4] + ".png")
    if os.path.exists(occ_path):
        with Image.open(occ_path) as im:
            occlusion = OcclusionMask((np.asarray(im.convert("L")) >= 128).astype(np.float32))

if flow is None:
    st.stop()

# ── Renders ──────────────────────────────────────────────────────────────
scale = max(1, 384 // max(flow.width, flow.height))
col1, col2 = st.columns(2)
with col1:
    st.subheader("Flow")
    rgb = flow_to_rgb(flow, percentile)
    if show_overlay and occlusion is not None:
        rgb = overlay_occlusion(rgb, occlusion)
    st.image(np.kron(rgb, np.ones((scale, scale, 1), dtype=np.uint8)),
             caption=label)
with col2:
    st.subheader("Occlusion mask")
    if occlusion is not None:
        st.image(np.kron(occlusion_to_gray(occlusion), np.ones((scale, scale), dtype=np.uint8)),
                 caption="white = visible in the next frame, black = occluded", clamp=True)
    else:
        st.info("No ground-truth occlusion mask next to this flow file.")

# ── Statistics ───────────────────────────────────────────────────────────
mag = flow.magnitude()
c1, c2, c3, c4 = st.columns(4)
c1.metric("Extent", f"{flow.width} x {flow.height}")
c2.metric("Mean |f|", f"{float(mag.mean()):.2f} px")
c3.metric(f"p{percentile:g} |f|", f"{float(np.percentile(mag, percentile)):.2f} px")
c4.metric("Mean (u, v)", f"({float(flow.u.mean()):.2f}, {float(flow.v.mean()):.2f})")

# Colour-wheel legend
ys, xs = np.mgrid[-1:1:128j, -1:1:128j]
wheel = FlowField(np.stack([xs, ys]).astype(np.float32))
st.image(flow_to_rgb(wheel, 100.0), caption="Direction key (+x right, +y down)", width=160)
