"""Colour-wheel flow renderings with occlusion overlays."""
from __future__ import annotations

import logging

import numpy as np
from PIL import Image

from ocflow.flow import FlowField, OcclusionMask

logger = logging.getLogger(__name__)


def flow_to_hsv(flow: FlowField, percentile: float = 99.0) -> np.ndarray:
    """
    (H, W, 3) uint8 HSV: hue = atan2(v, u) over the full byte range, saturation = magnitude
    over the field's percentile magnitude (capped at 1), value fixed at 255.
    """
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    u, v = flow.u.astype(np.float64), flow.v.astype(np.float64)
    mag = np.hypot(u, v)
    norm = float(np.percentile(mag, percentile))
    sat = np.zeros_like(mag) if norm <= 0 else np.minimum(mag / norm, 1.0)
    angle = np.mod(np.arctan2(v, u), 2 * np.pi)
    hue = np.mod(np.rint(angle / (2 * np.pi) * 256.0), 256)
    hsv = np.stack([hue, np.rint(sat * 255.0), np.full_like(mag, 255.0)], axis=-1)
    return hsv.astype(np.uint8)


def flow_to_rgb(flow: FlowField, percentile: float = 99.0) -> np.ndarray:
    """Zero motion renders white; a single direction renders a single hue."""
    hsv = Image.fromarray(flow_to_hsv(flow, percentile), mode="HSV")
    return np.asarray(hsv.convert("RGB"))


def occlusion_to_gray(mask: OcclusionMask) -> np.ndarray:
    """Visible pixels white, occluded black; soft masks map linearly."""
    return np.clip(np.rint(mask.values.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


OVERLAY_GRAY = 64
OVERLAY_STRENGTH = 0.7


def overlay_occlusion(rgb: np.ndarray, mask: OcclusionMask, strength: float = OVERLAY_STRENGTH) -> np.ndarray:
    """Blend occluded pixels towards dark gray; visible pixels keep their colour, soft masks blend linearly."""
    if not 0 <= strength <= 1:
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    if rgb.shape[:2] != mask.values.shape:
        raise ValueError(f"occlusion extent {mask.values.shape} != image extent {rgb.shape[:2]}")
    alpha = strength * (1.0 - np.clip(mask.values.astype(np.float64), 0.0, 1.0))[..., None]
    out = rgb.astype(np.float64) * (1.0 - alpha) + OVERLAY_GRAY * alpha
    return np.rint(out).astype(np.uint8)


def render_panel(
    flow: FlowField,
    occlusion: OcclusionMask | None = None,
    percentile: float = 99.0,
    side_by_side: bool = False,
) -> Image.Image:
    """Flow colour wheel with occlusion blended over it, or the gray mask beside the flow with side_by_side."""
    rgb = flow_to_rgb(flow, percentile)
    if occlusion is None:
        return Image.fromarray(rgb, mode="RGB")
    if (occlusion.width, occlusion.height) != (flow.width, flow.height):
        raise ValueError(
            f"occlusion extent {occlusion.width}x{occlusion.height} != flow extent {flow.width}x{flow.height}"
        )
    if not side_by_side:
        return Image.fromarray(overlay_occlusion(rgb, occlusion), mode="RGB")
    panel = Image.new("RGB", (2 * flow.width, flow.height))
    panel.paste(Image.fromarray(rgb, mode="RGB"), (0, 0))
    panel.paste(Image.fromarray(occlusion_to_gray(occlusion), mode="L").convert("RGB"), (flow.width, 0))
    return panel


def render_png(
    path: str,
    flow: FlowField,
    occlusion: OcclusionMask | None = None,
    percentile: float = 99.0,
    side_by_side: bool = False,
) -> str:
    render_panel(flow, occlusion, percentile, side_by_side).save(path, format="PNG")
    logger.info("wrote %s", path)
    return path
