"""
Flow-field and occlusion-mask value types, the closed set of exact whole-image
transforms with their restoration, and the endpoint-error metrics.
Flows are stored channel-first (2, H, W): u rightward (+x), v downward (+y).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from ocflow.tensor import Tensor, concat


# ── Value types ──────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense per-pixel displacement (u, v) in pixels, shape (2, H, W)."""

    uv: np.ndarray

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float32)
        if uv.ndim != 3 or uv.shape[0] != 2:
            raise ValueError(f"flow must have shape (2, H, W), got {uv.shape}")
        if not np.isfinite(uv).all():
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "uv", uv)

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((2, height, width), dtype=np.float32))

    @classmethod
    def constant(cls, width: int, height: int, u: float, v: float) -> "FlowField":
        uv = np.empty((2, height, width), dtype=np.float32)
        uv[0], uv[1] = u, v
        return cls(uv)

    @classmethod
    def from_hw2(cls, arr: np.ndarray) -> "FlowField":
        """From the interleaved (H, W, 2) layout used on disk."""
        return cls(np.moveaxis(np.asarray(arr), -1, 0))

    def to_hw2(self) -> np.ndarray:
        return np.ascontiguousarray(np.moveaxis(self.uv, 0, -1))

    @property
    def width(self) -> int:
        return self.uv.shape[2]

    @property
    def height(self) -> int:
        return self.uv.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.uv[0]

    @property
    def v(self) -> np.ndarray:
        return self.uv[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.uv[0].astype(np.float64), self.uv[1].astype(np.float64))

    def equals(self, other: "FlowField") -> bool:
        """Bitwise equality."""
        return self.uv.shape == other.uv.shape and self.uv.tobytes() == other.uv.tobytes()


@dataclass(frozen=True, eq=False)
class OcclusionMask:
    """
    Per-pixel occlusion indicator, 1 = visible, 0 = occluded.
    Ground-truth masks are binary; predicted masks hold sigmoid outputs strictly inside (0, 1).
    """

    values: np.ndarray
    predicted: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError(f"mask must have shape (H, W), got {values.shape}")
        if self.predicted:
            if not ((values > 0) & (values < 1)).all():
                raise ValueError("predicted mask values must lie strictly inside (0, 1)")
        elif not np.isin(values, (0.0, 1.0)).all():
            raise ValueError("ground-truth mask must be binary {0, 1}")
        object.__setattr__(self, "values", values)

    @classmethod
    def ones(cls, width: int, height: int) -> "OcclusionMask":
        return cls(np.ones((height, width), dtype=np.float32))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def occluded_fraction(self) -> float:
        return float(np.mean(self.values < 0.5))

    def threshold(self, level: float = 0.5) -> "OcclusionMask":
        return OcclusionMask((self.values >= level).astype(np.float32))


@dataclass(frozen=True, eq=False)
class IdentifierMask:
    """Per-pixel gate alpha: True where the consistency error is below epsilon."""

    alpha: np.ndarray

    @property
    def width(self) -> int:
        return self.alpha.shape[-1]

    @property
    def height(self) -> int:
        return self.alpha.shape[-2]

    def coverage(self) -> float:
        return float(np.mean(self.alpha)) if self.alpha.size else 0.0


# ── Geometric transforms ─────────────────────────────────────────────────

class TransformKind(str, Enum):
    IDENTITY = "identity"
    HFLIP = "hflip"
    VFLIP = "vflip"
    ROT90CW = "rot90cw"
    ROT180 = "rot180"
    ROT270CW = "rot270cw"


# spatial op per kind: ("flip", axis from the end) or ("rot", np.rot90 k over (H, W))
_SPATIAL = {
    TransformKind.IDENTITY: ("rot", 0),
    TransformKind.HFLIP: ("flip", -1),
    TransformKind.VFLIP: ("flip", -2),
    TransformKind.ROT90CW: ("rot", -1),
    TransformKind.ROT180: ("rot", 2),
    TransformKind.ROT270CW: ("rot", 1),
}

# (u', v') = J (u, v); y points down
_JACOBIAN = {
    TransformKind.IDENTITY: ((1, 0), (0, 1)),
    TransformKind.HFLIP: ((-1, 0), (0, 1)),
    TransformKind.VFLIP: ((1, 0), (0, -1)),
    TransformKind.ROT90CW: ((0, -1), (1, 0)),
    TransformKind.ROT180: ((-1, 0), (0, -1)),
    TransformKind.ROT270CW: ((0, 1), (-1, 0)),
}

_INVERSE = {
    TransformKind.IDENTITY: TransformKind.IDENTITY,
    TransformKind.HFLIP: TransformKind.HFLIP,
    TransformKind.VFLIP: TransformKind.VFLIP,
    TransformKind.ROT90CW: TransformKind.ROT270CW,
    TransformKind.ROT180: TransformKind.ROT180,
    TransformKind.ROT270CW: TransformKind.ROT90CW,
}

QUARTER_TURNS = (TransformKind.ROT90CW, TransformKind.ROT180, TransformKind.ROT270CW)


@dataclass(frozen=True)
class GeoTransform:
    """An exact, bijective whole-image transform over a source extent (width, height)."""

    kind: TransformKind
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "kind", TransformKind(self.kind))
        if self.width < 1 or self.height < 1:
            raise ValueError(f"extent must be positive, got {self.width}x{self.height}")

    @property
    def swaps_axes(self) -> bool:
        return self.kind in (TransformKind.ROT90CW, TransformKind.ROT270CW)

    @property
    def output_extent(self) -> tuple[int, int]:
        return (self.height, self.width) if self.swaps_axes else (self.width, self.height)

    @property
    def jacobian(self) -> np.ndarray:
        return np.array(_JACOBIAN[self.kind], dtype=np.int8)

    def pixel_map(self, x: int, y: int) -> tuple[int, int]:
        w, h = self.width, self.height
        return {
            TransformKind.IDENTITY: (x, y),
            TransformKind.HFLIP: (w - 1 - x, y),
            TransformKind.VFLIP: (x, h - 1 - y),
            TransformKind.ROT90CW: (h - 1 - y, x),
            TransformKind.ROT180: (w - 1 - x, h - 1 - y),
            TransformKind.ROT270CW: (y, w - 1 - x),
        }[self.kind]

    def inverse(self) -> "GeoTransform":
        """The restoration R: maps the transformed frame back onto the source frame."""
        return GeoTransform(_INVERSE[self.kind], *self.output_extent)


def sample_transform(kinds: Sequence[str], width: int, height: int, rng: np.random.Generator) -> GeoTransform:
    """Draw one transform family uniformly; "rot" expands to a uniform quarter turn."""
    if not kinds:
        raise ValueError("no transform kinds to sample from")
    family = kinds[int(rng.integers(len(kinds)))]
    if family == "rot":
        kind = QUARTER_TURNS[int(rng.integers(len(QUARTER_TURNS)))]
    else:
        kind = TransformKind(family)
    return GeoTransform(kind, width, height)


def _spatial(x, kind: TransformKind, axes: tuple[int, int]):
    op, arg = _SPATIAL[kind]
    if op == "rot" and arg == 0:
        return x
    if isinstance(x, Tensor):
        return x.flip(axes=axes[arg]) if op == "flip" else x.rot90(arg, axes=axes)
    return np.flip(x, axis=axes[arg]) if op == "flip" else np.rot90(x, k=arg, axes=axes)


def _check_extent(height: int, width: int, t: GeoTransform) -> None:
    if (width, height) != (t.width, t.height):
        raise ValueError(f"transform built for {t.width}x{t.height} applied to {width}x{height}")


def transform_image(img: np.ndarray, t: GeoTransform) -> np.ndarray:
    """Move pixel (x, y) of an (H, W) or (H, W, C) image to P(x, y)."""
    img = np.asarray(img)
    _check_extent(img.shape[0], img.shape[1], t)
    return np.ascontiguousarray(_spatial(img, t.kind, (0, 1)))


def _transform_uv(uv, t: GeoTransform):
    """g(P(p)) = J f(p) on (..., 2, H, W) arrays or tensors; sign flips and channel swaps only."""
    _check_extent(uv.shape[-2], uv.shape[-1], t)
    moved = _spatial(uv, t.kind, (-2, -1))
    jac = _JACOBIAN[t.kind]
    rows = []
    for r in range(2):
        src = 0 if jac[r][0] != 0 else 1
        sign = float(jac[r][src])
        rows.append(moved[..., src:src + 1, :, :] * sign)
    if isinstance(uv, Tensor):
        return concat(rows, axis=-3)
    return np.concatenate(rows, axis=-3)


def transform_flow(f, t: GeoTransform):
    """Transform a FlowField, a (..., 2, H, W) array, or a graph Tensor."""
    if isinstance(f, FlowField):
        return FlowField(_transform_uv(f.uv, t))
    return _transform_uv(f, t)


def restore_flow(f, t: GeoTransform):
    """Undo transform_flow(., t) for a field living in the transformed frame of t."""
    return transform_flow(f, t.inverse())


# ── Metrics ──────────────────────────────────────────────────────────────

def _uv(f) -> np.ndarray:
    return f.uv if isinstance(f, FlowField) else np.asarray(f)


def _valid(valid, shape: tuple[int, int]) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    values = valid.values if isinstance(valid, OcclusionMask) else np.asarray(valid)
    if values.shape != shape:
        raise ValueError(f"valid mask shape {values.shape} != flow extent {shape}")
    mask = values >= 0.5
    if not mask.any():
        raise ValueError("valid set is empty")
    return mask


def endpoint_errors(pred, gt) -> np.ndarray:
    p, g = _uv(pred).astype(np.float64), _uv(gt).astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"extent mismatch: pred {p.shape} vs gt {g.shape}")
    return np.hypot(p[0] - g[0], p[1] - g[1])


def epe(pred, gt, valid=None) -> float:
    """Mean endpoint error over valid pixels."""
    err = endpoint_errors(pred, gt)
    return float(np.mean(err[_valid(valid, err.shape)]))


def fl_outlier_rate(pred, gt, valid=None) -> float:
    """Fraction of valid pixels with endpoint error > 3 px and > 5% of the ground-truth magnitude."""
    err = endpoint_errors(pred, gt)
    g = _uv(gt).astype(np.float64)
    mag = np.hypot(g[0], g[1])
    mask = _valid(valid, err.shape)
    outlier = (err > 3.0) & (err > 0.05 * mag)
    return float(np.mean(outlier[mask]))
