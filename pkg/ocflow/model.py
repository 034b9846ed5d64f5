"""
Toy iterative flow estimator: a feature encoder and a context encoder at 1/downsample
resolution, a single-level all-pairs correlation looked up in a (2r+1)^2 window around
the current flow, and N gated recurrent refinement steps, each emitting a flow
increment and an occlusion logit. Predictions are upsampled to full resolution.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from ocflow.errors import FormatError
from ocflow.flow import FlowField, OcclusionMask
from ocflow.tensor import Tensor, bilinear_sample, concat, conv2d, no_grad

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OCFLOWCK"
CHECKPOINT_VERSION = 1
OCCLUSION_CLIP = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    feature_channels: int = 32
    downsample: int = 2
    radius: int = 3
    hidden_channels: int = 48
    iterations: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.downsample < 1:
            raise ValueError(f"downsample must be >= 1, got {self.downsample}")
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.feature_channels < 2 or self.hidden_channels < 1:
            raise ValueError(
                f"need feature_channels >= 2 and hidden_channels >= 1, got "
                f"{self.feature_channels} and {self.hidden_channels}"
            )

    @property
    def window(self) -> int:
        return (2 * self.radius + 1) ** 2

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        names = {f.name for f in fields(cls)}
        if set(values) != names:
            raise ValueError(f"model config keys {sorted(values)} != expected {sorted(names)}")
        return cls(**{k: int(v) for k, v in values.items()})


@dataclass
class ModelOutput:
    """Per-iteration full-resolution flows (N, 2, H, W) and occlusion logits (N, H, W)."""

    flows: list[Tensor]
    occlusion_logits: list[Tensor]

    def occlusion_probs(self) -> list[Tensor]:
        return [logit.sigmoid().clip(OCCLUSION_CLIP, 1.0 - OCCLUSION_CLIP) for logit in self.occlusion_logits]

    def final_flow(self, index: int = 0) -> FlowField:
        return FlowField(self.flows[-1].data[index])

    def final_occlusion(self, index: int = 0) -> OcclusionMask:
        return OcclusionMask(self.occlusion_probs()[-1].data[index], predicted=True)


# ── Helpers ──────────────────────────────────────────────────────────────

def as_batch(img) -> Tensor:
    """(H, W, C) image array or (N, C, H, W) array/tensor -> NCHW tensor."""
    if isinstance(img, Tensor):
        return img
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)[None]
    if arr.ndim != 4:
        raise ValueError(f"expected an (H, W, C) image or NCHW batch, got shape {arr.shape}")
    return Tensor(np.ascontiguousarray(arr))


def coords_grid(n: int, height: int, width: int) -> np.ndarray:
    """(N, 2, H, W) pixel coordinates, channel 0 = x, channel 1 = y."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float32), np.arange(width, dtype=np.float32), indexing="ij")
    return np.broadcast_to(np.stack([xs, ys])[None], (n, 2, height, width)).copy()


def window_offsets(radius: int) -> list[tuple[int, int]]:
    """(dx, dy) offsets, dy outer, dx inner; the centre is at index len // 2."""
    span = range(-radius, radius + 1)
    return [(dx, dy) for dy in span for dx in span]


def correlation_lookup(feat1: Tensor, feat2: Tensor, flow: Tensor, radius: int) -> Tensor:
    """
    <feat1(p), feat2(p + flow(p) + d)> / sqrt(C) for every d in the window, bilinear
    samples of feat2 with border clamping. Returns (N, (2r+1)^2, H, W).
    """
    n, c, h, w = feat1.shape
    centre = flow + coords_grid(n, h, w)
    shifted = [centre + np.array([dx, dy], dtype=np.float32).reshape(1, 2, 1, 1) for dx, dy in window_offsets(radius)]
    k = len(shifted)
    sampled = bilinear_sample(feat2, concat(shifted, axis=2)).reshape(n, c, k, h, w)
    corr = (sampled * feat1.reshape(n, c, 1, h, w)).sum(axis=1)
    return corr * (1.0 / np.sqrt(c))


def upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (pixel-centre alignment, border clamped)."""
    if factor == 1:
        return x
    n, _, h, w = x.shape
    big = coords_grid(n, h * factor, w * factor)
    return bilinear_sample(x, Tensor((big + 0.5) / factor - 0.5))


# ── Model ────────────────────────────────────────────────────────────────

class FlowModel:
    """Weights live in an ordered name -> Tensor mapping; forward builds a fresh graph per call."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(cfg.seed)
        fc, hc = cfg.feature_channels, cfg.hidden_channels
        half = max(1, fc // 2)
        for prefix, out_ch in (("fnet", fc), ("cnet", 2 * hc)):
            self._add_conv(rng, f"{prefix}.conv1", 3, half, 3)
            self._add_conv(rng, f"{prefix}.conv2", half, fc, 3)
            self._add_conv(rng, f"{prefix}.conv3", fc, out_ch, 1)
        self._add_conv(rng, "update.motion", cfg.window + 2, hc, 3)
        for gate in ("convz", "convr", "convq"):
            self._add_conv(rng, f"update.{gate}", 3 * hc, hc, 3)
        self._add_conv(rng, "update.flow_head", hc, 2, 3)
        self._add_conv(rng, "update.occ_head", hc, 1, 3)

    def _add_conv(self, rng: np.random.Generator, name: str, in_ch: int, out_ch: int, k: int) -> None:
        bound = np.sqrt(1.0 / (in_ch * k * k))
        self.params[f"{name}.weight"] = Tensor(
            rng.uniform(-bound, bound, (out_ch, in_ch, k, k)).astype(np.float32), requires_grad=True
        )
        self.params[f"{name}.bias"] = Tensor(
            rng.uniform(-bound, bound, (out_ch, 1, 1)).astype(np.float32), requires_grad=True
        )

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        weight = self.params[f"{name}.weight"]
        pad = weight.shape[-1] // 2
        return conv2d(x, weight, stride=stride, padding=pad) + self.params[f"{name}.bias"]

    # parameters

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for name, arr in state.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {self.params[name].shape}")
            self.params[name].data = np.asarray(arr, dtype=np.float32).copy()

    # network stages

    def _check_extent(self, img: Tensor) -> None:
        h, w = img.shape[-2:]
        d = self.cfg.downsample
        if h % d or w % d:
            raise ValueError(f"image extent {w}x{h} not divisible by downsample factor {d}")

    def _encoder(self, prefix: str, img) -> Tensor:
        x = as_batch(img)
        self._check_extent(x)
        x = x * 2.0 - 1.0
        x = self._conv(f"{prefix}.conv1", x).relu()
        x = self._conv(f"{prefix}.conv2", x, stride=self.cfg.downsample).relu()
        return self._conv(f"{prefix}.conv3", x)

    def encode(self, img) -> Tensor:
        """Per-pixel features at 1/downsample resolution, (N, feature_channels, H/d, W/d)."""
        return self._encoder("fnet", img)

    def context(self, img) -> tuple[Tensor, Tensor]:
        """Initial hidden state and context features from the first image."""
        hc = self.cfg.hidden_channels
        out = self._encoder("cnet", img)
        return out[:, :hc].tanh(), out[:, hc:].relu()

    def iterate(self, hidden: Tensor, corr: Tensor, flow: Tensor, ctx: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """One gated recurrent refinement step -> (hidden, flow increment, coarse occlusion logit)."""
        motion = self._conv("update.motion", concat([corr, flow], axis=1)).relu()
        x = concat([motion, ctx], axis=1)
        hx = concat([hidden, x], axis=1)
        z = self._conv("update.convz", hx).sigmoid()
        r = self._conv("update.convr", hx).sigmoid()
        q = self._conv("update.convq", concat([r * hidden, x], axis=1)).tanh()
        hidden = (1.0 - z) * hidden + z * q
        return hidden, self._conv("update.flow_head", hidden), self._conv("update.occ_head", hidden)

    def forward(self, image1, image2) -> ModelOutput:
        """Run encode, then N refinement iterations; the last flow is the estimate."""
        i1, i2 = as_batch(image1), as_batch(image2)
        if i1.shape != i2.shape:
            raise ValueError(f"image extents differ: {i1.shape} vs {i2.shape}")
        d = self.cfg.downsample
        feat1, feat2 = self.encode(i1), self.encode(i2)
        hidden, ctx = self.context(i1)
        n, _, h, w = feat1.shape
        flow = Tensor(np.zeros((n, 2, h, w), dtype=np.float32))
        flows, logits = [], []
        for _ in range(self.cfg.iterations):
            corr = correlation_lookup(feat1, feat2, flow, self.cfg.radius)
            hidden, delta, logit = self.iterate(hidden, corr, flow, ctx)
            flow = flow + delta
            flows.append(upsample(flow, d) * float(d))
            logits.append(upsample(logit, d).reshape(n, h * d, w * d))
        return ModelOutput(flows, logits)

    __call__ = forward

    def predict(self, image1, image2) -> tuple[FlowField, OcclusionMask]:
        with no_grad():
            out = self.forward(image1, image2)
        return out.final_flow(), out.final_occlusion()


# ── Checkpoint file ──────────────────────────────────────────────────────
# magic | u32 version | 64-byte hex config hash | u32 len + model config text |
# u32 block count | per block: u16 name len, name, u8 ndim, u32 dims, f32 LE data

@dataclass(frozen=True)
class CheckpointHeader:
    version: int
    config_hash: str
    model_config: ModelConfig


def encode_checkpoint(model: FlowModel, config_hash: str) -> bytes:
    if len(config_hash) != 64:
        raise ValueError(f"config hash must be 64 hex characters, got {len(config_hash)}")
    cfg_text = model.cfg.to_text().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), config_hash.encode("ascii"),
             struct.pack("<I", len(cfg_text)), cfg_text, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.path, self.pos = data, path, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated: need {n} bytes, {len(self.data) - self.pos} left", self.path, self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, path: str = "<bytes>") -> tuple[FlowModel, CheckpointHeader]:
    reader = _Reader(data, path)
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", path, 0)
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, reader.pos - 4)
    config_hash = reader.take(64).decode("ascii")
    (cfg_len,) = reader.unpack("<I")
    model_cfg = ModelConfig.from_text(reader.take(cfg_len).decode("utf-8"))
    model = FlowModel(model_cfg)
    (count,) = reader.unpack("<I")
    state = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} trailing bytes", path, reader.pos)
    model.load_state_dict(state)
    return model, CheckpointHeader(version, config_hash, model_cfg)


def save_checkpoint(path: str, model: FlowModel, config_hash: str) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model, config_hash))
    logger.info("wrote checkpoint %s (%d parameters)", path, model.parameter_count())


def load_checkpoint(path: str) -> tuple[FlowModel, CheckpointHeader]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), path)


def weights_digest(model: FlowModel) -> str:
    """SHA-256 over all parameter bytes, for determinism checks."""
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()
