"""
Synthetic sequences with exact ground truth, frame-hopping pair sampling,
occlusion-pair construction, and the .flo / PPM / manifest file formats.
Images are (H, W, 3) float32 in [0, 1].
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from ocflow.cowmask import CowmaskParams, apply_occlusion, generate_mask
from ocflow.errors import FormatError
from ocflow.flow import FlowField, OcclusionMask

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
MANIFEST_NAME = "manifest.txt"


# ── Scenes ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Sprite:
    """A textured shape at position (x, y) in frame 0 moving by velocity (vx, vy) px/frame."""

    mask: np.ndarray
    texture: np.ndarray
    position: tuple[float, float]
    velocity: tuple[float, float]


@dataclass(frozen=True)
class SyntheticScene:
    background: np.ndarray
    background_velocity: tuple[float, float]
    sprites: tuple[Sprite, ...]
    frames: int
    width: int
    height: int
    seed: int = 0

    def __post_init__(self):
        if self.frames < 3:
            raise ValueError(f"a scene needs at least 3 frames, got {self.frames}")
        if self.background.shape != (self.height, self.width, 3):
            raise ValueError(f"background shape {self.background.shape} != ({self.height}, {self.width}, 3)")


@dataclass(frozen=True)
class SceneParams:
    width: int = 32
    height: int = 32
    frames: int = 4
    min_sprites: int = 1
    max_sprites: int = 3
    min_size: int = 6
    max_size: int = 14
    max_speed: int = 3
    background_speed: int = 1
    velocity_bias: tuple[float, float] = (0.0, 0.0)
    subpixel: bool = False

    def __post_init__(self):
        if self.frames < 3:
            raise ValueError(f"frames must be >= 3, got {self.frames}")
        if not 1 <= self.min_sprites <= self.max_sprites:
            raise ValueError(f"sprite count range ({self.min_sprites}, {self.max_sprites}) invalid")
        if not 2 <= self.min_size <= self.max_size:
            raise ValueError(f"sprite size range ({self.min_size}, {self.max_size}) invalid")


def _texture(rng: np.random.Generator, height: int, width: int, wrap: bool) -> np.ndarray:
    mode = "wrap" if wrap else "reflect"
    coarse = ndimage.gaussian_filter(rng.standard_normal((height, width, 3)), sigma=(3, 3, 0), mode=mode)
    fine = ndimage.gaussian_filter(rng.standard_normal((height, width, 3)), sigma=(0.8, 0.8, 0), mode=mode)
    tex = 2.0 * coarse + 0.5 * fine + rng.uniform(-0.5, 0.5, size=3)
    lo, hi = tex.min(), tex.max()
    return ((tex - lo) / max(hi - lo, 1e-6)).astype(np.float32)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    if rng.random() < 0.5:
        return np.ones((h, w), dtype=bool)
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    return ((ys - cy) / (h / 2)) ** 2 + ((xs - cx) / (w / 2)) ** 2 <= 1.0


def _velocity(rng: np.random.Generator, limit: int, bias: tuple[float, float], subpixel: bool) -> tuple[float, float]:
    if limit == 0:
        v = np.zeros(2)
    elif subpixel:
        v = rng.uniform(-limit, limit, size=2)
    else:
        v = rng.integers(-limit, limit + 1, size=2).astype(np.float64)
    return float(v[0] + bias[0]), float(v[1] + bias[1])


def random_scene(params: SceneParams, rng: np.random.Generator, seed: int = 0) -> SyntheticScene:
    sprites = []
    for _ in range(int(rng.integers(params.min_sprites, params.max_sprites + 1))):
        h = int(rng.integers(params.min_size, params.max_size + 1))
        w = int(rng.integers(params.min_size, params.max_size + 1))
        pos = (float(rng.integers(0, max(1, params.width - w))), float(rng.integers(0, max(1, params.height - h))))
        sprites.append(Sprite(
            mask=_shape_mask(rng, h, w),
            texture=_texture(rng, h, w, wrap=False),
            position=pos,
            velocity=_velocity(rng, params.max_speed, params.velocity_bias, params.subpixel),
        ))
    return SyntheticScene(
        background=_texture(rng, params.height, params.width, wrap=True),
        background_velocity=_velocity(rng, params.background_speed, params.velocity_bias, params.subpixel),
        sprites=tuple(sprites),
        frames=params.frames,
        width=params.width,
        height=params.height,
        seed=seed,
    )


# ── Rendering ────────────────────────────────────────────────────────────

@dataclass
class RenderedSequence:
    """frames[t]; flows[t] and occlusions[t] describe frame t -> t+1."""

    frames: list[np.ndarray]
    flows: list[FlowField]
    occlusions: list[OcclusionMask]
    layers: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


def _sample(channel: np.ndarray, ys: np.ndarray, xs: np.ndarray, mode: str) -> np.ndarray:
    return ndimage.map_coordinates(channel, [ys, xs], order=1, mode=mode, cval=0.0)


def _render_frame(scene: SyntheticScene, t: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:scene.height, 0:scene.width].astype(np.float64)
    bx, by = scene.background_velocity
    img = np.stack([_sample(scene.background[..., c], ys - t * by, xs - t * bx, "grid-wrap") for c in range(3)], -1)
    layer = np.zeros((scene.height, scene.width), dtype=np.int32)
    for idx, sprite in enumerate(scene.sprites, start=1):
        ly = ys - (sprite.position[1] + t * sprite.velocity[1])
        lx = xs - (sprite.position[0] + t * sprite.velocity[0])
        inside = _sample(sprite.mask.astype(np.float64), ly, lx, "constant") >= 0.5
        if not inside.any():
            continue
        for c in range(3):
            img[..., c][inside] = _sample(sprite.texture[..., c], ly[inside], lx[inside], "nearest")
        layer[inside] = idx
    return img.astype(np.float32), layer


def render_scene(scene: SyntheticScene, mark_revealed: bool = True) -> RenderedSequence:
    """
    Frames plus exact flow t -> t+1 (each pixel carries the velocity of its visible layer)
    and occlusion masks: 0 where the frame-t point is covered or leaves the image in t+1,
    and with mark_revealed also where a surface hidden in frame t appears in t+1.
    """
    rendered = [_render_frame(scene, t) for t in range(scene.frames)]
    velocities = np.array([scene.background_velocity] + [s.velocity for s in scene.sprites], dtype=np.float32)
    h, w = scene.height, scene.width
    ys, xs = np.mgrid[0:h, 0:w]
    frames, flows, masks = [], [], []
    for t in range(scene.frames - 1):
        layer_t, layer_n = rendered[t][1], rendered[t + 1][1]
        vel = velocities[layer_t]
        flows.append(FlowField(np.stack([vel[..., 0], vel[..., 1]])))
        qx = np.rint(xs + vel[..., 0]).astype(np.int64)
        qy = np.rint(ys + vel[..., 1]).astype(np.int64)
        inside = (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
        visible = np.zeros((h, w), dtype=bool)
        visible[inside] = layer_n[qy[inside], qx[inside]] == layer_t[inside]
        if mark_revealed:
            back = velocities[layer_n]
            px = np.rint(xs - back[..., 0]).astype(np.int64)
            py = np.rint(ys - back[..., 1]).astype(np.int64)
            src_inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
            seen = np.zeros((h, w), dtype=bool)
            seen[src_inside] = layer_t[py[src_inside], px[src_inside]] == layer_n[src_inside]
            visible &= seen
        masks.append(OcclusionMask(visible.astype(np.float32)))
    frames = [img for img, _ in rendered]
    return RenderedSequence(frames, flows, masks, [layer for _, layer in rendered])


def make_split(params: SceneParams, count: int, seed: int) -> list[RenderedSequence]:
    """count independent scenes drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    return [render_scene(random_scene(params, rng, seed=seed)) for _ in range(count)]


def warp_backward(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """warped(p) = image(p + flow(p)), bilinear with border clamping."""
    ys, xs = np.mgrid[0:flow.height, 0:flow.width].astype(np.float64)
    cy, cx = ys + flow.v, xs + flow.u
    chans = [_sample(image[..., c].astype(np.float64), cy, cx, "nearest") for c in range(image.shape[-1])]
    return np.stack(chans, -1).astype(image.dtype)


def compose_flow(f01: FlowField, f12: FlowField) -> FlowField:
    """f02(p) = f01(p) + f12(p + f01(p)), bilinear lookup with border clamping."""
    if f01.uv.shape != f12.uv.shape:
        raise ValueError(f"flow extents differ: {f01.uv.shape} vs {f12.uv.shape}")
    ys, xs = np.mgrid[0:f01.height, 0:f01.width].astype(np.float64)
    cy, cx = ys + f01.v, xs + f01.u
    second = np.stack([_sample(f12.uv[c].astype(np.float64), cy, cx, "nearest") for c in range(2)])
    return FlowField((f01.uv.astype(np.float64) + second).astype(np.float32))


# ── Samples ──────────────────────────────────────────────────────────────

@dataclass
class TrainSample:
    image1: np.ndarray
    image2: np.ndarray
    k: int
    gt_flow: FlowField | None = None
    gt_occlusion: OcclusionMask | None = None
    labeled: bool = False
    zero_forcing: bool = False
    t: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"frame gap k must be >= 1, got {self.k}")
        if self.labeled and self.gt_flow is None:
            raise ValueError("a labeled sample needs a ground-truth flow")
        if self.image1.shape != self.image2.shape:
            raise ValueError(f"image extents differ: {self.image1.shape} vs {self.image2.shape}")


def draw_pair(sequence: RenderedSequence, k_set: Sequence[int], rng: np.random.Generator) -> TrainSample:
    """Uniform t and k in k_set; only k = 1 pairs carry ground truth."""
    ks = sorted(set(k_set))
    if not ks:
        raise ValueError("k_set is empty")
    if ks[0] < 1 or ks[-1] >= len(sequence):
        raise ValueError(f"k_set {ks} must lie in [1, {len(sequence) - 1}] for a {len(sequence)}-frame sequence")
    k = ks[int(rng.integers(len(ks)))]
    t = int(rng.integers(0, len(sequence) - k))
    labeled = k == 1
    return TrainSample(
        image1=sequence.frames[t],
        image2=sequence.frames[t + k],
        k=k,
        gt_flow=sequence.flows[t] if labeled else None,
        gt_occlusion=sequence.occlusions[t] if labeled else None,
        labeled=labeled,
        t=t,
    )


def frame_hop_sampler(
    sequences: RenderedSequence | Sequence[RenderedSequence], k_set: Sequence[int], rng: np.random.Generator
) -> Iterator[TrainSample]:
    """Endless stream of pairs; with several sequences one is drawn uniformly per sample."""
    pool = [sequences] if isinstance(sequences, RenderedSequence) else list(sequences)
    if not pool:
        raise ValueError("no sequences to sample from")
    while True:
        seq = pool[int(rng.integers(len(pool)))] if len(pool) > 1 else pool[0]
        yield draw_pair(seq, k_set, rng)


def make_occlusion_pair(
    image: np.ndarray, params: CowmaskParams, rng: np.random.Generator, identical: bool = False
) -> TrainSample:
    """(I, I * mask) with zero ground-truth flow; identical=True gives the (I, I) pair with an all-ones mask."""
    h, w = image.shape[:2]
    mask = OcclusionMask.ones(w, h) if identical else generate_mask(w, h, params, rng)
    return TrainSample(
        image1=image,
        image2=apply_occlusion(image, mask),
        k=1,
        gt_flow=FlowField.zeros(w, h),
        gt_occlusion=mask,
        labeled=False,
        zero_forcing=True,
    )


@dataclass
class EvalPair:
    image1: np.ndarray
    image2: np.ndarray
    k: int
    gt_flow: FlowField
    gt_occlusion: OcclusionMask | None = None
    kind: str = "sequence"


def eval_pairs(sequence: RenderedSequence, k: int) -> list[EvalPair]:
    """Every (t, t+k) pair with ground truth; k > 1 flows are composed from consecutive fields."""
    if not 1 <= k < len(sequence):
        raise ValueError(f"k={k} outside [1, {len(sequence) - 1}]")
    pairs = []
    for t in range(len(sequence) - k):
        flow = sequence.flows[t]
        for step in range(1, k):
            flow = compose_flow(flow, sequence.flows[t + step])
        occ = sequence.occlusions[t] if k == 1 else None
        pairs.append(EvalPair(sequence.frames[t], sequence.frames[t + k], k, flow, occ))
    return pairs


# ── .flo files ───────────────────────────────────────────────────────────

def encode_flo(flow: FlowField) -> bytes:
    header = struct.pack("<fii", FLO_MAGIC, flow.width, flow.height)
    return header + np.ascontiguousarray(flow.to_hw2(), dtype="<f4").tobytes()


def decode_flo(data: bytes, path: str = "<bytes>") -> FlowField:
    if len(data) < 12:
        raise FormatError(f"truncated header ({len(data)} bytes)", path, len(data))
    magic, width, height = struct.unpack("<fii", data[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FLO_MAGIC}", path, 0)
    if width < 1 or height < 1:
        raise FormatError(f"invalid extent {width}x{height}", path, 4)
    need = 8 * width * height
    if len(data) - 12 < need:
        raise FormatError(f"truncated payload: need {need} bytes, got {len(data) - 12}", path, len(data))
    if len(data) - 12 > need:
        raise FormatError(f"{len(data) - 12 - need} trailing bytes", path, 12 + need)
    arr = np.frombuffer(data, dtype="<f4", count=2 * width * height, offset=12).reshape(height, width, 2)
    return FlowField.from_hw2(arr.astype(np.float32))


def write_flo(path: str, flow: FlowField) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_flo(flow))


def read_flo(path: str) -> FlowField:
    with open(path, "rb") as fh:
        return decode_flo(fh.read(), path)


# ── PPM / PNG images ─────────────────────────────────────────────────────

def to_uint8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {arr.shape}")
    h, w = arr.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def decode_ppm(data: bytes, path: str = "<bytes>") -> np.ndarray:
    """Binary P6, maxval <= 255; returns (H, W, 3) uint8 rescaled to the full 0..255 range."""
    if data[:2] != b"P6":
        kind = data[:2].decode("ascii", errors="replace")
        raise FormatError(f"unsupported image type {kind!r}, only binary P6 is read", path, 0)
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header", path, pos)
        tokens.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("malformed header: missing separator before pixel data", path, pos)
    pos += 1
    width, height, maxval = tokens
    if width < 1 or height < 1 or not 0 < maxval <= 255:
        raise FormatError(f"unsupported header {width}x{height} maxval {maxval}", path, pos)
    need = width * height * 3
    if len(data) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, got {len(data) - pos}", path, len(data))
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    if maxval == 255:
        return arr.copy()
    over = np.flatnonzero(arr.reshape(-1) > maxval)
    if over.size:
        raise FormatError(f"sample {int(arr.reshape(-1)[over[0]])} exceeds maxval {maxval}", path, pos + int(over[0]))
    return np.rint(arr * (255.0 / maxval)).astype(np.uint8)


def write_ppm(path: str, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), path)


def read_image(path: str) -> np.ndarray:
    """PPM or any Pillow-readable file -> (H, W, 3) float32 in [0, 1]."""
    if path.lower().endswith((".ppm", ".pnm")):
        arr = read_ppm(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float32) / 255.0


def write_png(path: str, img: np.ndarray) -> None:
    arr = to_uint8(img)
    Image.fromarray(arr if arr.ndim == 3 else arr, mode="RGB" if arr.ndim == 3 else "L").save(path)


# ── Dataset directories ──────────────────────────────────────────────────

def write_sequence(root: str, name: str, sequence: RenderedSequence) -> list[str]:
    """Write frames (PPM), flows (.flo) and occlusion masks (PNG) under root/name; returns frame files."""
    seq_dir = os.path.join(root, name)
    os.makedirs(seq_dir, exist_ok=True)
    frame_files = []
    for t, frame in enumerate(sequence.frames):
        fname = f"frame_{t:04d}.ppm"
        write_ppm(os.path.join(seq_dir, fname), frame)
        frame_files.append(fname)
    for t, (flow, occ) in enumerate(zip(sequence.flows, sequence.occlusions)):
        write_flo(os.path.join(seq_dir, f"flow_{t:04d}.flo"), flow)
        write_png(os.path.join(seq_dir, f"occ_{t:04d}.png"), occ.values)
    return frame_files


def write_dataset(root: str, sequences: Sequence[RenderedSequence]) -> str:
    """Write every sequence plus the manifest: one line per sequence directory, frame files in order."""
    os.makedirs(root, exist_ok=True)
    lines = []
    for i, seq in enumerate(sequences):
        name = f"seq_{i:04d}"
        files = write_sequence(root, name, seq)
        lines.append(" ".join([name] + files))
    manifest = os.path.join(root, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    logger.info("wrote %d sequences to %s", len(sequences), root)
    return manifest


def read_manifest(path: str) -> list[tuple[str, list[str]]]:
    root = os.path.dirname(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise FormatError(f"line {lineno}: sequence {parts[0]!r} lists no frames", path)
            entries.append((os.path.join(root, parts[0]), parts[1:]))
    return entries


def flow_files(root: str) -> list[str]:
    """All .flo files of a dataset written by write_dataset, in manifest order."""
    out = []
    for seq_dir, frames in read_manifest(os.path.join(root, MANIFEST_NAME)):
        out.extend(os.path.join(seq_dir, f"flow_{t:04d}.flo") for t in range(len(frames) - 1))
    return out
