"""
Run configuration: strategy presets, the line-oriented key=value file format with dotted
keys for nested sections, and the SHA-256 config hash embedded in checkpoints.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

from ocflow.cowmask import CowmaskParams
from ocflow.data import SceneParams
from ocflow.flow import QUARTER_TURNS
from ocflow.losses import LossConfig
from ocflow.model import ModelConfig

STRATEGIES = ("baseline", "oc", "tc", "octc")
TRANSFORM_CHOICES = ("hflip", "vflip", "rot") + tuple(k.value for k in QUARTER_TURNS)

# Not part of the hash: where a run is written does not change what it computes.
_UNHASHED = ("out_dir",)
_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "cowmask": CowmaskParams, "scene": SceneParams}
# The loss iteration count always follows the model's.
_DERIVED = {"loss.iterations"}


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "baseline"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    cowmask: CowmaskParams = field(default_factory=CowmaskParams)
    scene: SceneParams = field(default_factory=SceneParams)
    k_set: tuple[int, ...] = (1,)
    transforms: tuple[str, ...] = ("hflip", "rot")
    steps: int = 200
    learning_rate: float = 1e-3
    grad_clip: float = 1.0
    batch_size: int = 1
    supervised: bool = True
    train_sequences: int = 16
    eval_sequences: int = 4
    eval_every: int = 50
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.loss.iterations != self.model.iterations:
            raise ValueError(
                f"loss iterations {self.loss.iterations} != model iterations {self.model.iterations}"
            )
        if not self.k_set or min(self.k_set) < 1:
            raise ValueError(f"k_set must be a nonempty set of gaps >= 1, got {self.k_set}")
        if max(self.k_set) >= self.scene.frames:
            raise ValueError(f"k_set {self.k_set} needs more than {self.scene.frames} frames per scene")
        bad = [t for t in self.transforms if t not in TRANSFORM_CHOICES]
        if bad or not self.transforms:
            raise ValueError(f"transforms must be drawn from {TRANSFORM_CHOICES}, got {self.transforms}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError(
                f"need steps >= 0, batch_size >= 1, eval_every >= 1; got "
                f"{self.steps}, {self.batch_size}, {self.eval_every}"
            )
        if not self.learning_rate > 0 or not self.grad_clip > 0:
            raise ValueError(f"learning_rate and grad_clip must be > 0, got {self.learning_rate}, {self.grad_clip}")
        if self.train_sequences < 1 or self.eval_sequences < 1:
            raise ValueError(
                f"need at least one training and one evaluation sequence, got "
                f"{self.train_sequences}, {self.eval_sequences}"
            )
        if not self.supervised and not self.uses_occlusion and not self.uses_transformation:
            raise ValueError(f"strategy {self.strategy!r} without supervision has no loss to train on")

    @property
    def uses_occlusion(self) -> bool:
        return self.strategy in ("oc", "octc")

    @property
    def uses_transformation(self) -> bool:
        return self.strategy in ("tc", "octc")

    def active_components(self) -> tuple[str, ...]:
        """Loss components a step of this run computes, in logging order."""
        active = []
        if self.supervised:
            active.append("base")
        if self.uses_occlusion:
            if self.loss.zero_forcing_weight > 0:
                active.append("zero_forcing")
            active.append("mask_match")
        if self.uses_transformation:
            active.append("transformation")
        return tuple(active)

    def to_text(self, include_unhashed: bool = True) -> str:
        items = flatten(self)
        if not include_unhashed:
            items = {k: v for k, v in items.items() if k not in _UNHASHED}
        return "".join(f"{k}={v}\n" for k, v in sorted(items.items()))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text(include_unhashed=False).encode("utf-8")).hexdigest()


def preset(strategy: str, **overrides: Any) -> RunConfig:
    """Baseline trains on labeled pairs only; TC presets add the frame gap k=2 to k_set."""
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    k_set = (1, 2) if strategy in ("tc", "octc") else (1,)
    cfg = RunConfig(strategy=strategy, k_set=k_set)
    return with_overrides(cfg, overrides) if overrides else cfg


# ── key=value serialization ──────────────────────────────────────────────

def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    return str(value)


def _parse(raw: str, like: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            elem = like[0] if like else ""
            return tuple(_parse(p, elem, key) for p in parts)
        return raw
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def flatten(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                key = f"{f.name}.{sub.name}"
                if key not in _DERIVED:
                    out[key] = _format(getattr(value, sub.name))
        else:
            out[f.name] = _format(value)
    return out


def with_overrides(cfg: RunConfig, values: Mapping[str, Any]) -> RunConfig:
    """Apply dotted-key overrides (strings are parsed, other values used as given); unknown keys are rejected."""
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    known = flatten(cfg)
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        section, _, name = key.partition(".")
        current = getattr(getattr(cfg, section), name) if name else getattr(cfg, section)
        parsed = _parse(value, current, key) if isinstance(value, str) else value
        if name:
            nested[section][name] = parsed
        else:
            top[key] = parsed
    if "strategy" in top:
        top["strategy"] = str(top["strategy"]).lower()
    model = replace(cfg.model, **nested["model"])
    nested["loss"]["iterations"] = model.iterations
    return replace(
        cfg,
        model=model,
        loss=replace(cfg.loss, **nested["loss"]),
        cowmask=replace(cfg.cowmask, **nested["cowmask"]),
        scene=replace(cfg.scene, **nested["scene"]),
        **top,
    )


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def from_text(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    values = parse_lines(text, source)
    if base is None:
        base = preset(values.get("strategy", "baseline"))
    return with_overrides(base, values)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return from_text(fh.read(), base, path)


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())

