"""
Training loop: per step, draw a batch of frame-hop samples, compute the strategy's loss
components, and take a clipped gradient-descent step. Writes the per-step and periodic
evaluation logs, the canonical config and the final checkpoint.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ocflow.config import RunConfig, save_config
from ocflow.data import TrainSample, frame_hop_sampler, make_occlusion_pair, make_split
from ocflow.errors import NonFiniteLossError
from ocflow.evaluation import EvalSplit, build_eval_split, evaluate_model
from ocflow.flow import sample_transform, transform_image
from ocflow.losses import (
    COMPONENTS,
    LossComponents,
    mask_match_loss,
    sequence_loss,
    total_loss,
    transformation_consistency_loss,
    zero_forcing_loss,
)
from ocflow.model import FlowModel, save_checkpoint
from ocflow.tensor import Tensor

logger = logging.getLogger(__name__)

TRAIN_LOG = "train_log.csv"
EVAL_LOG = "eval_log.csv"
CHECKPOINT = "checkpoint.bin"
CONFIG = "config.txt"


@dataclass
class TrainResult:
    model: FlowModel
    config: RunConfig
    train_log: pd.DataFrame
    eval_log: pd.DataFrame
    out_dir: str | None = None
    files: dict[str, str] = field(default_factory=dict)


def _mean(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


class Trainer:
    """Owns the model, the sample streams and the optimizer state of one run."""

    def __init__(self, cfg: RunConfig, eval_split: EvalSplit | None = None):
        self.cfg = cfg
        self.model = FlowModel(cfg.model)
        self.train_split = make_split(cfg.scene, cfg.train_sequences, seed=cfg.seed)
        self.eval_split = build_eval_split(cfg) if eval_split is None else eval_split
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.mask_rng = np.random.default_rng(cfg.cowmask.seed + cfg.seed)
        hop_ks = cfg.k_set if cfg.uses_transformation else (1,)
        self.samples = frame_hop_sampler(self.train_split, hop_ks, self.rng)
        self.columns = list(cfg.active_components())

    # loss

    def sample_components(self, sample: TrainSample) -> tuple[dict[str, Tensor], str]:
        cfg, model = self.cfg, self.model
        out: dict[str, Tensor] = {}
        kind = ""
        forward = None
        if cfg.supervised and sample.labeled:
            forward = model(sample.image1, sample.image2)
            out["base"] = sequence_loss(forward.flows, sample.gt_flow, None, cfg.loss)
        if cfg.uses_transformation:
            forward = forward or model(sample.image1, sample.image2)
            h, w = sample.image1.shape[:2]
            t = sample_transform(cfg.transforms, w, h, self.rng)
            moved = model(transform_image(sample.image1, t), transform_image(sample.image2, t))
            out["transformation"], _ = transformation_consistency_loss(forward.flows, moved.flows, t, cfg.loss)
            kind = t.kind.value
        if cfg.uses_occlusion:
            pair = make_occlusion_pair(sample.image1, cfg.cowmask, self.mask_rng, identical=cfg.loss.zero_star)
            zero = model(pair.image1, pair.image2)
            if "zero_forcing" in self.columns:
                out["zero_forcing"] = zero_forcing_loss(zero.flows, cfg.loss)
            out["mask_match"] = mask_match_loss(zero.occlusion_probs(), pair.gt_occlusion, cfg.loss)
        return out, kind

    def batch_loss(self) -> tuple[LossComponents, dict]:
        terms: dict[str, list[Tensor]] = {name: [] for name in COMPONENTS}
        kinds, ks = [], []
        for _ in range(self.cfg.batch_size):
            sample = next(self.samples)
            parts, kind = self.sample_components(sample)
            for name, value in parts.items():
                terms[name].append(value)
            if kind:
                kinds.append(kind)
            ks.append(str(sample.k))
        components = LossComponents(**{name: _mean(values) for name, values in terms.items()})
        return components, {"k": ",".join(ks), "transform": ",".join(kinds)}

    # optimizer

    def apply_gradients(self) -> float:
        """Plain gradient descent with the global gradient norm clipped to cfg.grad_clip."""
        grads = [(p, p.grad) for p in self.model.parameters() if p.grad is not None]
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for _, g in grads))
        scale = self.cfg.learning_rate * min(1.0, self.cfg.grad_clip / (norm + 1e-12))
        for p, g in grads:
            p.data = (p.data - scale * g).astype(np.float32)
        return norm

    def step(self, index: int) -> dict:
        components, extra = self.batch_loss()
        loss = total_loss(components, self.cfg.loss)
        breakdown = components.breakdown()
        if not math.isfinite(loss.item()):
            raise NonFiniteLossError(index, breakdown)
        self.model.zero_grad()
        grad_norm = 0.0
        if loss.requires_grad:
            loss.backward()
            grad_norm = self.apply_gradients()
        record = {"step": index, "total": loss.item()}
        record.update({name: breakdown.get(name, np.nan) for name in self.columns})
        record.update(extra)
        record["grad_norm"] = grad_norm
        logger.debug("step %d: %s", index, breakdown)
        return record

    def evaluate(self, index: int) -> dict:
        report = evaluate_model(self.model, self.eval_split)
        row = {
            "step": index,
            "epe": report.metric("epe"),
            "fl": report.metric("fl"),
            "occlusion_epe": report.metric("epe", subset="occlusion", k="1"),
            "mask_accuracy": report.metric("mask_accuracy", subset="occlusion", k="1"),
        }
        for k in self.cfg.k_set:
            try:
                row[f"epe_k{k}"] = report.metric("epe", k=str(k))
            except KeyError:
                row[f"epe_k{k}"] = np.nan
        logger.info("step %d: eval EPE %.4f, Fl %.4f, occlusion EPE %.4f", index, row["epe"], row["fl"], row["occlusion_epe"])
        return row


def train(cfg: RunConfig, write: bool = True, eval_split: EvalSplit | None = None) -> TrainResult:
    """Run cfg.steps optimizer steps; evaluates at step 0, every cfg.eval_every steps and at the end."""
    trainer = Trainer(cfg, eval_split)
    logger.info(
        "training strategy=%s steps=%d components=%s seed=%d",
        cfg.strategy, cfg.steps, ",".join(trainer.columns), cfg.seed,
    )
    records, evals = [], [trainer.evaluate(0)]
    for index in range(cfg.steps):
        records.append(trainer.step(index))
        done = index + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            evals.append(trainer.evaluate(done))
    columns = ["step", "total"] + trainer.columns + ["k", "transform", "grad_norm"]
    result = TrainResult(
        model=trainer.model,
        config=cfg,
        train_log=pd.DataFrame(records, columns=columns),
        eval_log=pd.DataFrame(evals),
    )
    if write:
        _write_run(result, cfg.out_dir)
    logger.info("finished %d steps, final eval EPE %.4f", cfg.steps, result.eval_log["epe"].iloc[-1])
    return result


def _write_run(result: TrainResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    files = {name: os.path.join(out_dir, name) for name in (CONFIG, TRAIN_LOG, EVAL_LOG, CHECKPOINT)}
    save_config(files[CONFIG], result.config)
    result.train_log.to_csv(files[TRAIN_LOG], index=False)
    result.eval_log.to_csv(files[EVAL_LOG], index=False)
    save_checkpoint(files[CHECKPOINT], result.model, result.config.config_hash())
    result.out_dir = out_dir
    result.files = files
