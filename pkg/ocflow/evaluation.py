"""
Held-out evaluation: EPE and Fl outlier rate overall and per frame gap k, occlusion-mask
accuracy where ground-truth masks exist, and endpoint error on zero-motion occlusion pairs.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from ocflow.config import RunConfig
from ocflow.data import EvalPair, RenderedSequence, eval_pairs, make_occlusion_pair, make_split
from ocflow.errors import ConfigMismatchError
from ocflow.flow import FlowField, OcclusionMask, endpoint_errors
from ocflow.model import FlowModel, load_checkpoint

logger = logging.getLogger(__name__)

K_STRATA = (1, 2)
EVAL_SEED_OFFSET = 10_000
REPORT_COLUMNS = ["subset", "k", "pairs", "epe", "fl", "mask_accuracy"]

Predictor = Callable[[EvalPair], "tuple[FlowField, OcclusionMask | None]"]


@dataclass
class EvalSplit:
    sequences: list[RenderedSequence]
    occlusion_pairs: list[EvalPair]


def build_eval_split(cfg: RunConfig) -> EvalSplit:
    """Held-out scenes and cow-mask pairs; a pure function of the config's seeds."""
    sequences = make_split(cfg.scene, cfg.eval_sequences, seed=cfg.seed + EVAL_SEED_OFFSET)
    rng = np.random.default_rng(cfg.cowmask.seed + EVAL_SEED_OFFSET)
    occ = []
    for seq in sequences:
        sample = make_occlusion_pair(seq.frames[0], cfg.cowmask, rng)
        occ.append(EvalPair(sample.image1, sample.image2, 1, sample.gt_flow, sample.gt_occlusion, kind="occlusion"))
    return EvalSplit(sequences, occ)


def model_predictor(model: FlowModel) -> Predictor:
    return lambda pair: model.predict(pair.image1, pair.image2)


@dataclass
class _Tally:
    pairs: int = 0
    err_sum: float = 0.0
    outliers: int = 0
    pixels: int = 0
    mask_hits: int = 0
    mask_pixels: int = 0

    def add(self, pred: FlowField, pred_mask: OcclusionMask | None, pair: EvalPair) -> None:
        err = endpoint_errors(pred, pair.gt_flow)
        mag = pair.gt_flow.magnitude().astype(np.float64)
        self.pairs += 1
        self.err_sum += float(err.sum())
        self.outliers += int(((err > 3.0) & (err > 0.05 * mag)).sum())
        self.pixels += err.size
        if pred_mask is not None and pair.gt_occlusion is not None:
            hits = pred_mask.threshold(0.5).values == pair.gt_occlusion.values
            self.mask_hits += int(hits.sum())
            self.mask_pixels += hits.size

    def row(self, subset: str, k: str) -> dict:
        return {
            "subset": subset,
            "k": k,
            "pairs": self.pairs,
            "epe": self.err_sum / self.pixels if self.pixels else np.nan,
            "fl": self.outliers / self.pixels if self.pixels else np.nan,
            "mask_accuracy": self.mask_hits / self.mask_pixels if self.mask_pixels else np.nan,
        }


@dataclass
class EvalReport:
    table: pd.DataFrame
    parameter_count: int | None = None
    inference_ms: float | None = None

    def metric(self, name: str, subset: str = "sequence", k: str = "all") -> float:
        hit = self.table[(self.table["subset"] == subset) & (self.table["k"] == str(k))]
        if hit.empty:
            raise KeyError(f"no report row for subset={subset!r} k={k!r}")
        return float(hit[name].iloc[0])

    def write(self, out_dir: str) -> str:
        """report.csv holds only deterministic metrics; model size and timing go to model_stats.csv."""
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "report.csv")
        self.table.to_csv(path, index=False, float_format="%.6f")
        if self.parameter_count is not None:
            stats = pd.DataFrame([{"parameter_count": self.parameter_count, "inference_ms": self.inference_ms}])
            stats.to_csv(os.path.join(out_dir, "model_stats.csv"), index=False)
        return path


def evaluate_predictor(predictor: Predictor, split: EvalSplit, ks: Sequence[int] = K_STRATA) -> EvalReport:
    overall = _Tally()
    rows = []
    for k in ks:
        tally = _Tally()
        for seq in split.sequences:
            if k >= len(seq):
                continue
            for pair in eval_pairs(seq, k):
                flow, mask = predictor(pair)
                tally.add(flow, mask, pair)
                overall.add(flow, mask, pair)
        if tally.pairs:
            rows.append(tally.row("sequence", str(k)))
    rows.append(overall.row("sequence", "all"))
    if split.occlusion_pairs:
        occ = _Tally()
        for pair in split.occlusion_pairs:
            flow, mask = predictor(pair)
            occ.add(flow, mask, pair)
        rows.append(occ.row("occlusion", "1"))
    return EvalReport(pd.DataFrame(rows, columns=REPORT_COLUMNS))


def evaluate_model(model: FlowModel, split: EvalSplit, ks: Sequence[int] = K_STRATA) -> EvalReport:
    predict = model_predictor(model)
    calls = [0, 0.0]

    def timed(pair: EvalPair):
        start = time.perf_counter()
        out = predict(pair)
        calls[0] += 1
        calls[1] += time.perf_counter() - start
        return out

    report = evaluate_predictor(timed, split, ks)
    report.parameter_count = model.parameter_count()
    report.inference_ms = 1000.0 * calls[1] / max(calls[0], 1)
    return report


def evaluate(checkpoint: str, cfg: RunConfig, split: EvalSplit | None = None, out_dir: str | None = None) -> EvalReport:
    """Load a checkpoint, refuse it if it was trained under another config, and evaluate it."""
    model, header = load_checkpoint(checkpoint)
    expected = cfg.config_hash()
    if header.config_hash != expected:
        raise ConfigMismatchError(
            f"{checkpoint} was trained under config {header.config_hash[:12]}, got {expected[:12]}"
        )
    split = build_eval_split(cfg) if split is None else split
    report = evaluate_model(model, split)
    logger.info(
        "evaluated %s: EPE %.4f, Fl %.4f over %d pairs",
        checkpoint, report.metric("epe"), report.metric("fl"), int(report.metric("pairs")),
    )
    if out_dir is not None:
        report.write(out_dir)
    return report
