import os

import numpy as np
import pandas as pd
import pytest

from ocflow import training
from ocflow.analysis import compare_strategies
from ocflow.config import preset, with_overrides
from ocflow.errors import NonFiniteLossError
from ocflow.evaluation import build_eval_split
from ocflow.model import load_checkpoint, weights_digest
from ocflow.tensor import Tensor
from ocflow.training import CHECKPOINT, CONFIG, EVAL_LOG, TRAIN_LOG, Trainer, train


@pytest.mark.parametrize("strategy", ["baseline", "oc", "tc", "octc"])
def test_logged_components_follow_strategy(strategy, tiny_run):
    cfg = tiny_run(strategy)
    result = train(cfg, write=False)
    log = result.train_log
    assert list(log.columns) == ["step", "total", *cfg.active_components(), "k", "transform", "grad_norm"]
    assert len(log) == 2
    assert np.isfinite(log["total"]).all()
    assert list(result.eval_log["step"]) == [0, 1, 2]


def test_tc_steps_record_transforms_and_gaps(tiny_run):
    result = train(tiny_run("tc", steps=6), write=False)
    log = result.train_log
    assert set(log["transform"]) <= {"hflip", "rot90cw", "rot180", "rot270cw"}
    assert (log["transform"] != "").all()
    assert set(log["k"].astype(str)) <= {"1", "2"}
    # unlabeled k=2 steps carry no supervised term
    for _, row in log.iterrows():
        assert pd.isna(row["base"]) == (str(row["k"]) == "2")


def test_zero_steps_writes_initial_evaluation(tiny_run):
    cfg = tiny_run("oc", steps=0)
    result = train(cfg)
    assert result.train_log.empty
    assert list(result.eval_log["step"]) == [0]
    for name in (CONFIG, TRAIN_LOG, EVAL_LOG, CHECKPOINT):
        assert os.path.exists(os.path.join(cfg.out_dir, name))


def test_run_directory_contents(tiny_run):
    cfg = tiny_run("octc")
    result = train(cfg)
    assert result.out_dir == cfg.out_dir
    model, header = load_checkpoint(result.files[CHECKPOINT])
    assert header.config_hash == cfg.config_hash()
    assert weights_digest(model) == weights_digest(result.model)
    on_disk = pd.read_csv(result.files[EVAL_LOG])
    assert {"epe", "fl", "occlusion_epe", "mask_accuracy", "epe_k1", "epe_k2"} <= set(on_disk.columns)
    with open(result.files[CONFIG], encoding="utf-8") as fh:
        assert fh.read() == cfg.to_text()


def test_training_is_deterministic(tiny_run):
    a = train(tiny_run("octc", steps=3), write=False)
    b = train(tiny_run("octc", steps=3), write=False)
    assert weights_digest(a.model) == weights_digest(b.model)
    pd.testing.assert_frame_equal(a.train_log, b.train_log)


def test_training_changes_weights(tiny_run):
    cfg = tiny_run("baseline")
    before = weights_digest(Trainer(cfg).model)
    assert weights_digest(train(cfg, write=False).model) != before


def test_gradient_norm_is_clipped(tiny_run):
    trainer = Trainer(tiny_run("baseline", grad_clip=1e-2, learning_rate=1.0))
    before = {k: v.copy() for k, v in trainer.model.state_dict().items()}
    trainer.step(0)
    moved = np.sqrt(sum(np.sum((trainer.model.params[k].data.astype(np.float64) - v) ** 2)
                        for k, v in before.items()))
    assert moved == pytest.approx(1e-2, rel=1e-3)


def test_non_finite_loss_stops_training(tiny_run, monkeypatch):
    monkeypatch.setattr(training, "sequence_loss", lambda *args, **kwargs: Tensor(np.nan))
    with pytest.raises(NonFiniteLossError) as err:
        train(tiny_run("baseline"), write=False)
    assert err.value.step == 0
    assert np.isnan(err.value.breakdown["base"])


def test_mask_match_only_run_leaves_zero_forcing_out(tiny_run):
    cfg = tiny_run("oc", **{"loss.zero_forcing_weight": 0.0})
    assert cfg.active_components() == ("base", "mask_match")
    log = train(cfg, write=False).train_log
    assert "zero_forcing" not in log.columns
    assert np.isfinite(log["mask_match"]).all()


# ── Long reproductions ───────────────────────────────────────────────────

def _zero_forcing_config(tmp_path, seed, bce=True):
    return with_overrides(preset("oc"), {
        "supervised": "false",
        "steps": 1000,
        "eval_every": 1000,
        "learning_rate": 1e-2,
        "model.feature_channels": 16,
        "model.hidden_channels": 16,
        "model.radius": 2,
        "loss.mask_match_bce": bce,
        "cowmask.sigma_min": 2.0,
        "cowmask.sigma_max": 6.0,
        "eval_sequences": 8,
        "seed": seed,
        "model.seed": seed,
        "out_dir": str(tmp_path / f"oc_{seed}"),
    })


@pytest.mark.slow
def test_zero_forcing_and_mask_match_training(tmp_path):
    accuracies = []
    for seed in (0, 1, 2):
        log = train(_zero_forcing_config(tmp_path, seed), write=False).eval_log
        assert log["occlusion_epe"].iloc[-1] < 0.1
        assert log["occlusion_epe"].iloc[-1] < log["occlusion_epe"].iloc[0]
        accuracies.append(log["mask_accuracy"].iloc[-1])
    assert np.mean(accuracies) >= 0.85


@pytest.mark.slow
def test_plain_mask_match_marks_visible_pixels(tmp_path):
    cfg = _zero_forcing_config(tmp_path, 0, bce=False)
    result = train(cfg, write=False)
    assert result.eval_log["occlusion_epe"].iloc[-1] < 0.1
    hits = total = 0
    for pair in build_eval_split(cfg).occlusion_pairs:
        _, predicted = result.model.predict(pair.image1, pair.image2)
        visible = pair.gt_occlusion.values == 1
        hits += int((predicted.threshold(0.5).values[visible] == 1).sum())
        total += int(visible.sum())
    assert hits / total >= 0.85


@pytest.mark.slow
def test_strategy_ordering(tmp_path):
    base = with_overrides(preset("baseline"), {
        "steps": 300,
        "eval_every": 300,
        "learning_rate": 5e-3,
        "scene.width": 64,
        "scene.height": 64,
        "scene.min_size": 10,
        "scene.max_size": 24,
        "model.feature_channels": 16,
        "model.hidden_channels": 16,
        "eval_sequences": 20,
        "out_dir": str(tmp_path / "compare"),
    })
    comparison = compare_strategies(base, seeds=(0, 1, 2), out_dir=str(tmp_path / "compare"))
    epe = {s: comparison.mean_epe(s) for s in ("baseline", "oc", "tc", "octc")}
    assert epe["octc"] <= 0.97 * epe["baseline"], epe
    assert epe["octc"] <= min(epe["oc"], epe["tc"]) * 1.02, epe
    assert min(epe["oc"], epe["tc"]) <= epe["baseline"], epe
    assert os.path.exists(tmp_path / "compare" / "compare.csv")
