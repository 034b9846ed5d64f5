import math

import pytest

from ocflow.config import (
    STRATEGIES,
    RunConfig,
    flatten,
    from_text,
    load_config,
    parse_lines,
    preset,
    save_config,
    with_overrides,
)


@pytest.mark.parametrize(
    "strategy, components, k_set",
    [
        ("baseline", ("base",), (1,)),
        ("oc", ("base", "zero_forcing", "mask_match"), (1,)),
        ("tc", ("base", "transformation"), (1, 2)),
        ("octc", ("base", "zero_forcing", "mask_match", "transformation"), (1, 2)),
    ],
)
def test_presets(strategy, components, k_set):
    cfg = preset(strategy)
    assert cfg.active_components() == components
    assert cfg.k_set == k_set


def test_default_hyperparameters():
    cfg = preset("octc")
    assert (cfg.loss.lambda1, cfg.loss.lambda2, cfg.loss.epsilon, cfg.loss.gamma) == (0.1, 0.01, 25.0, 0.8)
    assert cfg.loss.iterations == cfg.model.iterations


def test_unknown_strategy():
    with pytest.raises(ValueError, match="unknown strategy"):
        preset("raft")
    assert preset("OCTC").strategy == "octc"


def test_validation_errors():
    with pytest.raises(ValueError, match="k_set"):
        preset("tc", k_set="1,4")
    with pytest.raises(ValueError, match="transforms"):
        preset("tc", transforms="shear")
    with pytest.raises(ValueError, match="no loss"):
        preset("baseline", supervised="false")
    assert preset("octc", supervised="false").active_components() == ("zero_forcing", "mask_match", "transformation")


def test_occlusion_ablation_rows():
    mask_only = with_overrides(preset("oc"), {"loss.zero_forcing_weight": "0"})
    assert mask_only.active_components() == ("base", "mask_match")
    assert with_overrides(preset("octc"), {"loss.zero_forcing_weight": "0"}).active_components() \
        == ("base", "mask_match", "transformation")
    zero_only = with_overrides(preset("oc"), {"loss.lambda1": "0"})
    assert zero_only.active_components() == ("base", "zero_forcing", "mask_match")
    assert with_overrides(preset("oc"), {"loss.zero_star": "true"}).loss.zero_star
    assert mask_only.config_hash() != preset("oc").config_hash()


def test_overrides_parse_strings():
    cfg = with_overrides(preset("tc"), {
        "model.iterations": "6",
        "loss.epsilon": "inf",
        "k_set": "1,2,3",
        "scene.frames": "5",
        "scene.velocity_bias": "0,1.5",
        "learning_rate": "0.005",
    })
    assert cfg.model.iterations == cfg.loss.iterations == 6
    assert math.isinf(cfg.loss.epsilon)
    assert cfg.k_set == (1, 2, 3)
    assert cfg.scene.velocity_bias == (0.0, 1.5)
    assert cfg.learning_rate == 0.005


def test_overrides_reject_bad_keys_and_values():
    with pytest.raises(ValueError, match="unknown config key"):
        with_overrides(preset("oc"), {"loss.lambda3": "1"})
    with pytest.raises(ValueError, match="unknown config key"):
        with_overrides(preset("oc"), {"loss.iterations": "3"})
    with pytest.raises(ValueError, match="cannot parse"):
        with_overrides(preset("oc"), {"steps": "many"})
    with pytest.raises(ValueError, match="cannot parse"):
        with_overrides(preset("oc"), {"supervised": "yes"})


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_text_round_trip(strategy, tmp_path):
    cfg = preset(strategy, **{"loss.epsilon": math.inf, "seed": 7, "out_dir": str(tmp_path / "x")})
    assert from_text(cfg.to_text()) == cfg
    path = str(tmp_path / "config.txt")
    save_config(path, cfg)
    assert load_config(path) == cfg


def test_text_format():
    text = preset("octc").to_text()
    lines = text.splitlines()
    assert lines == sorted(lines)
    assert "k_set=1,2" in lines
    assert "supervised=true" in lines
    assert "loss.lambda1=0.1" in lines
    assert not any(line.startswith("loss.iterations=") for line in lines)
    assert "loss.iterations" not in flatten(preset("octc"))


def test_hash_ignores_output_directory():
    a = preset("oc", out_dir="runs/a")
    b = preset("oc", out_dir="runs/b")
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 64
    assert preset("oc", seed=1).config_hash() != a.config_hash()
    assert preset("tc").config_hash() != a.config_hash()


def test_parse_lines():
    values = parse_lines("# comment\nstrategy = oc  # trailing\n\nsteps=3\n")
    assert values == {"strategy": "oc", "steps": "3"}
    with pytest.raises(ValueError, match="duplicate key"):
        parse_lines("steps=1\nsteps=2\n")
    with pytest.raises(ValueError, match="key=value"):
        parse_lines("steps\n")


def test_file_values_start_from_the_named_preset():
    cfg = from_text("strategy=tc\nsteps=5\n")
    assert cfg.k_set == (1, 2)
    assert cfg.steps == 5
    assert isinstance(cfg, RunConfig)
