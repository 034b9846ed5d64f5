import numpy as np
import pytest

from ocflow.flow import (
    FlowField,
    GeoTransform,
    IdentifierMask,
    OcclusionMask,
    TransformKind,
    epe,
    fl_outlier_rate,
    restore_flow,
    sample_transform,
    transform_flow,
    transform_image,
)
from ocflow.tensor import Tensor

ALL_KINDS = list(TransformKind)


def _random_flow(rng, w=8, h=6):
    return FlowField(rng.normal(scale=5.0, size=(2, h, w)).astype(np.float32))


# ── Value types ──────────────────────────────────────────────────────────

def test_flow_field_validates_shape_and_finiteness():
    with pytest.raises(ValueError, match=r"\(2, H, W\)"):
        FlowField(np.zeros((3, 2, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        FlowField(np.full((2, 2, 2), np.nan))


def test_flow_field_hw2_layout():
    f = FlowField.constant(3, 2, 1.5, -2.0)
    hw2 = f.to_hw2()
    assert hw2.shape == (2, 3, 2)
    np.testing.assert_array_equal(hw2[..., 0], 1.5)
    assert FlowField.from_hw2(hw2).equals(f)


def test_masks_validate_their_domain():
    with pytest.raises(ValueError, match="binary"):
        OcclusionMask(np.full((2, 2), 0.5))
    with pytest.raises(ValueError, match="strictly inside"):
        OcclusionMask(np.ones((2, 2)), predicted=True)
    soft = OcclusionMask(np.array([[0.2, 0.7]]), predicted=True)
    np.testing.assert_array_equal(soft.threshold().values, [[0.0, 1.0]])
    assert IdentifierMask(np.array([[True, False]])).coverage() == 0.5


# ── Transforms ───────────────────────────────────────────────────────────

def test_transform_image_examples():
    row = np.array([[1, 2]])
    np.testing.assert_array_equal(transform_image(row, GeoTransform("hflip", 2, 1)), [[2, 1]])
    a, b, c, d = 1, 2, 3, 4
    img = np.array([[a, b], [c, d]])
    np.testing.assert_array_equal(transform_image(img, GeoTransform("rot90cw", 2, 2)), [[c, a], [d, b]])
    np.testing.assert_array_equal(transform_image(img, GeoTransform("identity", 2, 2)), img)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_transform_image_follows_pixel_map(kind, rng):
    img = rng.integers(0, 255, size=(5, 7, 3))
    t = GeoTransform(kind, 7, 5)
    out = transform_image(img, t)
    w2, h2 = t.output_extent
    assert out.shape == (h2, w2, 3)
    for y in range(5):
        for x in range(7):
            x2, y2 = t.pixel_map(x, y)
            np.testing.assert_array_equal(out[y2, x2], img[y, x])


def test_hflip_flow_example():
    f = FlowField.from_hw2(np.array([[[1.0, 0.0], [-2.0, 3.0]]]))
    g = transform_flow(f, GeoTransform("hflip", 2, 1))
    np.testing.assert_array_equal(g.to_hw2(), [[[2.0, 3.0], [-1.0, 0.0]]])


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_commutation_with_jacobian(kind, rng):
    f = _random_flow(rng, 8, 8)
    t = GeoTransform(kind, 8, 8)
    g = transform_flow(f, t)
    jac = t.jacobian.astype(np.float64)
    assert np.all(np.abs(jac) <= 1) and np.allclose(jac @ jac.T, np.eye(2))
    for y in range(8):
        for x in range(8):
            x2, y2 = t.pixel_map(x, y)
            np.testing.assert_array_equal(g.uv[:, y2, x2], (jac @ f.uv[:, y, x].astype(np.float64)).astype(np.float32))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_restore_is_bitwise_identity(kind, rng):
    for _ in range(100):
        f = _random_flow(rng, 5, 3)
        t = GeoTransform(kind, 5, 3)
        assert restore_flow(transform_flow(f, t), t).equals(f)


def test_restore_keeps_negative_zero():
    uv = np.array([[[-0.0, 1.0]], [[0.0, -0.0]]], dtype=np.float32)
    f = FlowField(uv)
    for kind in ALL_KINDS:
        t = GeoTransform(kind, 2, 1)
        assert restore_flow(transform_flow(f, t), t).equals(f)


def test_rot180_is_an_involution(rng):
    f = _random_flow(rng)
    t = GeoTransform("rot180", f.width, f.height)
    assert transform_flow(transform_flow(f, t), t).equals(f)


def test_rot90_restore_equals_rot270(rng):
    f = _random_flow(rng, 4, 4)
    t = GeoTransform("rot90cw", 4, 4)
    assert restore_flow(f, t).equals(transform_flow(f, GeoTransform("rot270cw", 4, 4)))


def test_translation_pair_commutes_with_transform(rng):
    """The exact flow of a transformed translated pair is the transformed flow."""
    w, h = 8, 6
    base = rng.random((h + 4, w + 4))
    du, dv = 2, 1
    i1 = base[2:2 + h, 2:2 + w]
    # i2(p + (du, dv)) = i1(p)
    i2 = base[2 - dv:2 - dv + h, 2 - du:2 - du + w]
    f = FlowField.constant(w, h, du, dv)
    for kind in ALL_KINDS:
        t = GeoTransform(kind, w, h)
        g = transform_flow(f, t)
        ti1, ti2 = transform_image(i1, t), transform_image(i2, t)
        w2, h2 = t.output_extent
        checked = 0
        for y in range(h2):
            for x in range(w2):
                x2, y2 = x + int(g.uv[0, y, x]), y + int(g.uv[1, y, x])
                if 0 <= x2 < w2 and 0 <= y2 < h2:
                    assert ti2[y2, x2] == ti1[y, x]
                    checked += 1
        assert checked > 0


def test_transform_flow_on_tensors_is_differentiable(rng):
    t = GeoTransform("rot90cw", 4, 3)
    x = Tensor(rng.normal(size=(1, 2, 3, 4)), requires_grad=True)
    out = transform_flow(x, t)
    assert out.shape == (1, 2, 4, 3)
    out.sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], 1.0)
    np.testing.assert_array_equal(x.grad[0, 1], -1.0)


def test_transform_extent_mismatch_raises():
    with pytest.raises(ValueError, match="applied to"):
        transform_flow(FlowField.zeros(4, 4), GeoTransform("hflip", 5, 4))


def test_sample_transform_expands_rot(rng):
    kinds = {sample_transform(["rot"], 4, 4, rng).kind for _ in range(200)}
    assert kinds == {TransformKind.ROT90CW, TransformKind.ROT180, TransformKind.ROT270CW}
    assert sample_transform(["hflip"], 4, 4, rng).kind is TransformKind.HFLIP
    with pytest.raises(ValueError):
        sample_transform([], 4, 4, rng)


# ── Metrics ──────────────────────────────────────────────────────────────

def test_epe_examples(rng):
    gt = FlowField.zeros(4, 3)
    assert epe(gt, gt) == 0.0
    assert epe(FlowField.constant(4, 3, 3.0, 4.0), gt) == pytest.approx(5.0)
    pred, ref = _random_flow(rng), _random_flow(rng)
    loop = np.mean([np.hypot(*(pred.uv[:, y, x].astype(np.float64) - ref.uv[:, y, x]))
                    for y in range(ref.height) for x in range(ref.width)])
    assert epe(pred, ref) == pytest.approx(loop, rel=1e-12)


def test_epe_respects_valid_mask():
    gt = FlowField.zeros(2, 1)
    pred = FlowField.from_hw2(np.array([[[3.0, 4.0], [30.0, 40.0]]]))
    assert epe(pred, gt, OcclusionMask(np.array([[1.0, 0.0]]))) == pytest.approx(5.0)
    with pytest.raises(ValueError, match="empty"):
        epe(pred, gt, OcclusionMask(np.zeros((1, 2))))


def test_fl_outlier_examples():
    gt = FlowField.constant(2, 2, 100.0, 0.0)
    assert fl_outlier_rate(gt, gt) == 0.0
    assert fl_outlier_rate(FlowField.constant(2, 2, 96.0, 0.0), gt) == 0.0
    assert fl_outlier_rate(FlowField.constant(2, 2, 4.0, 0.0), FlowField.zeros(2, 2)) == 1.0


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_metrics_invariant_under_joint_transform(kind, rng):
    pred, gt = _random_flow(rng), _random_flow(rng)
    t = GeoTransform(kind, gt.width, gt.height)
    assert epe(transform_flow(pred, t), transform_flow(gt, t)) == pytest.approx(epe(pred, gt), rel=1e-12)
    assert fl_outlier_rate(transform_flow(pred, t), transform_flow(gt, t)) == fl_outlier_rate(pred, gt)
