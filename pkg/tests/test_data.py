import struct

import numpy as np
import pytest

from ocflow.cowmask import CowmaskParams
from ocflow.data import (
    MANIFEST_NAME,
    SceneParams,
    Sprite,
    SyntheticScene,
    TrainSample,
    compose_flow,
    decode_flo,
    decode_ppm,
    draw_pair,
    encode_flo,
    encode_ppm,
    eval_pairs,
    flow_files,
    frame_hop_sampler,
    make_occlusion_pair,
    make_split,
    random_scene,
    read_flo,
    read_image,
    read_manifest,
    render_scene,
    warp_backward,
    write_dataset,
    write_flo,
)
from ocflow.errors import FormatError
from ocflow.flow import FlowField


def _background_scene(rng, velocity=(0.0, 0.0), sprites=(), size=16, frames=4):
    return SyntheticScene(
        background=rng.random((size, size, 3)).astype(np.float32),
        background_velocity=velocity,
        sprites=tuple(sprites),
        frames=frames,
        width=size,
        height=size,
    )


def _square_sprite(rng, velocity=(2.0, 0.0)):
    return Sprite(np.ones((4, 4), dtype=bool), rng.random((4, 4, 3)).astype(np.float32), (4.0, 4.0), velocity)


# ── Scenes ───────────────────────────────────────────────────────────────

def test_scene_validation(rng):
    with pytest.raises(ValueError, match="3 frames"):
        _background_scene(rng, frames=2)
    with pytest.raises(ValueError, match="frames"):
        SceneParams(frames=2)
    with pytest.raises(ValueError, match="size"):
        SceneParams(min_size=8, max_size=4)


def test_static_scene_has_zero_flow_and_full_visibility(rng):
    seq = render_scene(_background_scene(rng))
    assert len(seq) == 4 and len(seq.flows) == 3
    for flow, occ in zip(seq.flows, seq.occlusions):
        assert flow.equals(FlowField.zeros(16, 16))
        assert occ.occluded_fraction() == 0.0
    np.testing.assert_array_equal(seq.frames[0], seq.frames[3])


def test_moving_sprite_flow(rng):
    seq = render_scene(_background_scene(rng, sprites=[_square_sprite(rng)]))
    expected = np.zeros((2, 16, 16), dtype=np.float32)
    expected[0, 4:8, 4:8] = 2.0
    np.testing.assert_array_equal(seq.flows[0].uv, expected)
    np.testing.assert_array_equal(seq.layers[1][4:8, 6:10], 1)


def test_moving_sprite_occludes_leading_band(rng):
    scene = _background_scene(rng, sprites=[_square_sprite(rng)])
    covered = np.ones((16, 16), dtype=np.float32)
    covered[4:8, 8:10] = 0.0
    np.testing.assert_array_equal(render_scene(scene, mark_revealed=False).occlusions[0].values, covered)
    # the trailing band is revealed background
    revealed = covered.copy()
    revealed[4:8, 4:6] = 0.0
    np.testing.assert_array_equal(render_scene(scene).occlusions[0].values, revealed)


def test_random_scenes_are_seeded(tiny_scene):
    a = make_split(tiny_scene, 2, seed=3)
    b = make_split(tiny_scene, 2, seed=3)
    for x, y in zip(a, b):
        for fx, fy in zip(x.frames, y.frames):
            assert fx.tobytes() == fy.tobytes()
    scene = random_scene(tiny_scene, np.random.default_rng(0))
    assert tiny_scene.min_sprites <= len(scene.sprites) <= tiny_scene.max_sprites
    assert all(abs(v) <= tiny_scene.max_speed for s in scene.sprites for v in s.velocity)


def test_velocity_bias_shifts_motion():
    params = SceneParams(width=16, height=16, max_speed=0, background_speed=0, velocity_bias=(0.0, 3.0))
    seq = render_scene(random_scene(params, np.random.default_rng(0)))
    np.testing.assert_array_equal(seq.flows[0].v, 3.0)


# ── Warping and composition ──────────────────────────────────────────────

def test_warp_with_zero_flow_is_identity(rng):
    img = rng.random((6, 7, 3)).astype(np.float32)
    np.testing.assert_array_equal(warp_backward(img, FlowField.zeros(7, 6)), img)


def test_warp_undoes_background_motion(rng):
    seq = render_scene(_background_scene(rng, velocity=(1.0, 0.0)))
    warped = warp_backward(seq.frames[1], seq.flows[0])
    np.testing.assert_allclose(warped[:, :-1], seq.frames[0][:, :-1], atol=1e-6)


def test_compose_examples(rng):
    f = FlowField(rng.normal(size=(2, 5, 5)).astype(np.float32))
    assert compose_flow(f, FlowField.zeros(5, 5)).equals(f)
    both = compose_flow(FlowField.constant(5, 5, 1.0, 0.0), FlowField.constant(5, 5, 0.0, 2.0))
    assert both.equals(FlowField.constant(5, 5, 1.0, 2.0))
    with pytest.raises(ValueError, match="extents differ"):
        compose_flow(f, FlowField.zeros(4, 5))


def test_compose_matches_scalar_loop(rng):
    h, w = 6, 7
    f01 = FlowField(rng.integers(-2, 3, size=(2, h, w)).astype(np.float32))
    f12 = FlowField(rng.integers(-2, 3, size=(2, h, w)).astype(np.float32))
    out = compose_flow(f01, f12)
    for y in range(h):
        for x in range(w):
            u, v = f01.uv[:, y, x]
            qx = min(max(int(x + u), 0), w - 1)
            qy = min(max(int(y + v), 0), h - 1)
            np.testing.assert_array_equal(out.uv[:, y, x], f01.uv[:, y, x] + f12.uv[:, qy, qx])


def test_eval_pairs_compose_to_the_two_frame_motion(rng):
    seq = render_scene(_background_scene(rng, velocity=(1.0, -1.0)))
    pairs = eval_pairs(seq, 2)
    assert len(pairs) == 2
    assert all(p.gt_occlusion is None and p.k == 2 for p in pairs)
    assert pairs[0].gt_flow.equals(FlowField.constant(16, 16, 2.0, -2.0))
    assert eval_pairs(seq, 1)[0].gt_occlusion is seq.occlusions[0]
    with pytest.raises(ValueError):
        eval_pairs(seq, 4)


# ── Samples ──────────────────────────────────────────────────────────────

def test_train_sample_invariants(rng):
    img = rng.random((4, 4, 3))
    with pytest.raises(ValueError, match="k must be"):
        TrainSample(img, img, k=0)
    with pytest.raises(ValueError, match="ground-truth flow"):
        TrainSample(img, img, k=1, labeled=True)


def test_k1_pairs_are_all_labeled(tiny_scene):
    seq = make_split(tiny_scene, 1, seed=0)[0]
    stream = frame_hop_sampler(seq, [1], np.random.default_rng(0))
    samples = [next(stream) for _ in range(50)]
    assert all(s.labeled and s.k == 1 and s.gt_flow is not None for s in samples)
    assert all(s.image2 is seq.frames[s.t + 1] for s in samples)


def test_frame_hop_frequencies(tiny_scene):
    seq = make_split(tiny_scene, 1, seed=0)[0]
    stream = frame_hop_sampler([seq, seq], [1, 2], np.random.default_rng(0))
    samples = [next(stream) for _ in range(10_000)]
    share = np.mean([s.k == 2 for s in samples])
    assert 0.45 <= share <= 0.55
    assert all(s.labeled == (s.k == 1) for s in samples)
    assert all(s.gt_flow is None for s in samples if s.k == 2)


def test_frame_hop_bounds(tiny_scene):
    seq = make_split(tiny_scene, 1, seed=0)[0]
    rng = np.random.default_rng(0)
    ks = {draw_pair(seq, [1, 2, 3], rng).k for _ in range(200)}
    assert ks == {1, 2, 3}
    with pytest.raises(ValueError, match="must lie in"):
        draw_pair(seq, [4], rng)
    with pytest.raises(ValueError, match="empty"):
        draw_pair(seq, [], rng)


def test_occlusion_pair(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    sample = make_occlusion_pair(img, CowmaskParams.fixed(3.0, 0.3), rng)
    assert sample.zero_forcing and not sample.labeled
    assert sample.gt_flow.equals(FlowField.zeros(16, 16))
    hidden = sample.gt_occlusion.values == 0
    assert np.all(sample.image2[hidden] == 0)
    np.testing.assert_array_equal(sample.image2[~hidden], img[~hidden])
    same = make_occlusion_pair(img, CowmaskParams(), rng, identical=True)
    np.testing.assert_array_equal(same.image2, img)
    assert same.gt_occlusion.occluded_fraction() == 0.0


# ── File formats ─────────────────────────────────────────────────────────

def test_flo_byte_layout():
    data = encode_flo(FlowField.constant(1, 1, 1.5, -2.0))
    assert len(data) == 20
    assert data[:4] == b"PIEH"
    assert data[4:] == struct.pack("<ii", 1, 1) + struct.pack("<ff", 1.5, -2.0)
    two = encode_flo(FlowField.from_hw2(np.array([[[1.5, -2.0], [0.25, 4.0]]])))
    assert two[4:12] == struct.pack("<ii", 2, 1)
    assert two[12:] == struct.pack("<4f", 1.5, -2.0, 0.25, 4.0)


def _extent(rng):
    # a single row or column every few instances
    h, w = rng.integers(1, 24, size=2)
    kind = rng.integers(0, 4)
    return (1 if kind == 0 else int(h)), (1 if kind == 1 else int(w))


def test_flo_round_trips_are_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w = _extent(rng)
        uv = (rng.normal(scale=20.0, size=(2, h, w)) * rng.choice([1.0, -1.0, 1e-3], size=(2, h, w))).astype(np.float32)
        flow = FlowField(uv)
        data = encode_flo(flow)
        assert struct.unpack("<ii", data[4:12]) == (w, h)
        decoded = decode_flo(data)
        assert decoded.equals(flow), (h, w)
        assert encode_flo(decoded) == data


def test_flo_round_trip_file(tmp_path, rng):
    flow = FlowField(rng.normal(size=(2, 3, 5)).astype(np.float32))
    path = str(tmp_path / "f.flo")
    write_flo(path, flow)
    assert read_flo(path).equals(flow)


def test_flo_rejects_bad_input():
    data = encode_flo(FlowField.zeros(2, 2))
    with pytest.raises(FormatError, match="202021.25") as err:
        decode_flo(b"XXXX" + data[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError, match="truncated payload"):
        decode_flo(data[:-1])
    with pytest.raises(FormatError, match="truncated header"):
        decode_flo(data[:8])
    with pytest.raises(FormatError, match="trailing"):
        decode_flo(data + b"\x00")


def test_ppm_header_oracle():
    img = decode_ppm(b"P6\n2 2\n255\n" + bytes(range(12)))
    assert img.shape == (2, 2, 3) and img.dtype == np.uint8
    np.testing.assert_array_equal(img[0, 1], [3, 4, 5])
    with_comment = decode_ppm(b"P6\n# made by hand\n2 2\n255\n" + bytes(range(12)))
    np.testing.assert_array_equal(with_comment, img)


def test_ppm_round_trips_are_bitwise():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h, w = _extent(rng)
        img = rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)
        data = encode_ppm(img)
        assert data.startswith(f"P6\n{w} {h}\n255\n".encode("ascii"))
        decoded = decode_ppm(data)
        assert decoded.dtype == np.uint8 and decoded.tobytes() == img.tobytes(), (h, w)
        assert encode_ppm(decoded) == data


def test_ppm_small_maxval_is_rescaled():
    img = decode_ppm(b"P6\n2 1\n15\n" + bytes([0, 7, 15, 15, 1, 8]))
    np.testing.assert_array_equal(img.reshape(-1), [0, 119, 255, 255, 17, 136])
    with pytest.raises(FormatError, match="exceeds maxval") as err:
        decode_ppm(b"P6\n1 1\n15\n" + bytes([3, 16, 0]))
    assert err.value.offset == len(b"P6\n1 1\n15\n") + 1


def test_ppm_rejections():
    with pytest.raises(FormatError, match="unsupported image type"):
        decode_ppm(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError, match="truncated"):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError, match="maxval"):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))


def test_dataset_directory(tmp_path, tiny_scene):
    seqs = make_split(tiny_scene, 2, seed=0)
    root = str(tmp_path / "data")
    manifest = write_dataset(root, seqs)
    assert manifest.endswith(MANIFEST_NAME)
    entries = read_manifest(manifest)
    assert [len(files) for _, files in entries] == [4, 4]
    assert entries[0][1][0] == "frame_0000.ppm"
    files = flow_files(root)
    assert len(files) == 6
    assert read_flo(files[0]).equals(seqs[0].flows[0])
    frame = read_image(f"{entries[1][0]}/{entries[1][1][2]}")
    np.testing.assert_allclose(frame, seqs[1].frames[2], atol=0.5 / 255 + 1e-6)


def test_manifest_rejects_empty_sequences(tmp_path):
    path = tmp_path / MANIFEST_NAME
    path.write_text("seq_0000\n")
    with pytest.raises(FormatError, match="lists no frames"):
        read_manifest(str(path))
