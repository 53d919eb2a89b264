import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cm3ae import oracles
from cm3ae.data import (
    SyntheticConfig,
    build_voxels,
    events_from_frames,
    generate_dataset,
    generate_synthetic_pair,
    load_dataset,
    load_sample,
    normalize_events,
    num_workers,
    read_voxel_file,
    render_event_frame,
    save_sample,
    write_voxel_file,
)
from cm3ae.exceptions import ConfigError, FormatError, InputError


def _square_frames(size=32, side=8, shift=4):
    f0 = np.zeros((size, size, 3))
    f1 = np.zeros((size, size, 3))
    f0[12 : 12 + side, 8 : 8 + side] = 1.0
    f1[12 : 12 + side, 8 + shift : 8 + shift + side] = 1.0
    return f0, f1


# -- generation ---------------------------------------------------------------------


def test_pair_shapes_and_channels():
    p = generate_synthetic_pair(0)
    assert p.rgb.shape == p.event.shape == (64, 64, 3)
    assert p.voxels.shape == (32, 56) and p.voxels.dtype == np.float32
    assert np.all(p.event[..., 1] == 0)
    assert p.rgb.min() >= 0 and p.rgb.max() <= 1
    assert 0 <= p.label < 4


def test_same_seed_bit_identical():
    a, b = generate_synthetic_pair(11), generate_synthetic_pair(11)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.event, b.event)
    assert np.array_equal(a.voxels, b.voxels)
    assert a.label == b.label


def test_different_seeds_differ():
    assert not np.array_equal(generate_synthetic_pair(1).rgb, generate_synthetic_pair(2).rgb)


def test_static_scene_rejected():
    with pytest.raises(InputError, match="no events"):
        generate_synthetic_pair(0, SyntheticConfig(motion=0.0, texture=0.0))


def test_bad_config():
    with pytest.raises(ConfigError):
        SyntheticConfig(threshold=0)
    with pytest.raises(ConfigError):
        SyntheticConfig(num_classes=1)
    with pytest.raises(ConfigError):
        SyntheticConfig(motion=-1)


def test_moving_square_edges():
    f0, f1 = _square_frames()
    ev = events_from_frames(f0, f1, 0.1)
    pos = {(int(x), int(y)) for x, y, t, p in ev if p == 1}
    neg = {(int(x), int(y)) for x, y, t, p in ev if p == 0}
    rows = range(12, 20)
    assert pos == {(x, y) for x in range(16, 20) for y in rows}  # leading edge
    assert neg == {(x, y) for x in range(8, 12) for y in rows}  # trailing edge


def test_moving_square_matches_pixel_oracle():
    f0, f1 = _square_frames()
    ev = events_from_frames(f0, f1, 0.1)
    got = {(int(x), int(y)): int(p) for x, y, t, p in ev}
    assert got == oracles.event_pixels(f0, f1, 0.1)
    # a unit step with threshold 0.1 fires ten events per pixel
    assert len(ev) == 10 * len(got)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.3))
def test_events_match_pixel_oracle_random(seed, thr):
    r = np.random.default_rng(seed)
    f0, f1 = r.random((10, 10, 3)), r.random((10, 10, 3))
    ev = events_from_frames(f0, f1, thr)
    got = {(int(x), int(y)): int(p) for x, y, t, p in ev}
    assert got == oracles.event_pixels(f0, f1, thr)
    assert np.all((ev[:, 2] > 0) & (ev[:, 2] <= 1))


def test_event_frame_polarity_channels():
    ev = np.array([[1, 2, 0.5, 1.0], [3, 0, 0.5, 0.0]])
    frame = render_event_frame(ev, 4)
    assert frame[2, 1, 0] == 1 and frame[0, 3, 2] == 1
    assert frame.sum() == 2


@pytest.mark.parametrize("seed", range(6))
def test_voxels_consistent_with_event_frame(seed):
    p = generate_synthetic_pair(seed)
    size = p.rgb.shape[0]
    fired = {(x, y, 1) for y, x in zip(*np.nonzero(p.event[..., 0]))}
    fired |= {(x, y, 0) for y, x in zip(*np.nonzero(p.event[..., 2]))}
    events = p.voxels.astype(np.float64).reshape(-1, 4)
    xs = np.rint(events[:, 0] * (size - 1)).astype(int)
    ys = np.rint(events[:, 1] * (size - 1)).astype(int)
    pol = events[:, 3].astype(int)
    assert set(zip(xs.tolist(), ys.tolist(), pol.tolist())) <= fired


def test_build_voxels_padding_and_cap():
    ev = np.array([[0.1, 0.1, t, 1.0] for t in (0.05, 0.1, 0.15)])
    vox = build_voxels(ev, 8, (2, 2, 1), 5)
    assert vox.shape == (1, 20)
    ts = vox.reshape(5, 4)[:, 2]
    np.testing.assert_allclose(ts, [0.05, 0.1, 0.15, 0.05, 0.1])
    many = np.array([[0.1, 0.1, t, 1.0] for t in np.linspace(0.01, 0.2, 20)])
    assert build_voxels(many, 8, (2, 2, 1), 14).shape == (1, 56)


def test_normalize_events_range():
    ev = np.array([[0, 0, 0.5, 1], [63, 63, 1.0, 0]], dtype=float)
    out = normalize_events(ev, 64)
    assert out.min() >= 0 and out.max() <= 1
    assert out[1, 0] == 1.0


def test_dataset_order_independent_of_workers():
    a = generate_dataset(6, seed=3, workers=0)
    b = generate_dataset(6, seed=3, workers=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.rgb, y.rgb) and np.array_equal(x.voxels, y.voxels)


def test_num_workers_env(monkeypatch):
    monkeypatch.setenv("CM3AE_NUM_WORKERS", "3")
    assert num_workers() == 3
    monkeypatch.setenv("CM3AE_NUM_WORKERS", "x")
    with pytest.raises(ConfigError):
        num_workers()
    monkeypatch.delenv("CM3AE_NUM_WORKERS")
    assert num_workers() == 0


# -- CMVX ---------------------------------------------------------------------------


def test_voxel_file_size(tmp_path):
    path = tmp_path / "v.vox"
    write_voxel_file(np.zeros((8, 56), np.float32), path)
    assert path.stat().st_size == 1808


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_voxel_file_round_trip(tmp_path_factory, count, width, seed):
    path = tmp_path_factory.mktemp("vox") / "v.vox"
    x = np.random.default_rng(seed).standard_normal((count, width)).astype(np.float32)
    write_voxel_file(x, path)
    y = read_voxel_file(path)
    assert y.tobytes() == x.tobytes()


def test_voxel_file_special_values_round_trip(tmp_path):
    x = np.array([[np.inf, -0.0, 1e-45, np.nan]], dtype=np.float32)
    write_voxel_file(x, tmp_path / "v.vox")
    assert read_voxel_file(tmp_path / "v.vox").tobytes() == x.tobytes()


def test_truncated_voxel_file(tmp_path):
    path = tmp_path / "v.vox"
    write_voxel_file(np.ones((8, 56), np.float32), path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError, match="expected 1808 bytes.*found 1807") as exc:
        read_voxel_file(path)
    assert exc.value.offset == 1807


def test_voxel_file_bad_magic(tmp_path):
    path = tmp_path / "v.vox"
    write_voxel_file(np.ones((2, 4), np.float32), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic") as exc:
        read_voxel_file(path)
    assert exc.value.offset == 0


def test_voxel_file_bad_version_and_width(tmp_path):
    path = tmp_path / "v.vox"
    write_voxel_file(np.ones((2, 4), np.float32), path)
    with pytest.raises(FormatError, match="width"):
        read_voxel_file(path, record_width=56)
    raw = bytearray(path.read_bytes())
    raw[4] = 2
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_voxel_file(path)


def test_voxel_file_extra_bytes_and_short_header(tmp_path):
    path = tmp_path / "v.vox"
    write_voxel_file(np.ones((2, 4), np.float32), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_voxel_file(path)
    path.write_bytes(b"CMVX")
    with pytest.raises(FormatError, match="header"):
        read_voxel_file(path)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_random_corruption_never_silent(tmp_path_factory, seed):
    """Truncations and header flips always raise."""
    r = np.random.default_rng(seed)
    path = tmp_path_factory.mktemp("c") / "v.vox"
    write_voxel_file(r.standard_normal((4, 8)).astype(np.float32), path)
    raw = bytearray(path.read_bytes())
    if r.random() < 0.5:
        raw = raw[: int(r.integers(0, len(raw)))]
    else:
        i = int(r.integers(0, 8))  # magic or version byte
        raw[i] ^= int(r.integers(1, 256))
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_voxel_file(path, record_width=8)


# -- sample directories ---------------------------------------------------------------


def test_sample_round_trip(tmp_path):
    p = generate_synthetic_pair(5)
    save_sample(p, tmp_path / "s0")
    q = load_sample(tmp_path / "s0", image_size=64, record_width=56)
    assert np.abs(q.rgb - p.rgb).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(q.event, p.event)
    assert q.voxels.tobytes() == p.voxels.tobytes()
    assert q.label == p.label


def test_missing_voxels_optional(tmp_path):
    p = generate_synthetic_pair(5)
    save_sample(p, tmp_path)
    (tmp_path / "events.vox").unlink()
    with pytest.raises(FileNotFoundError, match="events.vox"):
        load_sample(tmp_path)
    q = load_sample(tmp_path, use_voxels=False)
    assert q.voxels is None and q.rgb.shape == (64, 64, 3)


def test_missing_image(tmp_path):
    save_sample(generate_synthetic_pair(5), tmp_path)
    (tmp_path / "event.png").unlink()
    with pytest.raises(FileNotFoundError, match="event.png"):
        load_sample(tmp_path)


def test_dimension_mismatch(tmp_path):
    save_sample(generate_synthetic_pair(5), tmp_path)
    with pytest.raises(InputError):
        load_sample(tmp_path, image_size=32)


def test_load_dataset_sorted(tmp_path):
    for i in (2, 0, 1):
        save_sample(generate_synthetic_pair(i), tmp_path / f"s{i}")
    pairs = load_dataset(tmp_path)
    assert [p.label for p in pairs] == [generate_synthetic_pair(i).label for i in range(3)]
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "s0")
