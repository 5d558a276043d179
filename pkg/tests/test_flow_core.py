import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dewarpflow.flow_core import (
    FlowField,
    FlowFormatError,
    ForegroundMask,
    ImageRaster,
    Sample,
    load_flow,
    load_image,
    save_flow,
    save_image,
    scale_flow,
    validate_sample,
)
from dewarpflow.synthgen import synthesize


def brute_bilinear(arr, out_h, out_w):
    """Pixel-by-pixel resampler with half-pixel centers and edge clamping."""
    h, w = arr.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * arr[y0, x0] + fx * arr[y0, x1])
                         + fy * ((1 - fx) * arr[y1, x0] + fx * arr[y1, x1]))
    return out


@pytest.fixture
def sample():
    return synthesize(3, 64, 60, 3)


def test_validate_generated_sample(sample):
    assert validate_sample(sample) == []


def test_validate_reports_nan(sample):
    dx = np.array(sample.gt_flow.dx)
    dx[5, 7] = np.nan
    bad = Sample(sample.distorted, FlowField(dx, sample.gt_flow.dy), sample.gt_mask, sample.flat_reference)
    v = validate_sample(bad)
    assert len(v) == 1
    assert v[0].invariant == "finite entries"
    assert v[0].index == (5, 7)


def test_validate_empty_mask_is_legal(sample):
    s = Sample(sample.distorted, FlowField.zeros(64, 60), ForegroundMask.full(64, 60, 0.0), sample.flat_reference)
    assert validate_sample(s) == []


def test_validate_out_of_bounds_flow(sample):
    dx = np.array(sample.gt_flow.dx)
    r, c = np.argwhere(sample.gt_mask.values == 1)[0]
    dx[r, c] = 500.0
    s = Sample(sample.distorted, FlowField(dx, sample.gt_flow.dy), sample.gt_mask, sample.flat_reference)
    assert [v.index for v in validate_sample(s)] == [(r, c)]


def test_types_are_frozen():
    f = FlowField.zeros(3, 4)
    with pytest.raises(ValueError):
        f.dx[0, 0] = 1.0
    with pytest.raises(ValueError):
        ImageRaster(np.zeros((4, 4, 2)))


def test_scale_flow_identity_is_bitwise():
    rng = np.random.default_rng(0)
    f = FlowField(rng.normal(size=(9, 7)), rng.normal(size=(9, 7)))
    m = ForegroundMask((rng.random((9, 7)) > 0.5).astype(float))
    f2, m2 = scale_flow(f, m, 1.0)
    assert f2.dx.tobytes() == f.dx.tobytes() and f2.dy.tobytes() == f.dy.tobytes()
    assert m2.values.tobytes() == m.values.tobytes()


def test_scale_flow_constant_field():
    f = FlowField(np.full((6, 5), 3.0), np.full((6, 5), -1.0))
    f2, m2 = scale_flow(f, ForegroundMask.full(6, 5), 2.0)
    assert f2.shape == (12, 10)
    np.testing.assert_array_equal(f2.dx, 6.0)
    np.testing.assert_array_equal(f2.dy, -2.0)
    assert (m2.values == 1).all()


def test_scale_flow_matches_brute_force():
    rng = np.random.default_rng(1)
    dx, dy = rng.normal(size=(2, 16, 15)) * 4
    mask = (rng.random((16, 15)) > 0.3).astype(np.float64)
    f2, m2 = scale_flow(FlowField(dx, dy), ForegroundMask(mask), 1.5)
    assert f2.shape == (24, 22)
    w = brute_bilinear(mask, 24, 22)
    keep = w >= 0.5
    np.testing.assert_array_equal(m2.values == 1, keep)
    for got, plane in ((f2.dx, dx), (f2.dy, dy)):
        # background vectors carry no weight; foreground ones are renormalized
        ref = brute_bilinear(plane.astype(np.float32).astype(np.float64) * mask, 24, 22) / np.where(keep, w, 1)
        assert np.abs(got[keep] - 1.5 * ref[keep]).max() < 1e-5  # float32 storage of a ~10 px value
        assert not got[~keep].any()


def test_scale_flow_ignores_background_values():
    dx = np.full((6, 6), 5.0)
    dx[:, 3:] = -100.0
    mask = np.zeros((6, 6))
    mask[:, :3] = 1
    f2, m2 = scale_flow(FlowField(dx, np.zeros((6, 6))), ForegroundMask(mask), 2.0)
    np.testing.assert_allclose(f2.dx[m2.values == 1], 10.0)


def test_scale_flow_rejects_nonpositive():
    f = FlowField.zeros(4, 4)
    for lam in (0, -1.0):
        with pytest.raises(ValueError):
            scale_flow(f, ForegroundMask.full(4, 4), lam)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.5, 2.0, 3.0]))
def test_scale_round_trip_smooth(seed, lam):
    rng = np.random.default_rng(seed)
    h, w = 24, 20
    yy, xx = np.mgrid[0:h, 0:w] / 10.0
    a = rng.uniform(-3, 3, size=4)
    f = FlowField(a[0] * np.sin(yy + a[1]), a[2] * np.cos(xx * 0.7 + a[3]))
    m = ForegroundMask.full(h, w)
    up, um = scale_flow(f, m, lam)
    back, _ = scale_flow(up, um, 1 / lam)
    assert back.shape == (h, w)
    inner = (slice(2, -2), slice(2, -2))
    assert np.abs(back.dx - f.dx)[inner].max() < 0.05
    assert np.abs(back.dy - f.dy)[inner].max() < 0.05


def test_flow_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    f = FlowField(rng.normal(size=(13, 11)) * 7, rng.normal(size=(13, 11)) - 0.25)
    m = ForegroundMask((rng.random((13, 11)) > 0.5).astype(float))
    save_flow(tmp_path / "a.dfl", f, m)
    f2, m2 = load_flow(tmp_path / "a.dfl")
    assert f2.dx.tobytes() == f.dx.tobytes()
    assert f2.dy.tobytes() == f.dy.tobytes()
    assert m2.values.tobytes() == m.values.tobytes()


def test_flow_round_trip_single_pixel(tmp_path):
    f = FlowField([[0.125]], [[-3.5]])
    save_flow(tmp_path / "p.dfl", f, ForegroundMask([[1.0]]))
    f2, m2 = load_flow(tmp_path / "p.dfl")
    assert f2.dx[0, 0] == 0.125 and f2.dy[0, 0] == -3.5 and m2.values[0, 0] == 1.0


def test_flow_file_layout(tmp_path):
    save_flow(tmp_path / "l.dfl", FlowField([[1.0, 2.0]], [[3.0, 4.0]]), ForegroundMask([[1.0, 0.0]]))
    raw = (tmp_path / "l.dfl").read_bytes()
    assert raw[:4] == b"DFL1"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 2
    np.testing.assert_array_equal(np.frombuffer(raw[12:], "<f4"), [1, 2, 3, 4, 1, 0])


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda b: b"XXXX" + b[4:], 0),
        (lambda b: b[:-5], None),
        (lambda b: b[:6], 6),
        (lambda b: b[:4] + (2**20).to_bytes(4, "little") * 2 + b[12:], 4),
    ],
    ids=["magic", "truncated", "short-header", "overflow"],
)
def test_flow_format_errors(tmp_path, mutate, offset):
    save_flow(tmp_path / "ok.dfl", FlowField.zeros(4, 4))
    raw = (tmp_path / "ok.dfl").read_bytes()
    (tmp_path / "bad.dfl").write_bytes(mutate(raw))
    with pytest.raises(FlowFormatError) as exc:
        load_flow(tmp_path / "bad.dfl")
    assert "byte offset" in str(exc.value)
    if offset is not None:
        assert exc.value.offset == offset


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    data = np.round(rng.random((5, 6, 3)) * 255) / 255
    save_image(tmp_path / "x.png", ImageRaster(data))
    back = load_image(tmp_path / "x.png")
    np.testing.assert_allclose(back.data, data, atol=1e-6)


def test_png_alpha_composites_onto_background(tmp_path):
    img = ImageRaster(np.zeros((2, 2, 3)))
    save_image(tmp_path / "a.png", img, alpha=np.array([[1.0, 0.0], [0.0, 1.0]]))
    back = load_image(tmp_path / "a.png")
    np.testing.assert_array_equal(back.data[..., 0], [[0, 1], [1, 0]])
