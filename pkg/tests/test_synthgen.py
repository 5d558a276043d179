import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from dewarpflow.flow_core import ImageRaster, load_flow, load_image, validate_sample
from dewarpflow.rectifier import paste, rectify
from dewarpflow.synthgen import (
    AugmentSpec,
    MeshGrid,
    PerturbSpec,
    generate_flat_document,
    hsv_jitter,
    identity_mesh,
    mesh_violations,
    perturb_mesh,
    procedural_background,
    synthesize,
    write_dataset,
)

NO_JITTER = AugmentSpec(hue_jitter=0, sat_jitter=0, val_jitter=0)


def test_flat_document_determinism_and_content():
    a, b = generate_flat_document(5, 80, 70), generate_flat_document(5, 80, 70)
    assert a.data.tobytes() == b.data.tobytes()
    assert 0.5 < a.data.mean() < 1.0
    c = generate_flat_document(6, 80, 70)
    assert (np.abs(a.data - c.data).max(axis=-1) > 1e-6).mean() >= 0.01


def test_flat_document_rejects_small():
    with pytest.raises(ValueError):
        generate_flat_document(0, 31, 64)


def test_perturb_strength_zero_is_identity():
    mesh = identity_mesh(0, 0, 40, 30)
    out = perturb_mesh(mesh, PerturbSpec("fold", (10, 10), (1, 0), 0.0, 5.0))
    np.testing.assert_array_equal(out.vertices, mesh.vertices)


def test_fold_on_crease_moves_full_strength():
    mesh = identity_mesh(0, 0, 40, 40, step=4)
    out = perturb_mesh(mesh, PerturbSpec("fold", (0.0, 20.0), (1.0, 0.0), 3.0, 10.0))
    # vertices on the line y = 20 have d = 0
    row = int(np.argmin(np.abs(mesh.vertices[:, 0, 1] - 20)))
    np.testing.assert_allclose(out.vertices[row, :, 0] - mesh.vertices[row, :, 0], 3.0)
    np.testing.assert_allclose(out.vertices[row, :, 1], mesh.vertices[row, :, 1])
    # fold weight radius / (d + radius) one row off the crease
    d = abs(mesh.vertices[row + 1, 0, 1] - 20)
    np.testing.assert_allclose(out.vertices[row + 1, :, 0] - mesh.vertices[row + 1, :, 0], 3.0 * 10 / (d + 10))


def test_curve_vanishes_at_radius():
    mesh = identity_mesh(0, 0, 40, 40, step=4)
    out = perturb_mesh(mesh, PerturbSpec("curve", (0.0, 20.0), (1.0, 0.0), 2.0, 8.0))
    disp = out.vertices - mesh.vertices
    d = np.abs(mesh.vertices[..., 1] - 20)
    assert not disp[d >= 8].any()
    np.testing.assert_allclose(disp[..., 0][d < 8], 2.0 * (1 - (d[d < 8] / 8) ** 2))


def test_perturb_halves_strength_instead_of_inverting():
    mesh = identity_mesh(0, 0, 40, 40, step=4)
    out = perturb_mesh(mesh, PerturbSpec("fold", (20.0, 20.0), (1.0, 0.0), 400.0, 0.5))
    assert mesh_violations(out) == []


def test_spec_validation():
    with pytest.raises(ValueError):
        PerturbSpec("fold", (0, 0), (1, 1), 1.0, 1.0)
    with pytest.raises(ValueError):
        PerturbSpec("twist", (0, 0), (1, 0), 1.0, 1.0)
    with pytest.raises(ValueError):
        PerturbSpec("curve", (0, 0), (0, 1), -1.0, 1.0)
    with pytest.raises(ValueError):
        AugmentSpec(hue_jitter=1.5)
    with pytest.raises(ValueError):
        MeshGrid(np.zeros((1, 3, 2)))


def test_mesh_violation_detection():
    v = identity_mesh(0, 0, 8, 8, step=4).vertices.copy()
    v[1, 1] = (20, 20)
    assert any("inverted" in s for s in mesh_violations(MeshGrid(v)))
    assert any("bounds" in s for s in mesh_violations(identity_mesh(-50, 0, 8, 8), (40, 40)))


def test_synthesize_deterministic():
    a, b = synthesize(11, 64, 60), synthesize(11, 64, 60)
    for f in ("distorted", "flat_reference"):
        assert getattr(a, f).data.tobytes() == getattr(b, f).data.tobytes()
    assert a.gt_flow.dx.tobytes() == b.gt_flow.dx.tobytes()
    assert a.gt_mask.values.tobytes() == b.gt_mask.values.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 12))
def test_synthesize_postconditions(seed, n):
    s = synthesize(seed, 64, 60, n)
    assert validate_sample(s) == []
    m = s.gt_mask.values
    assert m.any()
    assert not s.gt_flow.dx[m == 0].any() and not s.gt_flow.dy[m == 0].any()
    # the warped page is a single connected sheet
    assert ndimage.label(m)[1] == 1


def test_sliver_pixels_are_dropped():
    # a sharp corner once left a lone covered pixel outside the sheet
    m = synthesize(55, 64, 60, 2).gt_mask.values
    assert ndimage.label(m)[1] == 1


def test_zero_perturbations_give_constant_flow():
    s = synthesize(4, 96, 90, 0, NO_JITTER)
    m = s.gt_mask.values == 1
    assert np.ptp(s.gt_flow.dx[m]) < 1e-9 and np.ptp(s.gt_flow.dy[m]) < 1e-9
    res = rectify(s.distorted, s.gt_flow, s.gt_mask)
    img, cov = paste(res, (96, 90))
    err = np.abs(img - s.flat_reference.data)[cov]
    # only the two fractional-offset bilinear resamplings remain
    assert err.mean() < 8 / 255


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_with_own_flow(seed):
    s = synthesize(seed, 128, 120, 4, NO_JITTER)
    res = rectify(s.distorted, s.gt_flow, s.gt_mask)
    img, cov = paste(res, (128, 120), fill=1.0)
    assert cov.sum() > 0.9 * s.gt_mask.values.sum()
    assert np.abs(img - s.flat_reference.data)[cov].mean() < 8 / 255


def test_jitter_touches_image_only():
    a = synthesize(9, 64, 60, 3, NO_JITTER)
    b = synthesize(9, 64, 60, 3, AugmentSpec(hue_jitter=0.5, sat_jitter=0.5, val_jitter=0.5))
    assert a.gt_flow.dx.tobytes() == b.gt_flow.dx.tobytes()
    assert a.flat_reference.data.tobytes() == b.flat_reference.data.tobytes()
    assert np.abs(a.distorted.data - b.distorted.data).max() > 0


def test_hsv_jitter_bounds():
    rgb = np.random.default_rng(0).random((8, 8, 3))
    out = hsv_jitter(rgb, np.random.default_rng(1), AugmentSpec(hue_jitter=1, sat_jitter=1, val_jitter=1))
    assert out.min() >= 0 and out.max() <= 1
    same = hsv_jitter(rgb, np.random.default_rng(1), NO_JITTER)
    np.testing.assert_allclose(same, rgb, atol=1e-12)


def test_background_image_is_tiled():
    tile = ImageRaster(np.random.default_rng(2).random((10, 12, 3)))
    s = synthesize(3, 64, 60, 2, AugmentSpec(background=tile, hue_jitter=0, sat_jitter=0, val_jitter=0))
    bg = s.gt_mask.values == 0
    r, c = np.argwhere(bg)[0]
    np.testing.assert_allclose(s.distorted.data[r, c], tile.data[r % 10, c % 12], atol=1e-12)


def test_procedural_background_range():
    bg = procedural_background(1, 40, 50)
    assert bg.shape == (40, 50, 3) and bg.min() >= 0 and bg.max() <= 1
    assert np.ptp(bg) > 0.01


def test_synthesize_argument_checks():
    with pytest.raises(ValueError):
        synthesize(0, 64, 60, 13)
    with pytest.raises(ValueError):
        synthesize(0, 16, 60)


def test_write_dataset_layout(tmp_path):
    root = write_dataset(tmp_path / "ds", [3, 7], 64, 60, 2)
    names = sorted(p.name for p in root.iterdir())
    assert names == ["3.dfl", "3.png", "3_flat.png", "7.dfl", "7.png", "7_flat.png", "manifest.json"]
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["seeds"] == [3, 7] and manifest["h"] == 64 and manifest["n_perturbs"] == 2
    s = synthesize(7, 64, 60, 2)
    flow, mask = load_flow(root / "7.dfl")
    np.testing.assert_array_equal(flow.dx, s.gt_flow.dx)
    np.testing.assert_array_equal(mask.values, s.gt_mask.values)
    img = load_image(root / "7.png")
    assert np.abs(img.data - s.distorted.data).max() <= 0.5 / 255 + 1e-6
