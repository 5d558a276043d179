"""Acceptance criteria 1-9.

Each test prints one ``criterion N: PASS|FAIL`` line (visible even without
``-s``) with the measured quantity and its runtime.  The toy training
settings come from ``configs/toy.yaml``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dewarpflow.checks import grad_suite, lsc_suite, network_check, tri_suite
from dewarpflow.cli import load_config, main
from dewarpflow.flow_core import ImageRaster, resize_bilinear, to_gray
from dewarpflow.losses import LossWeights, lsc_loss
from dewarpflow.metrics import common_gray, local_distortion, ms_ssim
from dewarpflow.net import ModelConfig, forward
from dewarpflow.rectifier import paste, rectify, rectify_scaled
from dewarpflow.synthgen import AugmentSpec, generate_flat_document, synthesize
from dewarpflow.training import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]
TOY = load_config(ROOT / "configs" / "toy.yaml")
NO_JITTER = AugmentSpec(hue_jitter=0, sat_jitter=0, val_jitter=0)


@pytest.fixture
def report(capsys):
    """Call with (criterion, passed, detail) to print the verdict line."""
    t0 = time.perf_counter()

    def emit(n, passed, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if passed else 'FAIL'} ({detail}; {time.perf_counter() - t0:.1f} s)")
    return emit


def toy_arrays(seeds, h=128, w=120):
    smps = [synthesize(s, h, w) for s in seeds]
    return (np.stack([s.distorted.data.transpose(2, 0, 1) for s in smps]).astype(np.float32),
            np.stack([s.gt_flow.as_array(np.float32) for s in smps]),
            np.stack([s.gt_mask.values for s in smps]))


def toy_run(data, beta=None):
    tc = dict(TOY["train"])
    if beta is not None:
        tc["weights"] = {**tc["weights"], "beta": beta}
    return train(data, ModelConfig.from_dict(TOY["model"]), TrainConfig.from_dict(tc), max_iterations=300)


@pytest.fixture(scope="module")
def toy_data():
    return toy_arrays(range(10))


@pytest.fixture(scope="module")
def toy_trained(toy_data):
    t0 = time.perf_counter()
    model, history = toy_run(toy_data)
    return model, history, time.perf_counter() - t0


# ---- 1 -----------------------------------------------------------------------

def test_criterion_1_lsc_identity(report):
    t0 = time.perf_counter()
    [r] = lsc_suite(n=200, seed=1)
    dt = time.perf_counter() - t0
    ok = r.max_rel_err < 1e-9 and dt < 5
    report(1, ok, f"max abs diff {r.max_rel_err:.2e} over {r.n_coords} instances")
    assert r.max_rel_err < 1e-9
    assert dt < 5


# ---- 2 -----------------------------------------------------------------------

def test_criterion_2_gradient_suite(report):
    t0 = time.perf_counter()
    results = [r for seed in range(5) for r in grad_suite(seed, network=False)]
    net = network_check(0)
    dt = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results)
    bad = sorted({r.loss for r in results if not r.passed})
    ok = not bad and net.max_rel_err < 1e-3 and dt < 120
    report(2, ok, f"losses max rel err {worst:.2e}, network {net.max_rel_err:.2e}")
    assert not bad, bad
    assert net.max_rel_err < 1e-3
    assert dt < 120


# ---- 3 -----------------------------------------------------------------------

def test_criterion_3_round_trip(report):
    t0 = time.perf_counter()
    errs = []
    for seed in range(50):
        s = synthesize(seed, 128, 120, 4, NO_JITTER)
        img, cov = paste(rectify(s.distorted, s.gt_flow, s.gt_mask), (128, 120))
        errs.append(np.abs(img - s.flat_reference.data)[cov].mean())
    dt = time.perf_counter() - t0
    n_pass = sum(e < 8 / 255 for e in errs)
    report(3, n_pass == 50 and dt < 120, f"{n_pass}/50 under 8/255, worst {max(errs) * 255:.2f}/255")
    assert n_pass == 50
    assert dt < 120


# ---- 4 -----------------------------------------------------------------------

def test_criterion_4_scaling(report):
    diffs, identical = [], True
    for seed in range(20):
        s = synthesize(seed, 128, 120, 4, NO_JITTER)
        one = rectify(s.distorted, s.gt_flow, s.gt_mask)
        same = rectify_scaled(s.distorted, s.gt_flow, s.gt_mask, 1.0)
        identical &= (one.translation == same.translation
                      and one.image.data.tobytes() == same.image.data.tobytes())
        hd = ImageRaster(resize_bilinear(s.distorted.data, 256, 240))
        two = rectify_scaled(hd, s.gt_flow, s.gt_mask, 2.0)
        a, ca = paste(one, (128, 120))
        b, cb = paste(two, (256, 240))
        # half-pixel centers: a 2x box average is the matching downsample
        b = b.reshape(128, 2, 120, 2, 3).mean(axis=(1, 3))
        both = ca & cb.reshape(128, 2, 120, 2).all(axis=(1, 3))
        diffs.append(np.abs(a - b)[both].mean())
    ok = identical and max(diffs) < 10 / 255
    report(4, ok, f"worst mean diff {max(diffs) * 255:.2f}/255, lambda=1 bit-identical: {identical}")
    assert identical
    assert max(diffs) < 10 / 255


# ---- 5 -----------------------------------------------------------------------

def test_criterion_5_triangulation_oracle(report):
    [r] = tri_suite(n=20, seed=5)
    report(5, r.passed, f"worst mean diff {r.max_rel_err * 255:.3f}/255")
    assert r.max_rel_err < 2 / 255


# ---- 6 -----------------------------------------------------------------------

def test_criterion_6_toy_convergence(report, toy_data, toy_trained):
    _, history, first_time = toy_trained
    t0 = time.perf_counter()
    _, again = toy_run(toy_data)
    ld = [r["l_d"] for r in history]
    total = [r["total"] for r in history]
    rises = sum(b > a for a, b in zip(total, total[1:]))
    ratio = ld[-1] / ld[0]
    runtime = first_time + time.perf_counter() - t0
    ok = ratio < 0.1 and rises <= 2 and again == history and runtime < 1800
    report(6, ok, f"L_D {ld[0]:.2f} -> {ld[-1]:.3f} ({ratio:.1%}), {rises} non-monotone epochs, "
                  f"deterministic: {again == history}")
    assert ratio < 0.1
    assert rises <= 2
    assert again == history
    assert runtime < 1800


# ---- 7 -----------------------------------------------------------------------

def trend_error(model, data):
    images, flows, masks = data
    pred, _ = forward(model, torch.from_numpy(images), keep_graph=False)
    return lsc_loss(pred.astype(np.float64), flows.astype(np.float64), masks, TOY["train"]["weights"]["k_window"]).value


def test_criterion_7_lsc_ablation(report, toy_data, toy_trained):
    with_lsc = toy_trained[0]
    assert TOY["train"]["weights"]["beta"] == LossWeights().beta == 0.01
    without, _ = toy_run(toy_data, beta=0.0)
    a, b = trend_error(with_lsc, toy_data), trend_error(without, toy_data)
    report(7, a < b, f"trend error with LSC {a:.4f} vs without {b:.4f}")
    assert a < b


# ---- 8 -----------------------------------------------------------------------

def test_criterion_8_metric_sanity(report):
    a = generate_flat_document(1, 200, 190)
    b = generate_flat_document(2, 200, 190)
    ident = abs(ms_ssim(a, a)[0] - 1)
    sym = abs(ms_ssim(a, b)[0] - ms_ssim(b, a)[0])
    ld_self = local_distortion(a, a).ld
    g = common_gray(a, a)[0]
    shifted = np.roll(g, (3, 4), axis=(0, 1))[8:-8, 8:-8]
    ld_shift = local_distortion(g[8:-8, 8:-8], shifted).ld
    wins = 0
    for seed in range(50):
        s = synthesize(seed, 128, 120)
        flat = to_gray(s.flat_reference)
        img, _ = paste(rectify(s.distorted, s.gt_flow, s.gt_mask), (128, 120), fill=1.0)
        rect = img @ np.array([0.299, 0.587, 0.114])
        wins += local_distortion(rect, flat).ld < local_distortion(to_gray(s.distorted), flat).ld
    ok = ident <= 1e-9 and sym <= 1e-9 and ld_self <= 0.05 and abs(ld_shift - 5) <= 0.5 and wins == 50
    report(8, ok, f"|ms_ssim(a,a)-1|={ident:.1e}, asym={sym:.1e}, LD(a,a)={ld_self:.3f}, "
                  f"LD(shift 5)={ld_shift:.2f}, ordering {wins}/50")
    assert ident <= 1e-9 and sym <= 1e-9
    assert ld_self <= 0.05
    assert abs(ld_shift - 5) <= 0.5
    assert wins == 50


# ---- 9 -----------------------------------------------------------------------

def test_criterion_9_end_to_end_cli(report, tmp_path):
    ds, run = tmp_path / "ds", tmp_path / "run"
    assert main(["synth", "--n", "20", "--out", str(ds), "--seed", "9"]) == 0
    assert main(["train", "--data", str(ds), "--out", str(run), "--config", str(ROOT / "configs" / "toy.yaml"),
                 "--set", "data.holdout=5", "--max-iterations", "300"]) == 0
    held = json.loads((ds / "manifest.json").read_text())["seeds"][-5:]
    pairs = []
    for s in held:
        flow = tmp_path / f"{s}.dfl"
        assert main(["predict", "--checkpoint", str(run / "checkpoint.dfnm"), "--image", str(ds / f"{s}.png"),
                     "--out", str(flow)]) == 0
        assert main(["rectify", "--image", str(ds / f"{s}.png"), "--flow", str(flow),
                     "--out", str(tmp_path / f"{s}_rect.png"), "--compare",
                     "--reference", str(ds / f"{s}_flat.png")]) == 0
        pairs.append({"rectified": f"{s}_rect.png", "reference": f"ds/{s}_flat.png", "method": "predicted",
                      "name": f"{s}"})
        pairs.append({"rectified": f"ds/{s}.png", "reference": f"ds/{s}_flat.png", "method": "distorted",
                      "name": f"{s}_in"})
    (tmp_path / "pairs.json").write_text(json.dumps({"pairs": pairs}))
    assert main(["eval", "--manifest", str(tmp_path / "pairs.json"), "--out", str(tmp_path / "eval")]) == 0
    table = (tmp_path / "eval" / "table.csv").read_text().splitlines()
    rows = [json.loads(p.read_text()) for p in sorted((tmp_path / "eval" / "pairs").iterdir())]
    ld = {r["name"]: r["ld"] for r in rows}
    better = sum(ld[str(s)] < ld[f"{s}_in"] for s in held)
    shaped = table[0] == "Method,MS-SSIM,LD" and len(table) == 3
    report(9, shaped and better >= 4, f"predicted LD below distorted on {better}/5; "
                                      + " ".join(f"{ld[str(s)]:.2f}<{ld[f'{s}_in']:.2f}" for s in held))
    assert shaped
    assert better >= 4
