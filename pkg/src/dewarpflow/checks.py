"""Self-check suites behind ``dewarpflow check``.

Each suite returns a list of :class:`CheckResult`.  ``inject`` names a loss
whose analytic gradient is doubled before checking; it exists so the failure
path can be exercised from tests and from the ``DEWARPFLOW_INJECT_GRAD_BUG``
environment variable.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .flow_core import FlowField, ForegroundMask, ImageRaster
from .losses import (
    LossWeights,
    cosine_loss,
    displacement_loss,
    grad_check,
    lsc_loss,
    lsc_loss_trends,
    segmentation_loss,
    total_loss,
)

__all__ = ["CheckResult", "grad_suite", "lsc_suite", "tri_suite", "network_check", "run_suites", "SUITES"]

GRAD_TOL = 1e-4
NETWORK_TOL = 1e-3
LSC_TOL = 1e-9
TRI_TOL = 2 / 255
INJECT_ENV = "DEWARPFLOW_INJECT_GRAD_BUG"


@dataclass
class CheckResult:
    suite: str
    loss: str
    max_rel_err: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def as_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def _point(rng, shape=(2, 8, 8)):
    flow = rng.normal(size=shape) * 2
    gt = rng.normal(size=shape) * 2
    mask = (rng.random(shape[1:]) > 0.3).astype(float)
    prob = rng.uniform(0.05, 0.95, size=shape[1:])
    return flow, gt, mask, prob


def grad_suite(seed: int = 0, inject: str | None = None, network: bool = True) -> list[CheckResult]:
    """Central-difference checks of every loss at a random 8x8 float64 point."""
    inject = inject if inject is not None else os.environ.get(INJECT_ENV)
    rng = np.random.default_rng(seed)
    flow, gt, mask, prob = _point(rng)
    w = LossWeights()
    cases = {
        "segmentation": (lambda p: segmentation_loss(p, mask), prob),
        "displacement": (lambda f: displacement_loss(f, gt, mask), flow),
        "lsc": (lambda f: lsc_loss(f, gt, mask), flow),
        "cosine": (lambda f: cosine_loss(f, gt), flow),
        "total_flow": (lambda f: _total(f, prob, gt, mask, w, 0), flow),
        "total_mask": (lambda p: _total(flow, p, gt, mask, w, 1), prob),
    }
    out = []
    for name, (fn, x) in cases.items():
        grad = None
        if inject and name.startswith(inject):
            grad = 2 * np.asarray(fn(x)[1])
        r = grad_check(fn, x, grad=grad)
        out.append(CheckResult("grad", name, r.max_rel_err, r.n_coords, GRAD_TOL))
    if network:
        out.append(network_check(seed))
    return out


def _total(flow, prob, gt, mask, w, which):
    report, gf, gm = total_loss(flow, prob, gt, mask, w)
    return report.total, (gf, gm)[which]


def network_check(seed: int = 0) -> CheckResult:
    """Every parameter of a tiny float64 network against central differences."""
    import torch

    from .net import ModelConfig, backward, build_model, forward

    cfg = ModelConfig(input_h=8, input_w=8, stem_channels=2, pyramid_rates=(1, 2), n_dilated_blocks=1, seed=seed)
    model = build_model(cfg).double()
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((1, 3, 8, 8)))
    rf, rm = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(1, 8, 8))

    def scalar():
        with torch.no_grad():
            f, m = model(x)
        return float((f.numpy() * rf).sum() + (m.numpy() * rm).sum())

    forward(model, x)
    grads = backward(model, rf, rm)
    worst, n, h = 0.0, 0, 1e-6
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            num = (up - down) / (2 * h)
            n += 1
            if abs(num) < 1e-7 and abs(g[i]) < 1e-7:
                continue
            worst = max(worst, abs(g[i] - num) / max(abs(num), 1e-8))
    return CheckResult("grad", "network", float(worst), n, NETWORK_TOL)


def lsc_suite(n: int = 200, seed: int = 0) -> list[CheckResult]:
    """Box-convolution LSC against the trend-difference form on random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        h, w = rng.integers(4, 33, size=2)
        k = int(rng.choice([3, 5]))
        pred, gt = rng.normal(size=(2, 2, h, w)) * 3
        mask = (rng.random((h, w)) > rng.uniform(0.1, 0.9)).astype(float)
        if not mask.any():
            mask[h // 2, w // 2] = 1
        worst = max(worst, abs(lsc_loss(pred, gt, mask, k).value - lsc_loss_trends(pred, gt, mask, k)))
    return [CheckResult("lsc", "lsc_identity", worst, n, LSC_TOL)]


def smooth_instance(seed: int, size: int = 14, amp: float = 2.0):
    """Smooth image, smooth random flow and a full mask of side ``size``."""
    rng = np.random.default_rng(seed)
    img = ImageRaster(gaussian_filter(rng.random((size, size, 3)), (1, 1, 0)))
    f = gaussian_filter(rng.normal(size=(2, size, size)), (0, 3, 3), mode="nearest")
    f *= amp / max(np.abs(f).max(), 1e-12)
    return img, FlowField(f[0], f[1]), ForegroundMask.full(size, size)


def tri_suite(n: int = 20, seed: int = 0) -> list[CheckResult]:
    """Grid triangulation against the Delaunay pipeline; reports the worst mean |diff|."""
    from .rectifier import rectify, rectify_delaunay

    rng = np.random.default_rng(seed)
    worst, pixels = 0.0, 0
    for _ in range(n):
        size = int(rng.integers(8, 17))
        img, flow, mask = smooth_instance(int(rng.integers(2**31)), size)
        a, b = rectify(img, flow, mask), rectify_delaunay(img, flow, mask)
        if a.translation != b.translation or a.coverage.shape != b.coverage.shape:
            worst = float("inf")
            continue
        both = a.coverage & b.coverage
        pixels += int(both.sum())
        if both.sum() < 0.8 * a.coverage.sum():
            worst = float("inf")
            continue
        worst = max(worst, float(np.abs(a.image.data - b.image.data)[both].mean()))
    return [CheckResult("tri", "grid_vs_delaunay", worst, pixels, TRI_TOL)]


SUITES = {"grad": grad_suite, "lsc": lsc_suite, "tri": tri_suite}


def run_suites(which: str = "all", seed: int = 0, inject: str | None = None) -> list[CheckResult]:
    if which not in (*SUITES, "all"):
        raise ValueError(f"unknown suite {which!r}")
    names = list(SUITES) if which == "all" else [which]
    results = []
    for name in names:
        results += grad_suite(seed, inject) if name == "grad" else SUITES[name](seed=seed)
    return results
