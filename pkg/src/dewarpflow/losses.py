"""Training losses with analytic gradients.

Flows are arrays of shape ``(..., 2, H, W)`` (channel 0 = dx), masks
``(..., H, W)``; a leading batch axis is allowed everywhere and all means run
over the whole batch.  Elementwise work stays in the input dtype, reductions
accumulate in float64.

The local smooth constraint compares displacement *trends*: for a k-pixel
window around ``i``, ``trend_i = sum_j (D_j - D_i) = boxsum(D)_i - k * D_i``.
Because the trend is linear in ``D``, the difference of predicted and true
trends is the trend of the error ``E = D - D_hat``, which a single all-ones
box convolution computes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "LossWeights",
    "LossValue",
    "LossReport",
    "GradCheck",
    "boxsum",
    "local_trend",
    "segmentation_loss",
    "displacement_loss",
    "lsc_loss",
    "lsc_loss_trends",
    "cosine_loss",
    "total_loss",
    "grad_check",
]

CLAMP_EPS = 1e-7
ZERO_NORM = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.01
    gamma: float = 0.05
    k_window: int = 3

    def __post_init__(self):
        if self.k_window < 3 or self.k_window % 2 == 0:
            raise ValueError(f"k_window must be odd and >= 3, got {self.k_window}")
        for name in ("alpha", "beta", "gamma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class LossReport:
    l_b: float
    l_d: float
    l_lsc: float
    l_cos: float
    total: float
    n_f: int

    def as_dict(self) -> dict:
        return {"l_b": self.l_b, "l_d": self.l_d, "l_lsc": self.l_lsc, "l_cos": self.l_cos, "total": self.total}


def _arr(x):
    for attr in ("values",):
        if hasattr(x, attr):
            return np.asarray(getattr(x, attr))
    if hasattr(x, "dx"):
        return np.stack([x.dx, x.dy])
    x = np.asarray(x)
    return x if x.dtype in (np.float32, np.float64) else x.astype(np.float64)


def _check_flow(pred, gt):
    if pred.shape != gt.shape or pred.ndim < 3 or pred.shape[-3] != 2:
        raise ValueError(f"flow shapes must match as (..., 2, H, W): {pred.shape} vs {gt.shape}")


def boxsum(x: np.ndarray, k_window: int) -> np.ndarray:
    """Sum over a ``k_window`` square around each pixel, zero padded, stride 1.

    Terms are added in row-major window order.
    """
    r = k_window // 2
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad)
    out = np.zeros_like(x)
    for dy in range(k_window):
        for dx in range(k_window):
            out = out + xp[..., dy:dy + h, dx:dx + w]
    return out


def local_trend(flow, k_window: int = 3) -> np.ndarray:
    """Per-pixel displacement trend ``boxsum(D) - k*D``, with ``k = k_window**2``."""
    d = _arr(flow)
    if k_window < 3 or k_window % 2 == 0:
        raise ValueError(f"k_window must be odd and >= 3, got {k_window}")
    return boxsum(d, k_window) - (k_window * k_window) * d


def segmentation_loss(pred, gt, eps: float = CLAMP_EPS) -> LossValue:
    """Binary cross entropy averaged over all pixels."""
    p, y = _arr(pred), _arr(gt)
    if p.shape != y.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {y.shape}")
    pc = np.clip(p, eps, 1 - eps)
    n = p.size
    terms = y * np.log(pc) + (1 - y) * np.log(1 - pc)
    value = -float(np.sum(terms, dtype=np.float64)) / n
    grad = -(y / pc - (1 - y) / (1 - pc)) / n
    grad = np.where((p > eps) & (p < 1 - eps), grad, 0).astype(p.dtype)
    return LossValue(value, grad)


def _foreground(gt_mask, like):
    m = (_arr(gt_mask) >= 0.5).astype(like.dtype)
    return m[..., None, :, :], int(m.sum())


def displacement_loss(pred, gt, gt_mask) -> LossValue:
    """Mean over foreground pixels of ``|dx error| + |dy error|``."""
    p, g = _arr(pred), _arr(gt)
    _check_flow(p, g)
    m, n_f = _foreground(gt_mask, p)
    if n_f == 0:
        return LossValue(0.0, np.zeros_like(p), True)
    err = p - g
    value = float(np.sum(np.abs(err) * m, dtype=np.float64)) / n_f
    return LossValue(value, (np.sign(err) * m / n_f).astype(p.dtype))


def lsc_loss(pred, gt, gt_mask, k_window: int = 3) -> LossValue:
    """Local smooth constraint via the box-convolution identity.

    ``E = gt - pred``; loss is the foreground mean of ``|boxsum(E) - k*E|``
    summed over both channels.  The window itself is unmasked.
    """
    p, g = _arr(pred), _arr(gt)
    _check_flow(p, g)
    m, n_f = _foreground(gt_mask, p)
    if n_f == 0:
        return LossValue(0.0, np.zeros_like(p), True)
    k = k_window * k_window
    e = g - p
    resid = boxsum(e, k_window) - k * e
    value = float(np.sum(np.abs(resid) * m, dtype=np.float64)) / n_f
    s = np.sign(resid) * m / n_f
    # boxsum is self-adjoint under zero padding; dE/dpred = -1
    grad = -(boxsum(s, k_window) - k * s)
    return LossValue(value, grad.astype(p.dtype))


def lsc_loss_trends(pred, gt, gt_mask, k_window: int = 3) -> float:
    """LSC value from separately computed trends (no gradient).

    Each channel's trend is summed offset by offset as ``D_j - D_i`` with
    zero padding, and the predicted trend is subtracted from the true one.
    Used to cross-check :func:`lsc_loss`.
    """
    p, g = _arr(pred), _arr(gt)
    _check_flow(p, g)
    keep = _arr(gt_mask) >= 0.5
    n_f = int(keep.sum())
    if n_f == 0:
        return 0.0
    r = k_window // 2
    h, w = p.shape[-2:]

    def trend(d):
        dp = np.pad(d, [(0, 0)] * (d.ndim - 2) + [(r, r), (r, r)])
        out = np.zeros_like(d)
        for a in range(k_window):
            for b in range(k_window):
                out += dp[..., a:a + h, b:b + w] - d
        return out

    diff = np.abs(trend(g) - trend(p)).sum(axis=-3)
    return float(diff[keep].sum()) / n_f


def cosine_loss(pred, gt) -> LossValue:
    """``1 - mean cos(angle(gt, pred))`` over all pixels.

    Pixels where both vectors have norm below 1e-6 count as aligned
    (cos = 1); where only one does, cos = 0.  Neither case has a gradient.
    """
    p, g = _arr(pred), _arr(gt)
    _check_flow(p, g)
    pn = np.sqrt(p[..., 0, :, :] ** 2 + p[..., 1, :, :] ** 2)
    gn = np.sqrt(g[..., 0, :, :] ** 2 + g[..., 1, :, :] ** 2)
    p_ok, g_ok = pn >= ZERO_NORM, gn >= ZERO_NORM
    both = p_ok & g_ok
    n = pn.size
    with np.errstate(invalid="ignore", divide="ignore"):
        pu = np.where(both[..., None, :, :], p / pn[..., None, :, :], 0)
        gu = np.where(both[..., None, :, :], g / gn[..., None, :, :], 0)
    cos = np.sum(pu * gu, axis=-3)
    cos = np.where(both, cos, np.where(~p_ok & ~g_ok, 1.0, 0.0))
    value = 1.0 - float(np.sum(cos, dtype=np.float64)) / n
    # d(pu.gu)/dp = (gu - cos*pu) / |p|
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = -(gu - cos[..., None, :, :] * pu) / pn[..., None, :, :] / n
    grad = np.where(both[..., None, :, :], grad, 0)
    return LossValue(value, grad.astype(p.dtype))


def total_loss(pred_flow, pred_mask, gt_flow, gt_mask, weights: LossWeights | None = None):
    """Weighted objective ``L_B + alpha*L_D + beta*L_LSC + gamma*L_cos``.

    The cosine term compares the ground truth with the probability-gated
    prediction ``pred_mask * pred_flow``, so it trains both heads.

    Returns ``(report, grad_flow, grad_mask)``.
    """
    w = weights or LossWeights()
    pf, pm = _arr(pred_flow), _arr(pred_mask)
    gf, gm = _arr(gt_flow), _arr(gt_mask)
    if pm.shape != pf.shape[:-3] + pf.shape[-2:]:
        raise ValueError(f"mask shape {pm.shape} does not match flow shape {pf.shape}")
    lb = segmentation_loss(pm, gm)
    ld = displacement_loss(pf, gf, gm)
    ll = lsc_loss(pf, gf, gm, w.k_window)
    gated = pf * pm[..., None, :, :]
    lc = cosine_loss(gated, gf)
    total = lb.value + w.alpha * ld.value + w.beta * ll.value + w.gamma * lc.value
    grad_flow = w.alpha * ld.grad + w.beta * ll.grad + w.gamma * lc.grad * pm[..., None, :, :]
    grad_mask = lb.grad + w.gamma * np.sum(lc.grad * pf, axis=-3)
    n_f = int((gm >= 0.5).sum())
    report = LossReport(lb.value, ld.value, ll.value, lc.value, total, n_f)
    return report, grad_flow.astype(pf.dtype), grad_mask.astype(pm.dtype)


class GradCheck(NamedTuple):
    max_rel_err: float
    n_coords: int


def grad_check(loss_fn: Callable, point, step: float = 1e-5, grad=None,
               rng: np.random.Generator | None = None, max_full: int = 10_000) -> GradCheck:
    """Compare an analytic gradient with central differences.

    ``loss_fn(x)`` returns ``(value, grad)``; ``grad`` overrides the analytic
    gradient (used to inject faults).  Above ``max_full`` coordinates a random
    1% subsample is checked.  Relative error is ``|a - n| / max(|n|, 1e-8)``
    with ``n`` the finite-difference estimate, so a gradient that is off by a
    factor of two reports 1.0.  Coordinates where both ``a`` and ``n`` sit
    below the difference quotient's rounding noise (``16 * eps * |L| / h``
    for the point's dtype) count as agreeing: exact subgradient cancellation
    in the L1 terms otherwise divides noise by the floor.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(point, copy=True)
    analytic = np.asarray(loss_fn(x)[1] if grad is None else grad).reshape(-1)
    flat = x.reshape(-1)
    if flat.size > max_full:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max(1, flat.size // 100), replace=False)
    else:
        coords = np.arange(flat.size)
    eps = float(np.finfo(x.dtype).eps) if x.dtype.kind == "f" else float(np.finfo(float).eps)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(flat[i])
        up = loss_fn(x)[0]
        flat[i] = orig - step
        lo = float(flat[i])
        down = loss_fn(x)[0]
        flat[i] = orig
        # divide by the step actually representable in the point's dtype
        num = (float(up) - float(down)) / (hi - lo)
        a = float(analytic[i])
        noise = 16 * eps * max(abs(float(up)), abs(float(down)), 1.0) / (hi - lo)
        if abs(a) <= noise and abs(num) <= noise:
            continue
        worst = max(worst, abs(a - num) / max(abs(num), 1e-8))
    return GradCheck(worst, len(coords))
