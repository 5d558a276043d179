"""
Losses and their gradients
==========================

The four training terms and the combined objective, checked against
central differences.  A doubled gradient is caught immediately.
"""

import numpy as np

from dewarpflow.losses import (
    cosine_loss,
    displacement_loss,
    grad_check,
    local_trend,
    lsc_loss,
    lsc_loss_trends,
    total_loss,
)

rng = np.random.default_rng(0)
pred, gt = rng.normal(size=(2, 2, 8, 8)) * 2
mask = (rng.random((8, 8)) > 0.3).astype(float)
prob = rng.uniform(0.05, 0.95, size=(8, 8))

report, g_flow, g_mask = total_loss(pred, prob, gt, mask)
print(report)

# the trend of a constant field is zero except where the window hangs off the edge
print(local_trend(np.ones((2, 5, 5)))[0])

# box-convolution form and trend-difference form agree
print("lsc", lsc_loss(pred, gt, mask).value, lsc_loss_trends(pred, gt, mask))

for name, fn in [("displacement", lambda f: displacement_loss(f, gt, mask)),
                 ("lsc", lambda f: lsc_loss(f, gt, mask)),
                 ("cosine", lambda f: cosine_loss(f, gt))]:
    ok = grad_check(fn, pred)
    bug = grad_check(fn, pred, grad=2 * fn(pred)[1])
    print(f"{name:13s} rel err {ok.max_rel_err:.1e}   with 2x bug {bug.max_rel_err:.2f}")

# cosine is blind to length, so gating the flow by the mask sends it nothing
scaled = total_loss(pred, prob * 0.5, gt, mask)[0].l_cos
print("l_cos unchanged by halving the mask:", np.isclose(scaled, report.l_cos))
