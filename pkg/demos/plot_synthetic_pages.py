"""
Synthetic warped pages
======================

Generate a few warped documents and look at what comes with each one:
the distorted photo, its ground-truth displacement flow, the page mask and
the flat page the flow maps back to.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dewarpflow.metrics import flow_to_rgb
from dewarpflow.synthgen import synthesize

seeds = [0, 7, 21]
fig, axes = plt.subplots(len(seeds), 4, figsize=(10, 2.8 * len(seeds)))
for row, seed in zip(axes, seeds):
    s = synthesize(seed, 128, 120, n_perturbs=4)
    # flow is stored as two planes; color encodes direction, brightness magnitude
    field = np.stack([s.gt_flow.dx, s.gt_flow.dy], axis=-1)
    panels = [s.distorted.data, flow_to_rgb(field), s.gt_mask.values, s.flat_reference.data]
    for ax, img, title in zip(row, panels, ["distorted", "flow", "mask", "flat"]):
        ax.imshow(img, cmap="gray" if img.ndim == 2 else None)
        ax.set_title(f"{title} ({seed})", fontsize=8)
        ax.axis("off")

fig.tight_layout()
fig.savefig("synthetic_pages.png", dpi=100)

# more perturbations bend the page harder
for n in (0, 2, 8):
    s = synthesize(3, 128, 120, n_perturbs=n)
    mag = np.hypot(s.gt_flow.dx, s.gt_flow.dy)[s.gt_mask.values == 1]
    print(f"n_perturbs={n}: mean |flow| {mag.mean():.1f} px, spread {mag.std():.2f} px")
