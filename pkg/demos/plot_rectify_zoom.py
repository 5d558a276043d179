"""
Rectifying with a flow, and zooming it
======================================

Push every page pixel along its displacement and fill the gaps by
rasterizing the triangles between neighbors.  The same low-resolution flow
can be enlarged to rectify a higher-resolution copy of the photo.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dewarpflow.flow_core import ImageRaster, resize_bilinear
from dewarpflow.rectifier import paste, rectify, rectify_scaled
from dewarpflow.synthgen import AugmentSpec, synthesize

s = synthesize(5, 128, 120, 4, AugmentSpec(hue_jitter=0, sat_jitter=0, val_jitter=0))

low = rectify(s.distorted, s.gt_flow, s.gt_mask)
img, covered = paste(low, (128, 120), fill=1.0)
err = np.abs(img - s.flat_reference.data)[covered].mean()
print(f"canvas {low.coverage.shape}, offset {low.translation}, mean error {err * 255:.2f}/255")

# a 2x photo: the flow is resampled and its vectors doubled
photo = ImageRaster(resize_bilinear(s.distorted.data, 256, 240))
high = rectify_scaled(photo, s.gt_flow, s.gt_mask, 2.0)
big, _ = paste(high, (256, 240), fill=1.0)
print(f"lambda=2 canvas {high.coverage.shape}, offset {high.translation}")

fig, axes = plt.subplots(1, 4, figsize=(12, 3.4))
for ax, im, title in zip(axes, [s.distorted.data, img, big, s.flat_reference.data],
                         ["distorted", "rectified", "rectified x2", "flat"]):
    ax.imshow(np.clip(im, 0, 1))
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig("rectify_zoom.png", dpi=100)
