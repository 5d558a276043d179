"""
MS-SSIM and local distortion
============================

Score a distorted photo and its rectification against the flat page.
Local distortion is the mean length of a dense correspondence field, so a
known shift shows up as its length.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dewarpflow.flow_core import to_gray
from dewarpflow.metrics import evaluate_pair, flow_to_rgb, local_distortion
from dewarpflow.rectifier import paste, rectify
from dewarpflow.synthgen import generate_flat_document, synthesize

page = to_gray(generate_flat_document(2, 200, 200))
moved = np.roll(page, (3, 4), axis=(0, 1))
print("LD of a (4, 3) shift:", round(local_distortion(page[8:-8, 8:-8], moved[8:-8, 8:-8]).ld, 2))

s = synthesize(11, 128, 120)
img, _ = paste(rectify(s.distorted, s.gt_flow, s.gt_mask), (128, 120), fill=1.0)
for name, im in [("distorted", s.distorted.data), ("rectified", img)]:
    rep = evaluate_pair(im, s.flat_reference)
    print(f"{name:10s} MS-SSIM {rep.ms_ssim:.3f}  LD {rep.ld:.2f}  {rep.flags}")

res = local_distortion(to_gray(s.distorted), to_gray(s.flat_reference))
fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
axes[0].imshow(s.distorted.data)
axes[1].imshow(flow_to_rgb(res.field) * res.region[..., None])
for ax, t in zip(axes, ["distorted", "correspondence on the page"]):
    ax.set_title(t)
    ax.axis("off")
fig.tight_layout()
fig.savefig("metrics.png", dpi=100)
