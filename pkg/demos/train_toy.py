"""
A short training run
====================

Overfit the flow network on a handful of synthetic pages, then rectify one
of them with the predicted flow.  Uses the settings in configs/toy.yaml but
stops early so it finishes in a couple of minutes.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dewarpflow.cli import load_config
from dewarpflow.flow_core import FlowField, ForegroundMask
from dewarpflow.net import ModelConfig, forward
from dewarpflow.rectifier import paste, rectify
from dewarpflow.synthgen import synthesize
from dewarpflow.training import TrainConfig, train

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "toy.yaml")
samples = [synthesize(seed, 128, 120) for seed in range(10)]
data = (np.stack([s.distorted.data.transpose(2, 0, 1) for s in samples]).astype(np.float32),
        np.stack([s.gt_flow.as_array(np.float32) for s in samples]),
        np.stack([s.gt_mask.values for s in samples]))

model, history = train(data, ModelConfig.from_dict(cfg["model"]), TrainConfig.from_dict(cfg["train"]),
                       max_iterations=60)
for row in history[::10]:
    print(f"epoch {row['epoch']:3d}  total {row['total']:.4f}  L_D {row['l_d']:.3f}")

s = samples[0]
flow, prob = forward(model, [s.distorted], keep_graph=False)
mask = (prob[0] >= 0.5).astype(np.float32)
pred = rectify(s.distorted, FlowField(flow[0, 0] * mask, flow[0, 1] * mask), ForegroundMask(mask))
img, _ = paste(pred, (128, 120), fill=1.0)

fig, axes = plt.subplots(1, 3, figsize=(9, 3.4))
for ax, im, t in zip(axes, [s.distorted.data, img, s.flat_reference.data], ["distorted", "predicted", "flat"]):
    ax.imshow(np.clip(im, 0, 1))
    ax.set_title(t)
    ax.axis("off")
fig.tight_layout()
fig.savefig("train_toy.png", dpi=100)
