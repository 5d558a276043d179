"""Deterministic trainer for :class:`dewarpflow.net.DewarpNet`."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .flow_core import load_flow, load_image
from .losses import LossWeights, total_loss
from .net import DewarpNet, ModelConfig, build_model, load_checkpoint, save_checkpoint

__all__ = ["TrainConfig", "TrainingDiverged", "load_dataset", "train", "HISTORY_COLUMNS"]

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "l_b", "l_d", "l_lsc", "l_cos", "total", "lr")
CHECKPOINT_NAME = "checkpoint.dfnm"
HISTORY_NAME = "history.csv"


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr: float = 2e-4
    lr_halve_every: int = 10
    epochs: int = 30
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.lr_halve_every < 1 or self.epochs < 0:
            raise ValueError("lr_halve_every must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.lr_halve_every)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, component: str, value: float):
        super().__init__(f"non-finite {component}={value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.component = epoch, batch, component


def load_dataset(root, seeds=None):
    """Load ``(images, flows, masks)`` arrays from a synthesized dataset directory.

    Shapes: (N, 3, H, W), (N, 2, H, W), (N, H, W), all float32.
    """
    root = Path(root)
    if seeds is None:
        manifest = root / "manifest.json"
        if manifest.exists():
            seeds = json.loads(manifest.read_text())["seeds"]
        else:
            seeds = sorted(int(p.stem) for p in root.glob("*.dfl") if p.stem.isdigit())
    images, flows, masks = [], [], []
    for s in seeds:
        img = load_image(root / f"{s}.png")
        flow, mask = load_flow(root / f"{s}.dfl")
        images.append(img.data.transpose(2, 0, 1))
        flows.append(flow.as_array(np.float32))
        masks.append(np.array(mask.values))
    if not images:
        raise ValueError(f"no samples found in {root}")
    return np.stack(images), np.stack(flows), np.stack(masks)


def _adam_state(opt: torch.optim.Adam, model: DewarpNet) -> tuple[dict, dict]:
    extra, steps = {}, {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            extra[f"adam.m.{name}"] = st["exp_avg"].detach()
            extra[f"adam.v.{name}"] = st["exp_avg_sq"].detach()
            steps[name] = int(st["step"])
    return extra, steps


def _restore_adam(opt: torch.optim.Adam, model: DewarpNet, extra: dict, steps: dict):
    for name, p in model.named_parameters():
        if name in steps:
            opt.state[p] = {
                "step": torch.tensor(float(steps[name])),
                "exp_avg": torch.from_numpy(extra[f"adam.m.{name}"]),
                "exp_avg_sq": torch.from_numpy(extra[f"adam.v.{name}"]),
            }


def _write_history(path: Path, history: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in HISTORY_COLUMNS})


def train(data, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
          out_dir=None, resume=None, max_iterations: int | None = None):
    """Train from scratch (or resume) and return ``(model, history)``.

    ``data`` is a dataset directory or an ``(images, flows, masks)`` tuple as
    returned by :func:`load_dataset`.  ``history`` holds one dict per epoch
    with the epoch-averaged loss components and the learning rate.  With
    ``out_dir`` a checkpoint and ``history.csv`` are rewritten every epoch.
    """
    tc = train_config or TrainConfig()
    images, flows, masks = load_dataset(data) if isinstance(data, (str, Path)) else data
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")
    if n < tc.batch_size:
        raise ValueError(f"dataset has {n} samples, fewer than batch_size={tc.batch_size}")

    history: list[dict] = []
    start_epoch = 0
    if resume is not None:
        model, meta, extra = load_checkpoint(resume)
        history = meta.get("history", [])
        start_epoch = meta.get("epoch", -1) + 1
    else:
        model = build_model(model_config or ModelConfig())
    cfg = model.config
    if images.shape[1:] != (cfg.in_channels, cfg.input_h, cfg.input_w):
        raise ValueError(f"dataset images {images.shape[1:]} do not match model input "
                         f"{(cfg.in_channels, cfg.input_h, cfg.input_w)}")

    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=(0.9, 0.999), eps=1e-8)
    if resume is not None:
        _restore_adam(opt, model, extra, meta.get("adam_steps", {}))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    iteration = 0
    x_all = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    for epoch in range(start_epoch, tc.epochs):
        lr = tc.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([tc.seed, epoch]).permutation(n)
        sums = dict.fromkeys(("l_b", "l_d", "l_lsc", "l_cos", "total"), 0.0)
        n_batches = 0
        for b, start in enumerate(range(0, n, tc.batch_size)):
            if max_iterations is not None and iteration >= max_iterations:
                break
            idx = order[start:start + tc.batch_size]
            model.train()
            flow, mask = model(x_all[idx])
            pf, pm = flow.detach().numpy(), mask.detach().numpy()
            report, g_flow, g_mask = total_loss(pf, pm, flows[idx], masks[idx], tc.weights)
            for k in sums:
                v = getattr(report, k)
                if not np.isfinite(v):
                    raise TrainingDiverged(epoch, b, k, v)
                sums[k] += v
            opt.zero_grad(set_to_none=False)
            torch.autograd.backward([flow, mask], [torch.from_numpy(g_flow), torch.from_numpy(g_mask)])
            if lr > 0:
                opt.step()
            n_batches += 1
            iteration += 1
        if n_batches == 0:
            break
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "lr": lr}
        history.append(row)
        log.info("epoch %d: total=%.5f l_d=%.4f lr=%.2e", epoch, row["total"], row["l_d"], lr)
        if out is not None:
            extra_t, steps = _adam_state(opt, model)
            meta = {"epoch": epoch, "history": history, "adam_steps": steps, "train_config": _tc_dict(tc)}
            save_checkpoint(out / CHECKPOINT_NAME, model, meta, extra_t)
            _write_history(out / HISTORY_NAME, history)
    model.eval()
    return model, history


def _tc_dict(tc: TrainConfig) -> dict:
    d = asdict(tc)
    d["weights"] = asdict(tc.weights)
    return d
