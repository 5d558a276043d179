"""Two-headed fully convolutional flow/segmentation network (toy scale).

Layout::

    stem        3 x (conv7x7 -> GN -> ReLU), strides 1, 2, 2, widths c, 2c, 4c
    dilated     N residual blocks fusing a 3x3 conv and a dilated 3x3 conv
    pyramid     cascaded dilated convs (rates r1..rn); every stage output is
                tapped in parallel, concatenated with the input, projected
    decoder     2 x (upsample x2 -> GN -> ReLU -> residual block), 4c -> 2c -> c
    flow head   conv -> GN -> PReLU -> conv (linear, 2 channels)
    mask head   conv -> GN -> ReLU -> conv -> sigmoid (1 channel)

Gradients come from torch autograd; the loss gradients computed by
:mod:`dewarpflow.losses` are fed in at the two outputs.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

__all__ = [
    "ModelConfig",
    "DewarpNet",
    "CheckpointError",
    "build_model",
    "forward",
    "backward",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"DFNM"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    input_h: int = 128
    input_w: int = 120
    in_channels: int = 3
    stem_channels: int = 16
    stem_strides: tuple = (1, 2, 2)
    stem_kernel: int = 7
    norm_groups: int = 32
    dilation_rate: int = 3
    n_dilated_blocks: int = 2
    pyramid_rates: tuple = (1, 2, 4, 8)
    decoder_mode: str = "transposed"
    flow_scale: float = 8.0
    prelu_init: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.stem_strides = tuple(self.stem_strides)
        self.pyramid_rates = tuple(self.pyramid_rates)
        self.validate()

    def widths(self) -> tuple[int, int, int]:
        c = self.stem_channels
        return c, 2 * c, 4 * c

    def groups(self, channels: int) -> int:
        return min(self.norm_groups, channels)

    def validate(self):
        down = int(np.prod(self.stem_strides))
        if tuple(sorted(self.stem_strides)) != (1, 2, 2):
            raise ValueError(f"stem_strides must be a permutation of (1, 2, 2), got {self.stem_strides}")
        if self.input_h % down or self.input_w % down:
            raise ValueError(f"input_h/input_w must be divisible by {down}, got {self.input_h}x{self.input_w}")
        if self.stem_channels < 1 or self.in_channels < 1:
            raise ValueError("stem_channels and in_channels must be positive")
        if self.stem_kernel % 2 == 0:
            raise ValueError(f"stem_kernel must be odd, got {self.stem_kernel}")
        for c in self.widths():
            if c % self.groups(c):
                raise ValueError(f"norm_groups={self.norm_groups} does not divide channel count {c}")
        if self.decoder_mode not in ("transposed", "bilinear"):
            raise ValueError(f"decoder_mode must be 'transposed' or 'bilinear', got {self.decoder_mode!r}")
        if self.dilation_rate < 1 or any(r < 1 for r in self.pyramid_rates):
            raise ValueError("dilation rates must be >= 1")
        if self.n_dilated_blocks < 0:
            raise ValueError("n_dilated_blocks must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _conv(cin, cout, k=3, stride=1, dilation=1):
    return nn.Conv2d(cin, cout, k, stride, padding=dilation * (k // 2), dilation=dilation)


class ConvNormAct(nn.Sequential):
    def __init__(self, cfg: ModelConfig, cin, cout, k=3, stride=1, dilation=1, act="relu"):
        layers = [_conv(cin, cout, k, stride, dilation), nn.GroupNorm(cfg.groups(cout), cout)]
        if act == "relu":
            layers.append(nn.ReLU())
        elif act == "prelu":
            layers.append(nn.PReLU(cout, init=cfg.prelu_init))
        super().__init__(*layers)


class DilatedResBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, c: int):
        super().__init__()
        self.local = ConvNormAct(cfg, c, c, 3)
        self.dilated = ConvNormAct(cfg, c, c, 3, dilation=cfg.dilation_rate)
        self.fuse = ConvNormAct(cfg, 2 * c, c, 1, act=None)

    def forward(self, x):
        y = self.fuse(torch.cat([self.local(x), self.dilated(x)], dim=1))
        return F.relu(x + y)


class DilatedPyramid(nn.Module):
    def __init__(self, cfg: ModelConfig, c: int):
        super().__init__()
        self.stages = nn.ModuleList(ConvNormAct(cfg, c, c, 3, dilation=r) for r in cfg.pyramid_rates)
        self.project = ConvNormAct(cfg, c * (len(cfg.pyramid_rates) + 1), c, 1)

    def forward(self, x):
        taps = [x]
        h = x
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        return self.project(torch.cat(taps, dim=1))


class ResBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, c: int):
        super().__init__()
        self.a = ConvNormAct(cfg, c, c, 3)
        self.b = ConvNormAct(cfg, c, c, 3, act=None)

    def forward(self, x):
        return F.relu(x + self.b(self.a(x)))


class UpStage(nn.Module):
    def __init__(self, cfg: ModelConfig, cin: int, cout: int):
        super().__init__()
        self.mode = cfg.decoder_mode
        if self.mode == "transposed":
            self.up = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        else:
            self.up = _conv(cin, cout, 3)
        self.norm = nn.GroupNorm(cfg.groups(cout), cout)
        self.res = ResBlock(cfg, cout)

    def forward(self, x, size):
        if self.mode == "bilinear":
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        x = self.up(x)
        if x.shape[-2:] != size:
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.res(F.relu(self.norm(x)))


class DewarpNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        c1, c2, c3 = cfg.widths()
        s1, s2, s3 = cfg.stem_strides
        k = cfg.stem_kernel
        self.stem = nn.Sequential(
            ConvNormAct(cfg, cfg.in_channels, c1, k, s1),
            ConvNormAct(cfg, c1, c2, k, s2),
            ConvNormAct(cfg, c2, c3, k, s3),
        )
        self.dilated = nn.Sequential(*(DilatedResBlock(cfg, c3) for _ in range(cfg.n_dilated_blocks)))
        self.pyramid = DilatedPyramid(cfg, c3)
        self.up1 = UpStage(cfg, c3, c2)
        self.up2 = UpStage(cfg, c2, c1)
        self.flow_head = nn.Sequential(ConvNormAct(cfg, c1, c1, 3, act="prelu"), _conv(c1, 2, 3))
        self.mask_head = nn.Sequential(ConvNormAct(cfg, c1, c1, 3), _conv(c1, 1, 3))
        self._cache = None

    def forward(self, x):
        h, w = x.shape[-2:]
        f0 = self.stem[0](x - 0.5)
        f1 = self.stem[1](f0)
        f2 = self.stem[2](f1)
        z = self.pyramid(self.dilated(f2))
        z = self.up1(z, tuple(f1.shape[-2:]))
        z = self.up2(z, (h, w))
        flow = self.flow_head(z) * self.config.flow_scale
        mask = torch.sigmoid(self.mask_head(z))[:, 0]
        return flow, mask


def _init_parameters(model: DewarpNet, seed: int):
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                w = mod.weight
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
                if isinstance(mod, nn.ConvTranspose2d):
                    fan_in = w.shape[0] * w.shape[2] * w.shape[3] // 4
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * np.sqrt(2.0 / fan_in))
                mod.bias.zero_()
            elif isinstance(mod, nn.GroupNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        # small output layers so the initial prediction is near zero flow / p=0.5
        for head in (model.flow_head[-1], model.mask_head[-1]):
            head.weight.mul_(0.1)


def build_model(config: ModelConfig | None = None) -> DewarpNet:
    config = config or ModelConfig()
    model = DewarpNet(config)
    _init_parameters(model, config.seed)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_batch(model: DewarpNet, images) -> torch.Tensor:
    cfg = model.config
    dtype = next(model.parameters()).dtype
    if isinstance(images, torch.Tensor):
        x = images.to(dtype)
    else:
        arrs = [np.asarray(getattr(im, "data", im)) for im in images]
        x = torch.as_tensor(np.stack(arrs).transpose(0, 3, 1, 2).copy(), dtype=dtype)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_h, cfg.input_w):
        raise ValueError(
            f"expected batch of {cfg.in_channels}x{cfg.input_h}x{cfg.input_w} images, got {tuple(x.shape)}"
        )
    return x


def forward(model: DewarpNet, images, keep_graph: bool = True):
    """Run the network on a batch of ``ImageRaster`` (or an N x C x H x W tensor).

    Returns numpy ``(flow, mask)`` with shapes (N, 2, H, W) and (N, H, W).
    With ``keep_graph`` the outputs are cached for :func:`backward`.
    """
    x = _as_batch(model, images)
    with torch.set_grad_enabled(keep_graph):
        flow, mask = model(x)
    model._cache = (flow, mask) if keep_graph else None
    return flow.detach().numpy(), mask.detach().numpy()


def backward(model: DewarpNet, grad_flow, grad_mask) -> dict[str, np.ndarray]:
    """Back-propagate output gradients from the last :func:`forward` call.

    Returns ``{parameter name: gradient}``; parameter ``.grad`` fields are
    overwritten (not accumulated).
    """
    if model._cache is None:
        raise RuntimeError("backward() requires a preceding forward() on the same batch")
    flow, mask = model._cache
    model._cache = None
    model.zero_grad(set_to_none=False)
    gf = torch.as_tensor(np.asarray(grad_flow), dtype=flow.dtype)
    gm = torch.as_tensor(np.asarray(grad_mask), dtype=mask.dtype)
    torch.autograd.backward([flow, mask], [gf, gm])
    return {name: p.grad.detach().numpy().copy() for name, p in model.named_parameters()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: DewarpNet, meta: dict | None = None, extra: dict | None = None) -> None:
    """Write parameters (and optional extra named tensors) as little-endian f32."""
    header = {"config": asdict(model.config), "meta": meta or {}}
    tensors = [(n, p.detach()) for n, p in model.named_parameters()]
    tensors += sorted((extra or {}).items())
    buf = io.BytesIO()
    blob = json.dumps(header, sort_keys=True).encode()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        arr = np.ascontiguousarray(np.asarray(t, dtype="<f4"))
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[DewarpNet, dict, dict]:
    """Return ``(model, meta, extra tensors)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    try:
        version, n = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(buf[pos:pos + n])
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    model = DewarpNet(ModelConfig.from_dict(header["config"]))
    state = {}
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        state[name] = torch.from_numpy(tensors.pop(name))
    model.load_state_dict(state, strict=False)
    return model, header["meta"], tensors
