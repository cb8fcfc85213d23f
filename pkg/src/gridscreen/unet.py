"""Small symmetric U-Net noise predictor over six-channel grid images.

Parameters live in a plain ``OrderedDict[str, Tensor]`` so the training loop,
the gradient checker and the checkpoint writer can all work with named tensors.
Gradients come from torch's reverse-mode autodiff.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.func import functional_call
from torch.nn import functional as F

DenoiserParams = "OrderedDict[str, torch.Tensor]"


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 6
    base_width: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    pad_to: int = 8
    norm_groups: int = 8  # 0 disables group normalization

    def __post_init__(self):
        if self.base_width < 8:
            raise ValueError("base_width must be at least 8")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.pad_to % (2**self.depth):
            raise ValueError(f"pad_to={self.pad_to} is not a multiple of 2**depth")

    @classmethod
    def for_buses(cls, n_bus: int, **kw) -> "UNetConfig":
        depth = kw.get("depth", cls.depth)
        mult = max(4, 2**depth)
        return cls(pad_to=mult * math.ceil(n_bus / mult), **kw)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(groups: int, ch: int) -> nn.Module:
    if groups == 0:
        return nn.Identity()
    return nn.GroupNorm(math.gcd(groups, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = _norm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = _norm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        w, e, g = config.base_width, config.time_embed_dim, config.norm_groups
        widths = [w * 2**level for level in range(config.depth + 1)]
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.inc = nn.Conv2d(config.in_channels, w, 3, padding=1)
        self.enc = nn.ModuleList(ResBlock(widths[i], widths[i], e, g) for i in range(config.depth))
        self.down = nn.ModuleList(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
                                  for i in range(config.depth))
        self.mid = ResBlock(widths[-1], widths[-1], e, g)
        self.up = nn.ModuleList(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in range(config.depth))
        self.dec = nn.ModuleList(ResBlock(2 * widths[i], widths[i], e, g) for i in range(config.depth))
        self.out_norm = _norm(g, w)
        self.out = nn.Conv2d(w, config.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(x.dtype))
        h = self.inc(x)
        skips = []
        for block, down in zip(self.enc, self.down):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for level in reversed(range(self.config.depth)):
            h = self.up[level](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.dec[level](torch.cat([h, skips[level]], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


def init_params(config: UNetConfig, seed: int = 0, dtype=torch.float32) -> DenoiserParams:
    """Fan-in scaled uniform initialization (torch defaults), deterministic in ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet(config)
    return OrderedDict((k, v.detach().to(dtype).clone()) for k, v in model.state_dict().items())


_TEMPLATES: dict[UNetConfig, UNet] = {}


def _template(config: UNetConfig) -> UNet:
    if config not in _TEMPLATES:
        with torch.random.fork_rng(devices=[]):
            _TEMPLATES[config] = UNet(config)
    return _TEMPLATES[config]


def _as_batch(x: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor, bool]:
    single = x.dim() == 3
    if single:
        x = x[None]
    t = torch.as_tensor(t).reshape(-1)
    if t.numel() == 1 and x.shape[0] > 1:
        t = t.expand(x.shape[0])
    return x, t, single


def unet_forward(params: DenoiserParams, x_t: torch.Tensor, t, config: UNetConfig) -> torch.Tensor:
    """Noise estimate for a (batch of) 6 x N x N tensor(s) at timestep(s) ``t``."""
    x, tb, single = _as_batch(torch.as_tensor(x_t), t)
    n = x.shape[-1]
    if x.shape[1] != config.in_channels or x.shape[-2] != n or n > config.pad_to:
        raise ShapeMismatch(f"input {tuple(x.shape)} does not fit config {config}")
    x = x.to(next(iter(params.values())).dtype)
    pad = config.pad_to - n
    xp = F.pad(x, (0, pad, 0, pad))
    out = functional_call(_template(config), params, (xp, tb))[..., :n, :n]
    return out[0] if single else out


def unet_backward(params: DenoiserParams, x_t, t, upstream_grad: torch.Tensor, config: UNetConfig,
                  frozen: frozenset[str] | set[str] = frozenset()) -> dict[str, torch.Tensor]:
    """Vector-Jacobian product of the forward map w.r.t. every non-frozen parameter."""
    live = OrderedDict((k, v.detach().clone().requires_grad_(k not in frozen)) for k, v in params.items())
    out = unet_forward(live, x_t, t, config)
    names = [k for k in live if k not in frozen]
    grads = torch.autograd.grad(out, [live[k] for k in names], grad_outputs=upstream_grad.to(out.dtype),
                                allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(live[k])) for k, g in zip(names, grads)}


def param_count(params: DenoiserParams) -> int:
    return sum(int(v.numel()) for v in params.values())


# -- checkpoint container ------------------------------------------------------------------
# layout: u64 little-endian header length | JSON header | raw little-endian f32 tensor bytes

@dataclass
class Checkpoint:
    params: DenoiserParams
    config: UNetConfig
    meta: dict


def save_checkpoint(path: str | Path, params: DenoiserParams, config: UNetConfig, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, tensor in params.items():
        data = tensor.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C")
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset,
                        "nbytes": len(data), "dtype": "f32"})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"tensors": entries, "config": asdict(config), "meta": meta or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen])
    body = raw[8 + hlen:]
    params = OrderedDict()
    for e in header["tensors"]:
        if e["dtype"] != "f32":
            raise ValueError(f"unsupported dtype {e['dtype']}")
        arr = np.frombuffer(body, dtype="<f4", count=int(np.prod(e["shape"], dtype=int)), offset=e["offset"])
        params[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return Checkpoint(params=params, config=UNetConfig(**header["config"]), meta=header["meta"])
