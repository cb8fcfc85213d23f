"""Residual denoising diffusion over grid images.

The quantity being generated is the residual between the critical state and
the base state (``y0 - x0``), where ``x0`` is the base image with its target
channels initialized to copies of the base channels. During training the
residual image (base channels kept as the conditioning signal) is diffused
with Gaussian noise on the target channels only, and the U-Net learns that
noise. Sampling runs the ancestral chain with the base channels pinned to
their noise-free forward trajectory and returns ``x0 + residual``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import BASE_CHANNELS, TARGET_CHANNELS
from .unet import DenoiserParams, UNet, UNetConfig, init_params, unet_forward


class BadRange(ValueError):
    pass


class BadTimestep(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; arrays are indexed by ``t - 1`` for t = 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def alpha_bar_at(self, t):
        """alpha_bar_t with the convention alpha_bar_0 = 1; accepts ints or arrays."""
        t = np.asarray(t)
        if np.any((t < 0) | (t > self.T)):
            raise BadTimestep(f"timestep outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise BadRange(f"invalid schedule T={T}, beta=[{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta))


def residual_noise(y0, x0):
    """Signed elementwise discrepancy ``y0 - x0``."""
    if tuple(y0.shape) != tuple(x0.shape):
        raise ShapeMismatch(f"{tuple(y0.shape)} vs {tuple(x0.shape)}")
    return y0 - x0


def _bcast(coef, like):
    """Per-sample coefficients shaped to broadcast over a (B, C, H, W) tensor."""
    if np.ndim(coef) == 0:
        return float(coef)
    shape = (-1,) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(coef, dtype=like.dtype).reshape(shape)
    return np.asarray(coef).reshape(shape)


def forward_diffuse(x0, eps, t, sched: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` for scalar or per-sample ``t`` in [0, T]."""
    abar = sched.alpha_bar_at(t)
    return _bcast(np.sqrt(abar), x0) * x0 + _bcast(np.sqrt(1.0 - abar), x0) * eps


def base_image(y0):
    """x0: the base channels of ``y0`` copied into the target slots."""
    x0 = y0.clone() if isinstance(y0, torch.Tensor) else np.array(y0, copy=True)
    x0[..., list(TARGET_CHANNELS), :, :] = y0[..., list(BASE_CHANNELS), :, :]
    return x0


def diffusion_pair(y0):
    """Return (x0, clean image) where the clean image holds base channels + residual."""
    x0 = base_image(y0)
    clean = residual_noise(y0, x0)
    clean[..., list(BASE_CHANNELS), :, :] = x0[..., list(BASE_CHANNELS), :, :]
    return x0, clean


def target_noise(shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Standard normal noise on the target channels, exact zeros on the base channels."""
    eps = torch.randn(shape, generator=generator, dtype=dtype)
    eps[..., list(BASE_CHANNELS), :, :] = 0
    return eps


@dataclass(frozen=True)
class TrainingConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    standardize_residual: bool = True

    def __post_init__(self):
        if self.T < 10 or self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class TrainResult:
    params: DenoiserParams
    loss_history: list[float] = field(default_factory=list)
    residual_gain: list[float] = field(default_factory=lambda: [1.0] * 6)


def residual_gain(clean) -> np.ndarray:
    """Per-channel gain bringing the diagonal load residuals to unit RMS.

    Load residuals are a few hundredths in normalized units, far below the unit
    diffusion noise; base and connection channels keep gain 1.
    """
    clean = np.asarray(clean)
    n = clean.shape[-1]
    gain = np.ones(clean.shape[1])
    for c in TARGET_CHANNELS[:2]:
        rms = np.sqrt(np.mean(clean[:, c, np.arange(n), np.arange(n)] ** 2))
        if rms > 0:
            gain[c] = 1.0 / rms
    return gain


def diffusion_loss(model, clean, eps, t, sched) -> torch.Tensor:
    """Mean-squared error between the injected noise and the model's estimate.

    ``model`` is either a :class:`UNet` or a ``(params, config)`` pair.
    """
    x_t = forward_diffuse(clean, eps, t, sched)
    tt = torch.as_tensor(t)
    if isinstance(model, UNet):
        n = clean.shape[-1]
        pad = model.config.pad_to - n
        pred = model(torch.nn.functional.pad(x_t, (0, pad, 0, pad)), tt)[..., :n, :n]
    else:
        params, config = model
        pred = unet_forward(params, x_t, tt, config)
    return torch.mean((eps - pred) ** 2)


def train(images: np.ndarray, config: TrainingConfig, unet_config: UNetConfig,
          params: DenoiserParams | None = None, log_every: int = 0, log=print) -> TrainResult:
    """Fit the noise predictor with Adam on the mean-squared noise error.

    ``images`` is an (M, 6, N, N) stack of encoded samples.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)
    sched = make_schedule(config.T, config.beta_start, config.beta_end)

    y0 = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    _, clean = diffusion_pair(y0)
    gain = residual_gain(clean.numpy()) if config.standardize_residual else np.ones(clean.shape[1])
    clean = clean * torch.as_tensor(gain, dtype=clean.dtype)[None, :, None, None]
    params = init_params(unet_config, config.seed) if params is None else params
    model = UNet(unet_config)
    model.load_state_dict(params)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    history = []
    m = len(clean)
    for epoch in range(config.epochs):
        perm = order_rng.permutation(m)
        total = 0.0
        for start in range(0, m, config.batch_size):
            idx = torch.as_tensor(perm[start:start + config.batch_size])
            batch = clean[idx]
            t = torch.randint(1, config.T + 1, (len(idx),), generator=gen).numpy()
            eps = target_noise(batch.shape, gen)
            loss = diffusion_loss(model, batch, eps, t, sched)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss.item()} at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / m)
        if log_every and (epoch + 1) % log_every == 0:
            log(f"epoch {epoch + 1}/{config.epochs} loss {history[-1]:.5f}")
    trained = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    return TrainResult(params=trained, loss_history=history, residual_gain=[float(g) for g in gain])


def sample(eps_model, sched: NoiseSchedule, base_condition, generator: torch.Generator,
           sigma_scale: float = 1.0, gain=None):
    """Ancestral sampling conditioned on the base channels of ``base_condition``.

    ``eps_model(y_t, t)`` returns the noise estimate for a batch at integer step t.
    Returns y0 with channels 0-2 equal to the conditioning channels exactly and
    channels 3-5 holding base copy + generated residual. ``gain`` undoes the
    per-channel residual scaling applied in training.
    """
    cond = torch.as_tensor(base_condition)
    single = cond.dim() == 3
    if single:
        cond = cond[None]
    x0 = base_image(cond)
    base = x0[:, list(BASE_CHANNELS)]
    y = torch.randn(cond.shape, generator=generator, dtype=cond.dtype)
    y[:, list(BASE_CHANNELS)] = forward_diffuse(base, 0.0, sched.T, sched)
    for t in range(sched.T, 0, -1):
        a, abar = sched.alpha[t - 1], sched.alpha_bar[t - 1]
        eps = eps_model(y, t)
        z = torch.randn(cond.shape, generator=generator, dtype=cond.dtype) if t > 1 else torch.zeros_like(y)
        y = (y - (1 - a) / math.sqrt(1 - abar) * eps) / math.sqrt(a) + sigma_scale * sched.sigma[t - 1] * z
        y[:, list(BASE_CHANNELS)] = forward_diffuse(base, 0.0, t - 1, sched)
    out = x0.clone()
    resid = y[:, list(TARGET_CHANNELS)]
    if gain is not None:
        resid = resid / torch.as_tensor(np.asarray(gain)[list(TARGET_CHANNELS)], dtype=y.dtype)[None, :, None, None]
    out[:, list(TARGET_CHANNELS)] += resid
    return out[0] if single else out


def unet_eps_model(params: DenoiserParams, config: UNetConfig):
    def eps_model(y, t):
        with torch.no_grad():
            return unet_forward(params, y, torch.full((y.shape[0],), t), config).to(y.dtype)
    return eps_model
