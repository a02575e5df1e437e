"""Conditional denoising diffusion over 1-D region feature vectors.

Timesteps are 1-based throughout: ``t`` in ``1..T``. Schedule arrays are
stored 0-based, so step ``t`` lives at index ``t - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, InputDataError, InvariantViolation
from .gcn import LEAKY_SLOPE
from .msgf import adain


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    gamma: np.ndarray
    beta: np.ndarray
    beta_bar: np.ndarray
    variance: str = "fixed"

    def check_t(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise InputDataError(f"timestep {t} outside 1..{self.T}")

    def sigma(self, t: int) -> float:
        """Reverse-step standard deviation at step ``t``."""
        g = self.gamma[t - 1]
        if self.variance == "posterior":
            prev = self.beta_bar[t - 2] if t > 1 else 1.0
            return math.sqrt(g * (1.0 - prev) / (1.0 - self.beta_bar[t - 1]))
        return math.sqrt(g)

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "gamma": self.gamma.tolist(),
            "beta_bar": self.beta_bar.tolist(),
            "variance": self.variance,
        }

    @classmethod
    def from_dict(cls, doc) -> "DiffusionSchedule":
        gamma = np.asarray(doc["gamma"], dtype=float)
        sched = _from_gamma(gamma, doc.get("variance", "fixed"))
        if sched.T != int(doc["T"]) or not np.array_equal(sched.beta_bar, np.asarray(doc["beta_bar"], dtype=float)):
            raise InputDataError("stored schedule is inconsistent with its noise scalars")
        return sched


def make_schedule(T: int, gamma_1: float, gamma_T: float, variance: str = "fixed") -> DiffusionSchedule:
    """Linear noise ramp from ``gamma_1`` to ``gamma_T`` over ``T`` steps."""
    if T < 1:
        raise ConfigError(f"T={T} must be at least 1")
    if not 0.0 < gamma_1 <= gamma_T < 1.0:
        raise ConfigError(f"need 0 < gamma_1 <= gamma_T < 1, got {gamma_1}, {gamma_T}")
    if variance not in ("fixed", "posterior"):
        raise ConfigError(f"unknown reverse variance {variance!r}")
    gamma = np.array([gamma_1]) if T == 1 else np.linspace(gamma_1, gamma_T, T)
    return _from_gamma(gamma, variance)


def _from_gamma(gamma: np.ndarray, variance: str) -> DiffusionSchedule:
    beta = 1.0 - gamma
    return DiffusionSchedule(T=len(gamma), gamma=gamma, beta=beta, beta_bar=np.cumprod(beta), variance=variance)


def forward_step(h_prev, gamma_t: float, z):
    return math.sqrt(1.0 - gamma_t) * h_prev + math.sqrt(gamma_t) * z


def forward_marginal(h_0, t: int, sched: DiffusionSchedule, z):
    """Closed-form ``h_t`` given ``h_0`` and one standard-normal draw ``z``."""
    sched.check_t(t)
    bb = sched.beta_bar[t - 1]
    return math.sqrt(bb) * h_0 + math.sqrt(1.0 - bb) * z


def posterior_mean(h_t, t: int, z_pred, sched: DiffusionSchedule):
    sched.check_t(t)
    bb = sched.beta_bar[t - 1]
    if bb >= 1.0:
        raise InvariantViolation(f"accumulated retention at t={t} is 1; posterior mean undefined")
    coef = sched.gamma[t - 1] / math.sqrt(1.0 - bb)
    return (h_t - coef * z_pred) / math.sqrt(sched.beta[t - 1])


def sinusoidal_embedding(T: int, dim: int) -> torch.Tensor:
    steps = torch.arange(1, T + 1, dtype=torch.float64)[:, None]
    freqs = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / max(dim, 1))
    emb = torch.zeros(T, dim, dtype=torch.float64)
    emb[:, 0::2] = torch.sin(steps * freqs)
    emb[:, 1::2] = torch.cos(steps * freqs[: dim // 2])
    return emb


class DenoiserBlock(nn.Module):
    """Content-encoder style MLP over (h_t, condition, timestep embedding), AdaIN-styled by the condition."""

    def __init__(self, feature_dim: int, cond_dim: int, temb_dim: int, width: int):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim + cond_dim + temb_dim, width)
        self.fc2 = nn.Linear(width, width)
        self.style = nn.Linear(cond_dim, width)
        self.out = nn.Linear(width, feature_dim)

    def forward(self, h_t, cond, temb):
        u = F.leaky_relu(self.fc1(torch.cat([h_t, cond, temb], dim=1)), LEAKY_SLOPE)
        u = F.leaky_relu(self.fc2(u), LEAKY_SLOPE)
        return self.out(adain(u, self.style(cond)))


class Denoiser(nn.Module):
    """Noise predictor. One block per timestep unless ``share_timestep_params``."""

    def __init__(
        self,
        feature_dim: int,
        cond_dim: int,
        T: int,
        *,
        width: int = 64,
        temb_dim: int = 16,
        share_timestep_params: bool = False,
    ):
        super().__init__()
        self.T = T
        self.feature_dim = feature_dim
        self.cond_dim = cond_dim
        self.shared = share_timestep_params
        n_blocks = 1 if share_timestep_params else T
        self.blocks = nn.ModuleList(DenoiserBlock(feature_dim, cond_dim, temb_dim, width) for _ in range(n_blocks))
        if share_timestep_params:
            self.register_buffer("temb", sinusoidal_embedding(T, temb_dim).to(torch.get_default_dtype()))
        else:
            self.temb = nn.Parameter(0.1 * torch.randn(T, temb_dim))

    def forward(self, h_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        if isinstance(t, (int, np.integer)):
            return self._at(h_t, int(t), cond)
        t = torch.as_tensor(t)
        out = torch.zeros_like(h_t)
        for step in torch.unique(t).tolist():
            rows = (t == step).nonzero().squeeze(1)
            out = out.index_put((rows,), self._at(h_t[rows], int(step), cond[rows]))
        return out

    def _at(self, h_t, t: int, cond):
        if not 1 <= t <= self.T:
            raise InputDataError(f"timestep {t} outside 1..{self.T}")
        block = self.blocks[0 if self.shared else t - 1]
        temb = self.temb[t - 1].expand(h_t.shape[0], -1)
        return block(h_t, cond, temb)


def predict_noise(h_t, t, condition, denoiser: Denoiser):
    if h_t.shape[-1] != denoiser.feature_dim or condition.shape[-1] != denoiser.cond_dim:
        raise InputDataError(
            f"denoiser expects features of dim {denoiser.feature_dim} and conditions of dim {denoiser.cond_dim}"
        )
    return denoiser(h_t, t, condition)


def reverse_step(h_t, t: int, condition, denoiser: Denoiser, sched: DiffusionSchedule, generator=None):
    """One ancestral step ``h_t -> h_{t-1}``; noise-free at ``t == 1``."""
    mean = posterior_mean(h_t, t, predict_noise(h_t, t, condition, denoiser), sched)
    if t == 1:
        return mean
    eps = torch.randn(h_t.shape, generator=generator, dtype=h_t.dtype)
    return mean + sched.sigma(t) * eps


@torch.no_grad()
def sample(condition: torch.Tensor, denoiser: Denoiser, sched: DiffusionSchedule, generator=None) -> torch.Tensor:
    """Draw one feature per condition row, starting from standard normal at step T."""
    h = torch.randn((condition.shape[0], denoiser.feature_dim), generator=generator, dtype=condition.dtype)
    for t in range(sched.T, 0, -1):
        h = reverse_step(h, t, condition, denoiser, sched, generator)
    return h


def reconstruction_loss(h_0, conditions, denoiser, sched: DiffusionSchedule, generator=None, t=None, z=None):
    """Mean over the batch of squared noise-prediction error summed over feature dims.

    ``t`` (per-row 1-based steps) and ``z`` are drawn when not supplied.
    """
    m = h_0.shape[0]
    if m == 0:
        raise InputDataError("reconstruction loss needs a non-empty batch")
    if t is None:
        t = torch.randint(1, sched.T + 1, (m,), generator=generator)
    t = torch.as_tensor(t).reshape(m)
    if z is None:
        z = torch.randn(h_0.shape, generator=generator, dtype=h_0.dtype)
    bb = torch.as_tensor(sched.beta_bar, dtype=h_0.dtype)[t - 1].unsqueeze(1)
    h_t = bb.sqrt() * h_0 + (1.0 - bb).sqrt() * z
    z_pred = predict_noise(h_t, t, conditions, denoiser)
    return ((z - z_pred) ** 2).sum(dim=1).mean()
