"""VAE over the averaged scale features, latent-driven softmax gating and fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import rng as rngmod
from .backbone import MultiScaleFeatures
from .errors import ConfigError, NumericFailure

LOG_VAR_MIN = -40.0
LOG_VAR_MAX = 20.0


@dataclass
class FusionConfig:
    dim: int = 256
    latent_dim: int = 128
    hidden: int = 256
    gate_hidden: int = 128
    n_scales: int = 2
    eps: float = 1e-8
    momentum: float = 0.1
    gate_mode: str = "learned"  # or "uniform"
    activation: str = "relu"  # "linear" drops the hidden nonlinearity (test config)

    def __post_init__(self):
        if self.gate_mode not in ("learned", "uniform"):
            raise ConfigError(f"unknown gate_mode {self.gate_mode!r}")
        if self.activation not in ("relu", "linear"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.eps <= 0:
            raise ConfigError("normalization eps must be > 0")


@dataclass
class LatentPosterior:
    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


@dataclass
class FusionResult:
    """Batched FAAM output; leading dims are ``B x T``."""

    posterior: LatentPosterior
    z: torch.Tensor
    weights: torch.Tensor
    fused: torch.Tensor
    normalized: torch.Tensor


def reparameterize(post: LatentPosterior, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(log_var / 2) * eps. ``eps`` broadcasts over any extra draw axis."""
    if eps.shape[-1] != post.mu.shape[-1]:
        raise ConfigError(f"eps has dim {eps.shape[-1]}, latent dim is {post.mu.shape[-1]}")
    if eps.dim() == post.mu.dim() + 1:
        return post.mu.unsqueeze(-2) + post.sigma.unsqueeze(-2) * eps
    return post.mu + post.sigma * eps


def softmax_weights(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def fuse(scales: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Weighted sum over the scale axis: ``scales`` is ``... x K x d``, ``w`` is ``... x K``."""
    if w.shape[-1] != scales.shape[-2]:
        raise ConfigError(f"{w.shape[-1]} weights for {scales.shape[-2]} scales")
    return (w.unsqueeze(-1) * scales).sum(dim=-2)


def center_normalize(fused: torch.Tensor, center: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    v = fused - center
    return v / (torch.linalg.vector_norm(v, dim=-1, keepdim=True) + eps)


class VariationalFusion(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.enc1 = nn.Linear(cfg.dim, cfg.hidden)
        self.enc2 = nn.Linear(cfg.hidden, 2 * cfg.latent_dim)
        self.dec1 = nn.Linear(cfg.latent_dim, cfg.hidden)
        self.dec2 = nn.Linear(cfg.hidden, cfg.dim)
        self.gate1 = nn.Linear(cfg.latent_dim, cfg.gate_hidden)
        self.gate2 = nn.Linear(cfg.gate_hidden, cfg.n_scales)
        self.register_buffer("running_center", torch.zeros(cfg.dim))

    def _act(self, x):
        return torch.relu(x) if self.cfg.activation == "relu" else x

    def encode(self, f_fused0: torch.Tensor) -> LatentPosterior:
        h = self.enc2(self._act(self.enc1(f_fused0)))
        if not torch.isfinite(h).all():
            raise NumericFailure("encoder produced non-finite activations")
        mu, log_var = h.chunk(2, dim=-1)
        return LatentPosterior(mu, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec2(self._act(self.dec1(z)))

    def gate_logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.gate2(torch.relu(self.gate1(z)))

    def gate(self, z: torch.Tensor) -> torch.Tensor:
        if self.cfg.gate_mode == "uniform":
            k = self.cfg.n_scales
            return z.new_full((*z.shape[:-1], k), 1.0 / k)
        return softmax_weights(self.gate_logits(z))

    def center(self, fused_groups: list[torch.Tensor]) -> torch.Tensor:
        """Centering vector for this forward pass.

        Training: mean over every fused vector in ``fused_groups`` (all flattened to
        ``n x d``), which also moves the running mean. Evaluation: the running mean.
        """
        if not self.training:
            return self.running_center
        flat = torch.cat([g.reshape(-1, g.shape[-1]) for g in fused_groups])
        batch_mean = flat.mean(dim=0)
        with torch.no_grad():
            self.running_center.mul_(1 - self.cfg.momentum).add_(batch_mean.detach(), alpha=self.cfg.momentum)
        return batch_mean

    def draw(self, feats: MultiScaleFeatures, post: LatentPosterior, eps: torch.Tensor | None):
        """Latent draws, gate weights and fused vectors; ``eps=None`` means z = mu, one draw."""
        if eps is None:
            z = post.mu.unsqueeze(-2)
        else:
            z = reparameterize(post, eps)
        w = self.gate(z)
        fused = fuse(feats.scales.unsqueeze(-3), w)
        return z, w, fused

    def faam_embed(self, feats: MultiScaleFeatures, T: int, rng: np.random.Generator | None,
                   stochastic: bool, center: torch.Tensor | None = None) -> FusionResult:
        """T stochastic draws per sample, or one deterministic draw at the posterior mean.

        Returns tensors shaped ``B x T x ...`` (T = 1 in deterministic mode). Without an
        explicit ``center`` the batch's own fused vectors set it (see :meth:`center`).
        """
        if T < 1:
            raise ConfigError("T must be >= 1")
        post = self.encode(feats.f_fused0)
        eps = None
        if stochastic:
            eps = rngmod.normal(rng, (len(feats), T, self.cfg.latent_dim), dtype=post.mu.dtype)
        z, w, fused = self.draw(feats, post, eps)
        if center is None:
            center = self.center([fused])
        return FusionResult(post, z, w, fused, center_normalize(fused, center, self.cfg.eps))
