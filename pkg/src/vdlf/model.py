"""The assembled network and its two loss paths (supervised batch, episode)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng as rngmod
from .backbone import Backbone, BackboneConfig, MultiScaleFeatures, init_fan_in_uniform_
from .heads import SupervisedHead, build_prototypes, cosine_matrix
from .objective import LossBreakdown, kl_divergence, recon_loss, total_loss
from .varfusion import FusionConfig, LatentPosterior, VariationalFusion, center_normalize


class VDLFNet(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, fusion_cfg: FusionConfig, n_classes: int = 0):
        super().__init__()
        self.backbone = Backbone(backbone_cfg)
        self.fusion = VariationalFusion(fusion_cfg)
        self.head = SupervisedHead(fusion_cfg.dim, n_classes) if n_classes > 0 else None

    @property
    def n_scales(self) -> int:
        return self.fusion.cfg.n_scales

    def features(self, x: torch.Tensor) -> MultiScaleFeatures:
        return self.backbone(x)


def build_model(cfg, n_classes: int = 0, seed: int | None = None) -> VDLFNet:
    """Model for a :class:`~vdlf.config.RunConfig`, honouring its ablation variant."""
    m = cfg.model
    grids = cfg.effective_grids()
    net = VDLFNet(
        BackboneConfig(widths=tuple(m.widths), pool_grids=tuple(grids), dim=m.dim,
                       in_channels=len(cfg.data.channel_mean)),
        FusionConfig(dim=m.dim, latent_dim=m.latent_dim, hidden=m.vae_hidden, gate_hidden=m.gate_hidden,
                     n_scales=len(grids), eps=m.norm_eps, momentum=m.center_momentum,
                     gate_mode=cfg.variant.gate_mode),
        n_classes,
    )
    seed = cfg.run.seed if seed is None else seed
    init_fan_in_uniform_(net, rngmod.torch_generator(seed, "init"))
    return net


@dataclass
class EpisodeOutput:
    loss: LossBreakdown
    logits: torch.Tensor  # Q x N, tau * cosine
    preds: torch.Tensor
    support_weights: torch.Tensor  # Ns x T x K
    query_weights: torch.Tensor  # Nq x K


def episode_forward(model: VDLFNet, support_x: torch.Tensor, support_y, query_x: torch.Tensor, query_y,
                    n_way: int, draws: int, tau: float, alpha: float, latent_rng: np.random.Generator,
                    use_kl: bool = True, use_recon: bool = True,
                    latent_eps: torch.Tensor | None = None) -> EpisodeOutput:
    """Episodic loss: T stochastic FAAM draws per support image, one deterministic
    (z = mu) pass per query, cosine prototypes, and recon/KL averaged over every
    support and query image.

    Support and query images share one backbone batch. In training mode the
    centering mean is taken over all fused vectors of the episode.
    """
    fusion = model.fusion
    ns = support_x.shape[0]
    support_y = torch.as_tensor(support_y, dtype=torch.long)
    query_y = torch.as_tensor(query_y, dtype=torch.long)

    feats = model.features(torch.cat([support_x, query_x]))
    post = fusion.encode(feats.f_fused0)
    s_feats, q_feats = feats.select(slice(0, ns)), feats.select(slice(ns, None))
    s_post = LatentPosterior(post.mu[:ns], post.log_var[:ns])
    q_post = LatentPosterior(post.mu[ns:], post.log_var[ns:])

    if latent_eps is None:
        latent_eps = rngmod.normal(latent_rng, (ns, draws, fusion.cfg.latent_dim), dtype=post.mu.dtype)
    z_s, w_s, fused_s = fusion.draw(s_feats, s_post, latent_eps)
    z_q, w_q, fused_q = fusion.draw(q_feats, q_post, None)
    center = fusion.center([fused_s, fused_q])
    norm_s = center_normalize(fused_s, center, fusion.cfg.eps)
    norm_q = center_normalize(fused_q, center, fusion.cfg.eps)[:, 0]

    protos = build_prototypes(norm_s.reshape(-1, norm_s.shape[-1]),
                              support_y.repeat_interleave(norm_s.shape[1]), n_way)
    logits = tau * cosine_matrix(norm_q, protos)
    task = F.cross_entropy(logits, query_y)

    # Recon per image: mean over its T draws for support, the z = mu pass for queries.
    rec_s = recon_loss(s_feats.f_fused0.unsqueeze(1), fusion.decode(z_s)).mean(dim=1)
    rec_q = recon_loss(q_feats.f_fused0, fusion.decode(z_q[:, 0]))
    recon = torch.cat([rec_s, rec_q]).mean()
    kl = kl_divergence(post).mean()
    loss = total_loss(task, recon, kl, alpha, use_recon=use_recon, use_kl=use_kl)
    return EpisodeOutput(loss, logits, logits.argmax(dim=-1), w_s, w_q[:, 0])


@dataclass
class SupervisedOutput:
    loss: LossBreakdown
    logits: torch.Tensor
    weights: torch.Tensor
    embedding: torch.Tensor


def supervised_forward(model: VDLFNet, x: torch.Tensor, y, alpha: float,
                       latent_rng: np.random.Generator | None, stochastic: bool,
                       use_kl: bool = True, use_recon: bool = True) -> SupervisedOutput:
    """Supervised loss: one latent draw (or z = mu), batch-mean centering, linear head."""
    fusion = model.fusion
    feats = model.features(x)
    post = fusion.encode(feats.f_fused0)
    eps = None
    if stochastic:
        eps = rngmod.normal(latent_rng, (len(feats), 1, fusion.cfg.latent_dim), dtype=post.mu.dtype)
    z, w, fused = fusion.draw(feats, post, eps)
    center = fusion.center([fused])
    emb = center_normalize(fused, center, fusion.cfg.eps)[:, 0]
    logits = model.head(emb)
    task = F.cross_entropy(logits, torch.as_tensor(y, dtype=torch.long))
    recon = recon_loss(feats.f_fused0, fusion.decode(z[:, 0])).mean()
    kl = kl_divergence(post).mean()
    loss = total_loss(task, recon, kl, alpha, use_recon=use_recon, use_kl=use_kl)
    return SupervisedOutput(loss, logits, w[:, 0], emb)
