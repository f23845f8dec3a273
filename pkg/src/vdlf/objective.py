"""Loss terms, optimizer plumbing and finite-difference gradient verification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericFailure
from .varfusion import LatentPosterior


def kl_divergence(post: LatentPosterior) -> torch.Tensor:
    """Per-sample KL(N(mu, diag sigma^2) || N(0, I)), summed over latent dims."""
    return 0.5 * (post.mu.pow(2) + post.log_var.exp() - 1.0 - post.log_var).sum(dim=-1)


def recon_loss(f_fused0: torch.Tensor, f_hat: torch.Tensor) -> torch.Tensor:
    """Per-sample squared L2 distance, summed over feature dims."""
    return (f_fused0 - f_hat).pow(2).sum(dim=-1)


def episodic_ce(query_probs: torch.Tensor, query_labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true position."""
    labels = torch.as_tensor(query_labels, dtype=torch.long)
    picked = query_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked).mean()


@dataclass
class LossBreakdown:
    """Terms of the unified objective.

    ``recon`` and ``kl`` are the values that entered ``total``; a term removed by an
    ablation is recorded as exactly 0 here and its raw value kept in ``raw_*``.
    """

    task: torch.Tensor | float
    recon: torch.Tensor | float
    kl: torch.Tensor | float
    alpha: float
    total: torch.Tensor | float
    raw_recon: float | None = None
    raw_kl: float | None = None

    def as_dict(self) -> dict:
        def f(v):
            if v is None:
                return None
            return float(v.detach()) if torch.is_tensor(v) else float(v)
        return {"task": f(self.task), "recon": f(self.recon), "kl": f(self.kl), "alpha": self.alpha,
                "total": f(self.total), "raw_recon": f(self.raw_recon), "raw_kl": f(self.raw_kl)}


def total_loss(task, recon, kl, alpha: float, use_recon: bool = True, use_kl: bool = True) -> LossBreakdown:
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    raw_recon = float(recon.detach()) if torch.is_tensor(recon) else float(recon)
    raw_kl = float(kl.detach()) if torch.is_tensor(kl) else float(kl)
    if not use_recon:
        recon = torch.zeros_like(recon) if torch.is_tensor(recon) else 0.0
    if not use_kl:
        kl = torch.zeros_like(kl) if torch.is_tensor(kl) else 0.0
    total = task + alpha * (recon + kl)
    return LossBreakdown(task, recon, kl, alpha, total, raw_recon, raw_kl)


# --------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------

@dataclass
class OptimSettings:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def make_optimizer(params: Iterable[torch.nn.Parameter], s: OptimSettings) -> torch.optim.AdamW:
    """AdamW: bias-corrected Adam step plus decay ``p <- p - lr * wd * p`` kept outside the moments."""
    return torch.optim.AdamW(params, lr=s.lr, betas=(s.beta1, s.beta2), eps=s.eps,
                             weight_decay=s.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite_grads(optimizer: torch.optim.Optimizer, names: dict | None = None) -> None:
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                label = (names or {}).get(id(p), f"tensor of shape {tuple(p.shape)}")
                raise NumericFailure(f"non-finite gradient in {label}; optimizer step aborted")


def optimizer_step(optimizer: torch.optim.Optimizer, names: dict | None = None) -> None:
    _check_finite_grads(optimizer, names)
    optimizer.step()


def cosine_lr(step: int, total_steps: int, base_lr: float, min_ratio: float = 0.1) -> float:
    """Cosine decay from ``base_lr`` to ``min_ratio * base_lr`` at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    eta_min = min_ratio * base_lr
    return eta_min + 0.5 * (base_lr - eta_min) * (1 + math.cos(math.pi * step / total_steps))


def accumulate_and_step(optimizer: torch.optim.Optimizer, micro_losses: Sequence[Callable[[], torch.Tensor]],
                        names: dict | None = None) -> list[float]:
    """One optimizer step from the mean of the micro-batch gradients."""
    if not micro_losses:
        raise ConfigError("need at least one micro-batch")
    optimizer.zero_grad(set_to_none=True)
    n = len(micro_losses)
    values = []
    for fn in micro_losses:
        loss = fn()
        (loss / n).backward()
        values.append(float(loss.detach()))
    optimizer_step(optimizer, names)
    return values


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    per_class: dict[str, dict] = field(default_factory=dict)
    rel_tol: float = 1e-4
    failing: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failing


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn: Callable[[], torch.Tensor], named_params: Sequence[tuple[str, torch.Tensor]],
               tensor_class: Callable[[str], str] = lambda name: name, coords_per_class: int = 200,
               h: float = 1e-4, rel_tol: float = 1e-4, seed: int = 0, floor: float = 1e-6,
               grad_transform: Callable[[str, torch.Tensor], torch.Tensor] | None = None,
               pattern_fn: Callable[[], torch.Tensor] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences on sampled coordinates.

    ``loss_fn`` must be a deterministic closure (re-seed any noise inside it). Parameters
    are grouped by ``tensor_class(name)``; each class gets ``coords_per_class`` coordinates
    sampled uniformly from the union of its tensors, or all of them if it has fewer.
    ``grad_transform`` lets tests corrupt the analytic gradient.

    ``pattern_fn``, if given, returns the boolean activation pattern (e.g. ReLU
    pre-activation signs) of the most recent ``loss_fn`` call. A coordinate whose
    +h or -h perturbation changes that pattern straddles a kink, where a central
    difference does not estimate the derivative; it is set aside and another
    coordinate is drawn in its place. The count is reported as ``kinks``.
    """
    params = [p for _, p in named_params]
    for p in params:
        p.grad = None
    loss = loss_fn()
    base_pattern = pattern_fn() if pattern_fn is not None else None
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = {}
    for (name, p), g in zip(named_params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if grad_transform is not None:
            g = grad_transform(name, g)
        analytic[name] = g

    classes: dict[str, list[tuple[str, torch.Tensor]]] = {}
    for name, p in named_params:
        classes.setdefault(tensor_class(name), []).append((name, p))

    def same_pattern() -> bool:
        return base_pattern is None or torch.equal(pattern_fn(), base_pattern)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, "", rel_tol=rel_tol)
    for cls_name, members in classes.items():
        sizes = np.array([p.numel() for _, p in members])
        total = int(sizes.sum())
        order = rng.permutation(total)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        worst, worst_at, checked, kinks = 0.0, "", 0, 0
        for fid in order:
            if checked == coords_per_class:
                break
            t = int(np.searchsorted(offsets, fid, side="right") - 1)
            name, p = members[t]
            local = int(fid - offsets[t])
            flat = p.data.view(-1)
            orig = flat[local].item()
            with torch.no_grad():
                flat[local] = orig + h
                up = float(loss_fn())
                smooth = same_pattern()
                flat[local] = orig - h
                down = float(loss_fn())
                smooth = smooth and same_pattern()
                flat[local] = orig
            if not smooth:
                kinks += 1
                continue
            checked += 1
            numeric = (up - down) / (2 * h)
            err = rel_error(float(analytic[name].view(-1)[local]), numeric, floor)
            if err > worst:
                worst, worst_at = err, f"{name}[{local}]"
        report.per_class[cls_name] = {"coords": checked, "kinks": kinks, "max_rel_error": worst,
                                      "worst": worst_at}
        if worst >= rel_tol:
            report.failing.append(cls_name)
        if worst > report.max_rel_error:
            report.max_rel_error, report.worst = worst, worst_at
    return report
