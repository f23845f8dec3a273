"""Supervised metrics, episode statistics and ablation variants."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, VDLFError


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are truth, columns are predictions."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def macro_prf1(cm: np.ndarray) -> tuple[float, float, float]:
    """Unweighted class means; a zero denominator contributes 0 for that class."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.size == 0:
        raise ConfigError("empty confusion matrix")
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    p = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    r = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    f = np.divide(2 * p * r, p + r, out=np.zeros_like(tp), where=(p + r) > 0)
    return float(p.mean()), float(r.mean()), float(f.mean())


class UndefinedCIError(VDLFError):
    pass


@dataclass
class EpisodeStats:
    per_episode_acc: list[float]
    mean: float
    ci95: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "ci95": self.ci95, "episodes": len(self.per_episode_acc),
                "per_episode_acc": self.per_episode_acc}


def episode_ci(accs) -> EpisodeStats:
    """Mean and normal-approximation half-width 1.96 * s / sqrt(E), s with Bessel correction."""
    accs = [float(a) for a in accs]
    e = len(accs)
    if e < 2:
        raise UndefinedCIError(f"need at least 2 episodes for a confidence interval, got {e}")
    mean = math.fsum(accs) / e
    sd = math.sqrt(math.fsum((a - mean) ** 2 for a in accs) / (e - 1))
    return EpisodeStats(accs, mean, 1.96 * sd / math.sqrt(e))


class AblationVariant(str, Enum):
    FULL = "full"
    NO_KL = "no_kl"
    NO_RECON = "no_recon"
    NO_KL_RECON = "no_kl_recon"
    UNIFORM_WEIGHTS = "uniform_weights"
    FINE_ONLY = "fine_only"
    COARSE_ONLY = "coarse_only"

    @classmethod
    def parse(cls, tag: str) -> "AblationVariant":
        try:
            return cls(tag)
        except ValueError:
            raise ConfigError(f"unknown ablation variant {tag!r}; expected one of "
                              f"{', '.join(v.value for v in cls)}") from None


ABLATION_ORDER = list(AblationVariant)

ABLATION_LABELS = {
    AblationVariant.FULL: "Full model",
    AblationVariant.NO_KL: "w/o KL term",
    AblationVariant.NO_RECON: "w/o reconstruction",
    AblationVariant.NO_KL_RECON: "w/o KL & reconstruction",
    AblationVariant.UNIFORM_WEIGHTS: "Uniform scale weights (1/K)",
    AblationVariant.FINE_ONLY: "Fine scale only (1x1 branch)",
    AblationVariant.COARSE_ONLY: "Coarse scale only (2x2 branch)",
}


@dataclass(frozen=True)
class VariantSettings:
    use_kl: bool = True
    use_recon: bool = True
    gate_mode: str = "learned"
    only_grid: tuple[int, int] | None = None


def variant_settings(variant) -> VariantSettings:
    v = AblationVariant.parse(variant) if isinstance(variant, str) else variant
    return {
        AblationVariant.FULL: VariantSettings(),
        AblationVariant.NO_KL: VariantSettings(use_kl=False),
        AblationVariant.NO_RECON: VariantSettings(use_recon=False),
        AblationVariant.NO_KL_RECON: VariantSettings(use_kl=False, use_recon=False),
        AblationVariant.UNIFORM_WEIGHTS: VariantSettings(gate_mode="uniform"),
        AblationVariant.FINE_ONLY: VariantSettings(only_grid=(1, 1)),
        AblationVariant.COARSE_ONLY: VariantSettings(only_grid=(2, 2)),
    }[v]


def run_ablation(variant, config, seed: int | None = None):
    """Train one variant from scratch under ``config``'s budget and evaluate it."""
    from .training import train_episodic

    cfg = config.with_variant(AblationVariant.parse(variant) if isinstance(variant, str) else variant)
    if seed is not None:
        cfg.run.seed = seed
    report, _ = train_episodic(cfg)
    return report
