"""Training loops, evaluation, ablation sweep and the gradient-check harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rng as rngmod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_dict, serialize_config
from .dataio import (
    AugmentPolicy,
    ClassSplit,
    ImageSet,
    augment_batch,
    episode_stream,
    load_cifar100,
    load_image_folder,
    make_synthetic_dataset,
)
from .errors import DataError, EpisodeSamplingError
from .evalmetrics import (
    ABLATION_LABELS,
    ABLATION_ORDER,
    AblationVariant,
    EpisodeStats,
    accuracy,
    confusion_matrix,
    episode_ci,
    macro_prf1,
)
from .model import VDLFNet, build_model, episode_forward, supervised_forward
from .objective import (
    accumulate_and_step,
    cosine_lr,
    grad_check,
    make_optimizer,
    optimizer_step,
    set_lr,
    OptimSettings,
)

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    config: dict
    config_text: str
    seed: int
    variant: str
    k_effective: int
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    episode_stats: EpisodeStats | None = None
    untrained_stats: EpisodeStats | None = None
    wall_clock_s: float = 0.0

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "variant": self.variant,
            "k_effective": self.k_effective,
            "metrics": self.metrics,
            "episode_stats": None if self.episode_stats is None else self.episode_stats.as_dict(),
            "untrained_stats": None if self.untrained_stats is None else self.untrained_stats.as_dict(),
            "wall_clock_s": self.wall_clock_s,
            "history": self.history,
            "config": self.config,
            "config_text": self.config_text,
        }

    def summary_lines(self) -> list[str]:
        lines = [f"variant: {self.variant}  seed: {self.seed}  K_effective: {self.k_effective}"]
        for k, v in self.metrics.items():
            if isinstance(v, float):
                lines.append(f"{k}: {v:.4f}")
        if self.episode_stats is not None:
            s = self.episode_stats
            lines.append(f"episode accuracy: {100 * s.mean:.2f} +- {100 * s.ci95:.2f} "
                         f"(95% CI, {len(s.per_episode_acc)} episodes)")
        if self.untrained_stats is not None:
            s = self.untrained_stats
            lines.append(f"untrained episode accuracy: {100 * s.mean:.2f} +- {100 * s.ci95:.2f}")
        lines.append(f"wall clock: {self.wall_clock_s:.1f}s")
        return lines


def write_report(report: RunReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.as_dict(), indent=2))
    with open(out_dir / "history.jsonl", "w") as fh:
        for row in report.history:
            fh.write(json.dumps(row) + "\n")
    (out_dir / "summary.txt").write_text("\n".join(report.summary_lines()) + "\n")
    (out_dir / "config.cfg").write_text(report.config_text)


def _setup(cfg: RunConfig) -> None:
    torch.use_deterministic_algorithms(cfg.run.deterministic)


def _policy(cfg: RunConfig, episodic: bool) -> AugmentPolicy:
    d = cfg.data
    return AugmentPolicy(pad=d.pad, hflip_prob=d.hflip_prob,
                         rotation_degrees=d.rotation_degrees if episodic else 0.0,
                         mean=tuple(d.channel_mean), std=tuple(d.channel_std))


def _new_report(cfg: RunConfig) -> RunReport:
    return RunReport(config_dict(cfg), serialize_config(cfg), cfg.run.seed, cfg.run.variant,
                     len(cfg.effective_grids()))


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

def load_episodic_data(cfg: RunConfig) -> tuple[ImageSet, ClassSplit]:
    d = cfg.data
    if d.source == "synthetic":
        pool = make_synthetic_dataset(d.synth_classes, d.synth_per_class, d.image_side, d.synth_seed,
                                      noise=d.synth_noise)
        return pool, ClassSplit.proportional(pool.n_classes)
    if d.source == "folder":
        return load_image_folder(d.path, cfg.manifest_path(), d.image_side)
    train, _ = load_cifar100(d.path)
    return train, ClassSplit.proportional(train.n_classes)


def load_supervised_data(cfg: RunConfig) -> tuple[ImageSet, ImageSet]:
    d = cfg.data
    if d.source == "synthetic":
        pool = make_synthetic_dataset(d.synth_classes, d.synth_per_class, d.image_side, d.synth_seed,
                                      noise=d.synth_noise)
        r = rngmod.stream(d.synth_seed, "holdout")
        test_mask = np.zeros(len(pool), dtype=bool)
        for members in pool.class_indices().values():
            n_test = max(1, int(round(d.test_fraction * len(members))))
            test_mask[r.choice(members, size=n_test, replace=False)] = True
        train = ImageSet(pool.images[~test_mask], pool.labels[~test_mask], pool.class_names)
        test = ImageSet(pool.images[test_mask], pool.labels[test_mask], pool.class_names)
    elif d.source == "cifar100":
        train, test = load_cifar100(d.path)
    else:
        raise DataError("supervised training reads synthetic or cifar100 sources")
    if d.subset_classes:
        keep = list(range(d.subset_classes))
        train, test = train.subset(keep), test.subset(keep)
    return train, test


# --------------------------------------------------------------------------
# Episodic
# --------------------------------------------------------------------------

def _episode_tensors(pool: ImageSet, ep, policy: AugmentPolicy, aug_rng, train_mode: bool):
    sx = augment_batch(pool.images[ep.support_idx], policy, aug_rng, train_mode)
    qx = augment_batch(pool.images[ep.query_idx], policy, aug_rng, train_mode)
    return sx, qx


def evaluate_episodes(model: VDLFNet, cfg: RunConfig, pool: ImageSet, classes, count: int,
                      stream_name: str = "test-episode") -> EpisodeStats:
    """Per-episode query accuracy in eval mode; episode ``i`` uses its own streams."""
    e, m = cfg.episodic, cfg.model
    policy = _policy(cfg, episodic=True)
    was_training = model.training
    model.eval()
    accs = []
    with torch.no_grad():
        for i, ep in enumerate(episode_stream(pool, classes, e.n_way, e.k_shot, e.q_queries,
                                              cfg.run.seed, stream_name, count)):
            sx, qx = _episode_tensors(pool, ep, policy, None, False)
            out = episode_forward(model, sx, ep.support_y, qx, ep.query_y, e.n_way, m.draws, m.tau,
                                  cfg.optim.alpha, rngmod.stream(cfg.run.seed, f"{stream_name}-latent/{i}"))
            accs.append(float((out.preds.numpy() == ep.query_y).mean()))
    model.train(was_training)
    return episode_ci(accs)


def train_episodic(cfg: RunConfig, pool: ImageSet | None = None, split: ClassSplit | None = None):
    """Meta-train on sampled episodes, then evaluate on fresh test-split episodes."""
    _setup(cfg)
    t0 = time.perf_counter()
    if pool is None:
        pool, split = load_episodic_data(cfg)
    e, m, o = cfg.episodic, cfg.model, cfg.optim
    for name in ("train", "test"):
        if len(split.get(name)) < e.n_way:
            raise EpisodeSamplingError(f"{name} split has {len(split.get(name))} classes, need n_way={e.n_way}")
    model = build_model(cfg)
    report = _new_report(cfg)
    if cfg.run.eval_untrained:
        report.untrained_stats = evaluate_episodes(model, cfg, pool, split.test, e.test_episodes)

    vs = cfg.variant
    policy = _policy(cfg, episodic=True)
    opt = make_optimizer(model.parameters(), OptimSettings(o.lr, o.weight_decay, o.beta1, o.beta2))
    names = {id(p): n for n, p in model.named_parameters()}
    total_steps = -(-e.train_episodes // o.accumulation)
    model.train()
    opt.zero_grad(set_to_none=True)
    step = 0
    episodes = list(episode_stream(pool, split.train, e.n_way, e.k_shot, e.q_queries, cfg.run.seed,
                                   "train-episode", e.train_episodes))
    for i, ep in enumerate(episodes):
        group_start = (i // o.accumulation) * o.accumulation
        group_size = min(o.accumulation, e.train_episodes - group_start)
        sx, qx = _episode_tensors(pool, ep, policy, rngmod.stream(cfg.run.seed, f"augment/{i}"), True)
        out = episode_forward(model, sx, ep.support_y, qx, ep.query_y, e.n_way, m.draws, m.tau, o.alpha,
                              rngmod.stream(cfg.run.seed, f"latent/{i}"), use_kl=vs.use_kl,
                              use_recon=vs.use_recon)
        (out.loss.total / group_size).backward()
        row = {"episode": i, **out.loss.as_dict(),
               "acc": float((out.preds.numpy() == ep.query_y).mean()),
               "mean_gate": out.support_weights.mean(dim=(0, 1)).tolist()}
        if i + 1 == group_start + group_size:
            lr = cosine_lr(step, total_steps, o.lr, o.lr_min_ratio) if o.schedule == "cosine" else o.lr
            set_lr(opt, lr)
            optimizer_step(opt, names)
            opt.zero_grad(set_to_none=True)
            step += 1
            row["lr"] = lr
        report.history.append(row)
    report.episode_stats = evaluate_episodes(model, cfg, pool, split.test, e.test_episodes)
    report.metrics["test_mean_acc"] = report.episode_stats.mean
    report.metrics["test_ci95"] = report.episode_stats.ci95
    report.wall_clock_s = time.perf_counter() - t0
    return report, model


# --------------------------------------------------------------------------
# Supervised
# --------------------------------------------------------------------------

def evaluate_supervised(model: VDLFNet, cfg: RunConfig, data: ImageSet) -> dict:
    policy = _policy(cfg, episodic=False)
    model.eval()
    preds = []
    with torch.no_grad():
        for s in range(0, len(data), cfg.optim.batch_size):
            x = augment_batch(data.images[s:s + cfg.optim.batch_size], policy, None, False)
            out = supervised_forward(model, x, data.labels[s:s + cfg.optim.batch_size], cfg.optim.alpha,
                                     None, stochastic=False)
            preds.append(out.logits.argmax(dim=-1).numpy())
    model.train()
    pred = np.concatenate(preds)
    cm = confusion_matrix(data.labels, pred, data.n_classes)
    p, r, f1 = macro_prf1(cm)
    return {"accuracy": accuracy(cm), "macro_precision": p, "macro_recall": r, "macro_f1": f1,
            "streaming_accuracy": float((pred == data.labels).mean()), "confusion": cm.tolist()}


def train_supervised(cfg: RunConfig, train: ImageSet | None = None, test: ImageSet | None = None):
    """Minimise CE + alpha (recon + KL) with AdamW and per-step cosine decay."""
    _setup(cfg)
    t0 = time.perf_counter()
    if train is None:
        train, test = load_supervised_data(cfg)
    o = cfg.optim
    model = build_model(cfg, n_classes=train.n_classes)
    report = _new_report(cfg)
    vs = cfg.variant
    policy = _policy(cfg, episodic=False)
    opt = make_optimizer(model.parameters(), OptimSettings(o.lr, o.weight_decay, o.beta1, o.beta2))
    names = {id(p): n for n, p in model.named_parameters()}
    steps_per_epoch = -(-len(train) // o.batch_size)
    total_steps = o.epochs * steps_per_epoch
    step = 0
    model.train()
    for epoch in range(o.epochs):
        order = rngmod.stream(cfg.run.seed, f"batches/{epoch}").permutation(len(train))
        aug_rng = rngmod.stream(cfg.run.seed, f"augment/{epoch}")
        lat_rng = rngmod.stream(cfg.run.seed, f"latent/{epoch}")
        sums = {"task": 0.0, "recon": 0.0, "kl": 0.0, "total": 0.0, "raw_recon": 0.0, "raw_kl": 0.0}
        correct = 0
        for b in range(steps_per_epoch):
            idx = order[b * o.batch_size:(b + 1) * o.batch_size]
            x = augment_batch(train.images[idx], policy, aug_rng, True)
            y = train.labels[idx]
            lr = cosine_lr(step, total_steps, o.lr, o.lr_min_ratio) if o.schedule == "cosine" else o.lr
            set_lr(opt, lr)
            holder = {}

            def micro():
                out = supervised_forward(model, x, y, o.alpha, lat_rng, cfg.model.sup_stochastic,
                                         use_kl=vs.use_kl, use_recon=vs.use_recon)
                holder["out"] = out
                return out.loss.total

            accumulate_and_step(opt, [micro], names)
            step += 1
            out = holder["out"]
            for k, v in out.loss.as_dict().items():
                if k in sums:
                    sums[k] += v * len(idx)
            correct += int((out.logits.argmax(dim=-1).numpy() == y).sum())
        row = {"epoch": epoch, "alpha": o.alpha, "lr": lr,
               **{k: v / len(train) for k, v in sums.items()}, "train_acc": correct / len(train)}
        log.info("epoch %d total %.4f task %.4f acc %.3f", epoch, row["total"], row["task"], row["train_acc"])
        report.history.append(row)
    report.metrics.update(evaluate_supervised(model, cfg, test))
    report.wall_clock_s = time.perf_counter() - t0
    return report, model


# --------------------------------------------------------------------------
# Evaluate / ablate / persist
# --------------------------------------------------------------------------

def save_run(report: RunReport, model: VDLFNet, out_dir: Path) -> None:
    write_report(report, out_dir)
    save_checkpoint(model, out_dir / "model.ckpt")


def evaluate(checkpoint, cfg: RunConfig) -> RunReport:
    """Score a saved model without touching its parameters."""
    _setup(cfg)
    t0 = time.perf_counter()
    report = _new_report(cfg)
    if cfg.run.protocol == "supervised":
        train, test = load_supervised_data(cfg)
        model = build_model(cfg, n_classes=train.n_classes)
        load_checkpoint(model, checkpoint)
        report.metrics.update(evaluate_supervised(model, cfg, test))
    else:
        pool, split = load_episodic_data(cfg)
        model = build_model(cfg)
        load_checkpoint(model, checkpoint)
        report.episode_stats = evaluate_episodes(model, cfg, pool, split.test, cfg.episodic.test_episodes)
        report.metrics["test_mean_acc"] = report.episode_stats.mean
        report.metrics["test_ci95"] = report.episode_stats.ci95
    report.wall_clock_s = time.perf_counter() - t0
    return report


def ablation_table(reports: dict[AblationVariant, RunReport]) -> str:
    lines = [f"{'Variant':<34} {'K_eff':>5} {'Accuracy (%)':>18}", "-" * 59]
    for v in ABLATION_ORDER:
        if v not in reports:
            continue
        s = reports[v].episode_stats
        lines.append(f"{ABLATION_LABELS[v]:<34} {reports[v].k_effective:>5} "
                     f"{100 * s.mean:>9.2f} +- {100 * s.ci95:<5.2f}")
    return "\n".join(lines)


def ablate_all(cfg: RunConfig, out_dir: Path | None = None, pool=None, split=None):
    """Train every variant from scratch with the same base seed; return reports and the table."""
    if pool is None:
        pool, split = load_episodic_data(cfg)
    reports = {}
    for v in ABLATION_ORDER:
        report, model = train_episodic(cfg.with_variant(v), pool, split)
        reports[v] = report
        if out_dir is not None:
            save_run(report, model, out_dir / v.value)
    table = ablation_table(reports)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.txt").write_text(table + "\n")
        with open(out_dir / "ablation.jsonl", "w") as fh:
            for v, r in reports.items():
                fh.write(json.dumps({"variant": v.value, "k_effective": r.k_effective,
                                     "mean": r.episode_stats.mean, "ci95": r.episode_stats.ci95,
                                     "episodes": len(r.episode_stats.per_episode_acc)}) + "\n")
    return reports, table


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------

def tensor_class(name: str) -> str:
    """Group parameters by role: e.g. ``backbone.stages.0.weight`` -> ``conv.weight``."""
    parts = name.split(".")
    kind = parts[-1]
    if parts[0] == "backbone":
        if parts[1] == "proj":
            return f"proj.{kind}"
        # stages are [conv, bn, relu] repeated
        role = "conv" if int(parts[2]) % 3 == 0 else "bn"
        return f"{role}.{kind}"
    if parts[0] == "fusion":
        return f"{parts[1].rstrip('0123456789')}.{kind}"
    return f"{parts[0]}.{kind}"


def micro_episode_check(seed: int = 0, n_way: int = 2, k_shot: int = 1, q_queries: int = 2,
                        draws: int = 3, tau: float = 15.0, alpha: float = 0.01, side: int = 16,
                        coords_per_class: int = 200, h: float = 1e-4, rel_tol: float = 1e-4,
                        grad_transform=None, model_cfg: RunConfig | None = None, check_kinks: bool = True):
    """Finite-difference check of the full episodic loss on a tiny double-precision model."""
    cfg = model_cfg.copy() if model_cfg is not None else RunConfig()
    if model_cfg is None:
        cfg.model.widths = (8, 16, 16)
        cfg.model.dim = 24
        cfg.model.latent_dim = 12
        cfg.model.vae_hidden = 24
        cfg.model.gate_hidden = 16
    cfg.run.seed = seed
    model = build_model(cfg).double()
    model.train()
    pool = make_synthetic_dataset(n_way, k_shot + q_queries, side, seed)
    ep = next(episode_stream(pool, range(n_way), n_way, k_shot, q_queries, seed, "gradcheck", 1))
    sx = torch.from_numpy(pool.images[ep.support_idx]).double()
    qx = torch.from_numpy(pool.images[ep.query_idx]).double()
    eps = rngmod.normal(rngmod.stream(seed, "gradcheck-latent"), (len(sx), draws, cfg.model.latent_dim),
                        dtype=torch.float64)

    signs: list[torch.Tensor] = []

    def record(tensor):
        signs.append((tensor > 0).flatten())

    kinked = [m for m in model.backbone.stages if isinstance(m, torch.nn.ReLU)]
    for m in kinked:
        m.register_forward_hook(lambda mod, inp, out: record(inp[0]))
    f = model.fusion
    for m in (f.enc1, f.dec1, f.gate1):
        m.register_forward_hook(lambda mod, inp, out: record(out))

    def loss_fn():
        signs.clear()
        return episode_forward(model, sx, ep.support_y, qx, ep.query_y, n_way, draws, tau, alpha, None,
                               latent_eps=eps).loss.total

    named = [(n, p) for n, p in model.named_parameters()]
    return grad_check(loss_fn, named, tensor_class, coords_per_class=coords_per_class, h=h,
                      rel_tol=rel_tol, seed=seed, grad_transform=grad_transform,
                      pattern_fn=(lambda: torch.cat(signs)) if check_kinks else None)
