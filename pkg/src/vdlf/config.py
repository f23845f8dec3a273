"""Run configuration: an INI grammar with five fixed sections.

Every key is unique across sections, so ``--key value`` CLI flags and
``key=value`` overrides can address it without naming the section. Tuples are
comma-separated; pooling grids are written ``HxW``.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import io
import os
import typing
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError, DataError
from .evalmetrics import AblationVariant, variant_settings

MODES = ("supervised", "episodic", "eval", "ablate", "gradcheck")
SOURCES = ("synthetic", "cifar100", "folder")
OUTPUT_ROOT_ENV = "VDLF_OUTPUT_ROOT"


@dataclass
class RunSection:
    mode: str = "episodic"
    protocol: str = "episodic"  # what eval measures: episodic | supervised
    seed: int = 42
    output_dir: str = "runs/default"
    deterministic: bool = True
    variant: str = "full"
    eval_untrained: bool = False


@dataclass
class DataSection:
    source: str = "synthetic"
    path: str = ""
    split_manifest: str = ""
    subset_classes: int = 0  # supervised: keep the first N classes (0 = all)
    image_side: int = 32
    synth_classes: int = 30
    synth_per_class: int = 40
    synth_noise: float = 0.05
    synth_seed: int = 7
    test_fraction: float = 0.2  # supervised synthetic: held-out images per class
    pad: int = 4
    hflip_prob: float = 0.5
    rotation_degrees: float = 0.0
    channel_mean: tuple[float, ...] = (0.5071, 0.4865, 0.4409)
    channel_std: tuple[float, ...] = (0.2673, 0.2564, 0.2762)


@dataclass
class ModelSection:
    widths: tuple[int, ...] = (32, 64, 128, 256)
    pool_grids: tuple[tuple[int, int], ...] = ((2, 2), (1, 1))
    dim: int = 256
    latent_dim: int = 128
    vae_hidden: int = 256
    gate_hidden: int = 64
    draws: int = 15  # T, Monte-Carlo latent draws per support image
    tau: float = 15.0
    norm_eps: float = 1e-8
    center_momentum: float = 0.1
    sup_stochastic: bool = True  # one latent draw per image in supervised training


@dataclass
class EpisodicSection:
    n_way: int = 5
    k_shot: int = 5
    q_queries: int = 15
    train_episodes: int = 150
    test_episodes: int = 100


@dataclass
class OptimSection:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 0.01
    accumulation: int = 4
    schedule: str = "constant"  # constant | cosine
    lr_min_ratio: float = 0.1
    epochs: int = 180
    batch_size: int = 128


SECTIONS = {"run": RunSection, "data": DataSection, "model": ModelSection,
            "episodic": EpisodicSection, "optim": OptimSection}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    episodic: EpisodicSection = field(default_factory=EpisodicSection)
    optim: OptimSection = field(default_factory=OptimSection)

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)

    def with_variant(self, variant: AblationVariant) -> "RunConfig":
        cfg = self.copy()
        cfg.run.variant = variant.value
        return cfg

    @property
    def variant(self):
        return variant_settings(self.run.variant)

    def effective_grids(self) -> tuple[tuple[int, int], ...]:
        only = self.variant.only_grid
        if only is None:
            return self.model.pool_grids
        if tuple(only) not in [tuple(g) for g in self.model.pool_grids]:
            raise ConfigError(f"variant {self.run.variant} needs a {only[0]}x{only[1]} pooling grid")
        return (tuple(only),)

    def manifest_path(self) -> Path:
        return resolve_manifest(self.data.split_manifest)

    def output_path(self) -> Path:
        p = Path(self.run.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    def validate(self, check_paths: bool = True) -> "RunConfig":
        r, d, m, e, o = self.run, self.data, self.model, self.episodic, self.optim
        checks = [
            (r.mode in MODES, f"mode must be one of {MODES}"),
            (r.protocol in ("episodic", "supervised"), "protocol must be episodic or supervised"),
            (d.source in SOURCES, f"source must be one of {SOURCES}"),
            (m.tau > 0, "tau must be > 0"),
            (o.alpha >= 0, "alpha must be >= 0"),
            (m.draws >= 1, "draws (T) must be >= 1"),
            (m.norm_eps > 0, "norm_eps must be > 0"),
            (0 <= m.center_momentum <= 1, "center_momentum must be in [0, 1]"),
            (min(e.n_way, e.k_shot, e.q_queries) >= 1, "n_way, k_shot, q_queries must be >= 1"),
            (e.n_way >= 2, "n_way must be >= 2"),
            (e.train_episodes >= 0 and e.test_episodes >= 0, "episode counts must be >= 0"),
            (o.lr > 0 and o.weight_decay >= 0, "lr must be > 0 and weight_decay >= 0"),
            (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1, "betas must be in [0, 1)"),
            (o.accumulation >= 1, "accumulation must be >= 1"),
            (o.schedule in ("constant", "cosine"), "schedule must be constant or cosine"),
            (o.epochs >= 0 and o.batch_size >= 1, "epochs >= 0 and batch_size >= 1"),
            (0 < d.test_fraction < 1, "test_fraction must be in (0, 1)"),
            (len(d.channel_mean) == len(d.channel_std), "channel_mean/std length mismatch"),
            (all(s > 0 for s in d.channel_std), "channel_std must be > 0"),
            (0 <= d.hflip_prob <= 1, "hflip_prob must be in [0, 1]"),
            (len(m.pool_grids) >= 1 and m.dim >= 1, "need >= 1 pooling grid and dim >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        AblationVariant.parse(r.variant)
        self.effective_grids()
        if check_paths and d.source != "synthetic":
            if not d.path or not Path(d.path).exists():
                raise DataError(f"dataset path does not exist: {d.path!r}")
            if d.source == "folder" and not self.manifest_path().is_file():
                raise DataError(f"split manifest does not exist: {d.split_manifest!r}")
        return self


def resolve_manifest(value: str) -> Path:
    """``builtin:<file>`` names a manifest shipped with the package."""
    if value.startswith("builtin:"):
        return Path(str(resources.files("vdlf.profiles") / value[len("builtin:"):]))
    return Path(value)


# --------------------------------------------------------------------------
# Text form
# --------------------------------------------------------------------------

def _field_index():
    out = {}
    for sec, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            out[f.name] = (sec, hints[f.name])
    return out


FIELD_INDEX = _field_index()


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    _, tp = FIELD_INDEX[key]
    text = text.strip()
    try:
        if tp is bool:
            return _parse_bool(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if tp == tuple[int, ...]:
            return tuple(int(t) for t in text.split(",") if t.strip())
        if tp == tuple[float, ...]:
            return tuple(float(t) for t in text.split(",") if t.strip())
        if tp == tuple[tuple[int, int], ...]:
            grids = []
            for t in text.split(","):
                h, w = t.strip().lower().split("x")
                grids.append((int(h), int(w)))
            return tuple(grids)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    raise ConfigError(f"unsupported type for {key}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{h}x{w}" for h, w in value)
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_key(cfg: RunConfig, key: str, value) -> None:
    if key not in FIELD_INDEX:
        raise ConfigError(f"unknown config key {key!r}")
    sec, _ = FIELD_INDEX[key]
    if isinstance(value, str):
        value = parse_value(key, value)
    setattr(getattr(cfg, sec), key, value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    cfg = base.copy() if base is not None else RunConfig()
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in FIELD_INDEX or FIELD_INDEX[key][0] != sec:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            set_key(cfg, key, raw)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    for sec in SECTIONS:
        buf.write(f"[{sec}]\n")
        for f in fields(getattr(cfg, sec)):
            buf.write(f"{f.name} = {format_value(getattr(getattr(cfg, sec), f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def config_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def profile_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("vdlf.profiles").iterdir() if p.name.endswith(".cfg"))


def profile_text(name: str) -> str:
    res = resources.files("vdlf.profiles") / f"{name}.cfg"
    if not res.is_file():
        raise ConfigError(f"unknown profile {name!r}; available: {', '.join(profile_names())}")
    return res.read_text()


def load_config(source: str | None = None, overrides: dict | None = None,
                check_paths: bool = True) -> RunConfig:
    """Load a config file path or a shipped profile name, then apply ``key: value`` overrides."""
    cfg = RunConfig()
    if source:
        if Path(source).is_file():
            cfg = parse_config(Path(source).read_text())
        else:
            cfg = parse_config(profile_text(source))
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    return cfg.validate(check_paths=check_paths)
