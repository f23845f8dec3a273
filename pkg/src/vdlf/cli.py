"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import FIELD_INDEX, load_config, profile_names, serialize_config
from .errors import ConfigError, NumericFailure, VDLFError

log = logging.getLogger("vdlf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help=f"config file or profile name ({', '.join(profile_names())})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    keys = p.add_argument_group("config keys")
    for key, (section, _) in FIELD_INDEX.items():
        if key == "mode":
            continue
        keys.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V",
                          help=f"[{section}] {key}")


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    for key in FIELD_INDEX:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            out[key] = v
    return out


def _config(args, mode: str | None, check_paths: bool = True):
    overrides = _overrides(args)
    if mode is not None:
        overrides["mode"] = mode
    return load_config(args.config, overrides, check_paths=check_paths)


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.output_path()


def cmd_train_sup(args) -> int:
    from .training import save_run, train_supervised

    cfg = _config(args, "supervised")
    cfg.run.protocol = "supervised"
    report, model = train_supervised(cfg)
    out = _out_dir(args, cfg)
    save_run(report, model, out)
    print("\n".join(report.summary_lines()))
    print(f"run written to {out}")
    return 0


def cmd_train_epi(args) -> int:
    from .training import save_run, train_episodic

    cfg = _config(args, "episodic")
    cfg.run.protocol = "episodic"
    report, model = train_episodic(cfg)
    out = _out_dir(args, cfg)
    save_run(report, model, out)
    print("\n".join(report.summary_lines()))
    print(f"run written to {out}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, write_report

    cfg = _config(args, "eval")
    report = evaluate(args.checkpoint, cfg)
    if args.out:
        write_report(report, Path(args.out))
    print("\n".join(report.summary_lines()))
    return 0


def cmd_ablate(args) -> int:
    from .training import ablate_all

    cfg = _config(args, "ablate")
    out = _out_dir(args, cfg)
    _, table = ablate_all(cfg, out)
    print(table)
    print(f"ablation written to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .training import micro_episode_check

    report = micro_episode_check(seed=args.seed, coords_per_class=args.coords, rel_tol=args.rel_tol,
                                 h=args.step)
    for name, row in report.per_class.items():
        status = "ok" if row["max_rel_error"] < report.rel_tol else "FAIL"
        print(f"{name:<14} coords={row['coords']:<4} kinks={row['kinks']:<3} "
              f"max_rel_err={row['max_rel_error']:.3e}  {status}")
    print(f"max relative error {report.max_rel_error:.3e} at {report.worst}")
    if not report.passed:
        raise NumericFailure(f"gradient check failed for: {', '.join(report.failing)}")
    return 0


def cmd_synth(args) -> int:
    import numpy as np

    from .dataio import ImageSet, make_synthetic_dataset, serialize_cifar100_binary
    from .rng import stream

    data = make_synthetic_dataset(args.classes, args.per_class + args.test_per_class, 32, args.seed,
                                  noise=args.noise)
    test_mask = np.zeros(len(data), dtype=bool)
    r = stream(args.seed, "synth-holdout")
    for members in data.class_indices().values():
        test_mask[r.choice(members, size=args.test_per_class, replace=False)] = True
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, mask in (("train.bin", ~test_mask), ("test.bin", test_mask)):
        part = ImageSet(data.images[mask], data.labels[mask], data.class_names)
        (out / name).write_bytes(serialize_cifar100_binary(part))
    print(f"wrote {int((~test_mask).sum())} train / {int(test_mask.sum())} test records to {out}")
    return 0


def cmd_config(args) -> int:
    cfg = _config(args, args.mode, check_paths=False)
    sys.stdout.write(serialize_config(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vdlf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-sup", help="supervised training + test metrics")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory (default: output_dir, under $VDLF_OUTPUT_ROOT)")
    p.set_defaults(func=cmd_train_sup)

    p = sub.add_parser("train-epi", help="episodic meta-training + test episodes")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_epi)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write report files here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all seven ablation variants")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full episodic loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200, help="coordinates per tensor class")
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-4, help="central-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic corpus in the CIFAR-100 binary layout")
    p.add_argument("--out", required=True, help="directory for train.bin / test.bin")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--test-per-class", type=int, default=10)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", help="print the normalized config")
    _add_config_flags(p)
    p.add_argument("--mode", help="override the run mode (default: the profile's)")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VDLFError as exc:
        print(f"vdlf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
