"""``ftdba`` command line: ``run | sweep | ablate | theory | minpoison``.

Exit status is 0 on success, 2 on a configuration error and 3 on a
numerical failure; failures print one diagnostic line on stderr.
Artifacts go to ``<root>/<output_dir or config stem>`` where ``root`` is
``$FTDBA_OUTPUT_ROOT`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as E
from .config import load_config
from .errors import ConfigError, FTDBAError, NonFiniteGradient, UnknownParameter

OUTPUT_ENV = "FTDBA_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def output_dir(config_path: str, cfg) -> Path:
    root = Path(os.environ.get(OUTPUT_ENV, "runs"))
    return root / (cfg.output_dir or Path(config_path).stem)


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftdba", description="Fractal trigger backdoor lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "single attack run plus benign baseline"),
                        ("sweep", "3-seed median sweep over one parameter"),
                        ("ablate", "perturbation-stage ablation"),
                        ("theory", "closed-form theory table"),
                        ("minpoison", "minimum poison count search, fractal vs block")):
        sp = sub.add_parser(name, help=help_, aliases=["theory-table"] if name == "theory" else [])
        sp.add_argument("config")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        if name == "sweep":
            sp.add_argument("--param", required=True)
            sp.add_argument("--values", required=True)
        if name == "minpoison":
            sp.add_argument("--target", type=float, default=None)
    return p


def dispatch(args) -> object:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = output_dir(args.config, cfg)
    if args.command == "run":
        return E.run_single(cfg, out)
    if args.command == "sweep":
        return E.run_sweep(cfg, args.param, _values(args.values), out)
    if args.command == "ablate":
        return E.run_ablation(cfg, out)
    if args.command in ("theory", "theory-table"):
        rows = E.run_theory(cfg, out)
        sys.stdout.write((out / "theory.csv").read_text())
        return rows
    return E.run_minpoison(cfg, cfg.asr_target if args.target is None else args.target, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except (ConfigError, UnknownParameter) as exc:
        print(f"ftdba: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteGradient, FloatingPointError) as exc:
        print(f"ftdba: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FTDBAError as exc:
        print(f"ftdba: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
