"""Command-line entry point.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..tensorcore import NonFiniteError
from . import stages
from .config import RunConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("pmdm_pet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pmdm-pet", description="Two-stage PET reconstruction experiments.")
    p.add_argument("--config", type=Path, help="key = value config file (default: <out>/config.txt if present)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="run directory (default: config 'out')")
    p.add_argument("--threads", type=int, help="cap BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("simulate", help="phantoms, sinograms, references and the manifest")
    sub.add_parser("train-estimator", help="fit the posterior-mean estimator")
    td = sub.add_parser("train-diffusion", help="fit the conditional denoiser")
    td.add_argument("--condition", choices=("posterior_mean", "sinogram"), default="posterior_mean")
    td.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    sp = sub.add_parser("sample", help="posterior samples for a split")
    sp.add_argument("--condition", choices=("posterior_mean", "sinogram"), default="posterior_mean")
    sp.add_argument("--n-samples", type=int, help="samples per slice (default: config n_samples)")
    sp.add_argument("--split", default="test")
    ev = sub.add_parser("evaluate", help="score prediction directories against the references")
    ev.add_argument("predictions", nargs="+", metavar="[NAME=]DIR", help="directories of <slice>.pimg files")
    ev.add_argument("--means", type=Path, help="posterior means, for the decomposition block")
    ev.add_argument("--samples", type=Path, help="posterior samples, for the decomposition block")
    ev.add_argument("--split", default="test")
    bl = sub.add_parser("baseline", help="classical reconstruction of a split")
    bl.add_argument("method", choices=stages.BASELINES)
    bl.add_argument("--split", default="test")
    bl.add_argument("--iterations", type=int, help="MLEM/OSEM iterations (default: from config)")
    bl.add_argument("--subsets", type=int, help="OSEM subsets (default: from config)")
    return p


def _method_arg(text: str) -> tuple[str, Path]:
    if "=" in text:
        name, path = text.split("=", 1)
        return name, Path(path)
    path = Path(text)
    name = path.name
    if name in ("samples", "means") and path.parent.name:
        name = f"{path.parent.name}-{name}"
    return name, path


def load_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    path = args.config
    if path is None and args.out is not None and (args.out / "config.txt").exists():
        path = args.out / "config.txt"
    cfg = RunConfig.load(path) if path is not None else RunConfig()
    return cfg.replace(**overrides) if overrides else cfg


def run(args) -> int:
    cfg = load_config(args)
    layout = stages.Layout(Path(cfg.out))
    cmd = args.command
    if cmd == "simulate":
        stages.simulate(cfg, layout)
    elif cmd == "train-estimator":
        stages.train_estimator(cfg, layout)
    elif cmd == "train-diffusion":
        stages.train_diffusion(cfg, layout, args.condition, resume=args.resume)
    elif cmd == "sample":
        if args.n_samples is not None and args.n_samples < 1:
            raise _UsageError("--n-samples must be >= 1")
        out = stages.sample(cfg, layout, args.condition, args.n_samples, args.split)
        print(out)
    elif cmd == "baseline":
        for flag in ("iterations", "subsets"):
            if getattr(args, flag) is not None and getattr(args, flag) < 1:
                raise _UsageError(f"--{flag} must be >= 1")
        print(stages.baseline(cfg, layout, args.method, args.split, args.iterations, args.subsets))
    elif cmd == "evaluate":
        if (args.means is None) != (args.samples is None):
            raise _UsageError("--means and --samples go together")
        methods = [_method_arg(m) for m in args.predictions]
        _, _, text = stages.evaluate(cfg, layout, methods, args.means, args.samples, args.split)
        sys.stdout.write(text)
    return EXIT_OK


class _UsageError(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise _UsageError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return run(args)
        return run(args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pmdm-pet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"pmdm-pet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (stages.DataError, FileNotFoundError, ValueError) as exc:
        print(f"pmdm-pet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
