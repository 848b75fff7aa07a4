"""``unite-sampler <verify|sample|sweep|train> --config PATH``.

Exit status: 0 success, 1 runtime or check failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import kernels, modelfile
from .config import ConfigError, load_config
from .pipeline import bundle_oracle, run_sweep, write_sample_outputs
from .sampler import sample
from .trainer import TrainingDiverged, make_dataset, train_expert

log = logging.getLogger("unite_sampler")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    if not path.is_dir() or not os.access(path, os.W_OK | os.X_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _parse_values(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be a comma-separated list of numbers, got {text!r}") from None


def cmd_verify(args):
    cfg = load_config(args.config)
    cfg.validate_for("sample")
    out = _writable_dir(Path(args.out) if args.out else cfg.output_dir)
    from .verify import format_result, run_checks, write_report

    results = run_checks(cfg, seed=args.seed, workers=args.workers or cfg.workers())
    for r in results:
        print(format_result(r))
    text = write_report(results, out)
    print(text.splitlines()[-1])
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_sample(args):
    cfg = load_config(args.config)
    cfg.validate_for("sample")
    out = _writable_dir(Path(args.out) if args.out else cfg.output_dir)
    bundle, spec, sched = cfg.bundle, cfg.composition(), cfg.schedule
    scfg = cfg.sampler(seed=args.seed)
    grid = cfg.grid(bundle.dim)
    chains = cfg.chains(args.chains)
    batch = sample(bundle, spec, sched, scfg, chains, workers=args.workers or cfg.workers())
    rec = write_sample_outputs(out, batch, grid, bundle_oracle(bundle, spec, grid))
    print(f"wrote {chains} samples to {out} (mean {rec['mean']})")
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_config(args.config)
    cfg.validate_for("sweep")
    values = _parse_values(args.values)
    bundle, spec = cfg.bundle, cfg.composition()
    if not 0 <= args.index < bundle.N:
        raise UsageError(f"--index {args.index} out of range for {bundle.N} experts")
    out = _writable_dir(Path(args.out) if args.out else cfg.output_dir)
    scfg = cfg.sampler(seed=args.seed)
    rows = run_sweep(
        bundle, spec, cfg.schedule, scfg, cfg.grid(bundle.dim), cfg.chains(args.chains),
        args.param, args.index, values, args.shared_noise, out, workers=args.workers or cfg.workers(),
    )
    skipped = sum(r["status"] == "skipped" for r in rows)
    print(f"sweep of {args.param}[{args.index}] over {len(values)} values: {len(rows) - skipped} sampled, {skipped} skipped")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    cfg.validate_for("train")
    tcfg = cfg.train_config()
    block = cfg.raw["train"]
    target = Path(args.out) if args.out else cfg.output_dir / "model.udme"
    _writable_dir(target.parent)
    ds_block = block["dataset"]
    try:
        ds = make_dataset(ds_block["generator"], ds_block["n"], ds_block.get("seed", 0), **ds_block.get("params", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset invalid: {exc}") from exc
    expert, curve = train_expert(ds, block["hidden"], cfg.schedule, tcfg)
    modelfile.save(expert, target)
    with open(target.parent / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for k, v in enumerate(curve):
            w.writerow([k, repr(v)])
    if curve:
        print(f"trained {expert}: loss {curve[0]:.4f} -> {curve[-1]:.4f}; model written to {target}")
    else:
        print(f"wrote untrained initialization to {target}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="unite-sampler", description="Compositional diffusion sampling with a reliability-weighted product of experts.")
    p.add_argument("--backend", choices=kernels.available_backends(), help="kernel implementation (default: compiled if built)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (train: model file path)")
        sp.add_argument("--seed", type=int, help="override the sampler seed")
        sp.add_argument("--workers", type=int, default=None, help="threads for chain blocks")

    v = sub.add_parser("verify", help="run the identity, oracle and Monte-Carlo checks")
    common(v, config_required=False)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sample", help="draw composed samples")
    common(s)
    s.add_argument("--chains", type=int, help="number of chains M")
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("sweep", help="sample over a grid of reliability factors or weights")
    common(w)
    w.add_argument("--chains", type=int)
    w.add_argument("--param", choices=["a", "w"], required=True)
    w.add_argument("--index", type=int, required=True)
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--shared-noise", action="store_true", help="start every cell from the same initial draws")
    w.set_defaults(func=cmd_sweep)

    t = sub.add_parser("train", help="train an MLP expert and write a model file")
    common(t)
    t.set_defaults(func=cmd_train)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify" and args.seed is None:
        args.seed = 0
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "chains", None) is not None and args.chains < 1:
        print("error: --chains must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.backend:
        kernels.use_backend(args.backend)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
