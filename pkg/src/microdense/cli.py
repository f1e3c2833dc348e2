"""Command-line entry point: plan, train, eval, gradcheck, ablate."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path


from .config import ConfigError, RunConfig, dump_config, load_config

EXIT_FAIL = 1


class DataSpecError(ValueError):
    pass


def _config_or_default(path) -> RunConfig:
    if path is None:
        return RunConfig(*[cls() for cls in _default_classes()])
    return load_config(path)


def _default_classes():
    from .data import SyntheticSpec
    from .planner import ArchConfig
    from .trainer import TrainConfig

    return ArchConfig, TrainConfig, SyntheticSpec


def resolve_data(spec: str, cfg: RunConfig, normalization=None):
    """Parse ``cifar10:DIR``, ``cifar100:DIR`` or ``synthetic`` into (train, test)."""
    from .data import load_cifar, make_synthetic

    if spec == "synthetic":
        return make_synthetic(cfg.synthetic)
    kind, sep, directory = spec.partition(":")
    if not sep or kind not in ("cifar10", "cifar100"):
        raise DataSpecError(f"--data must be cifar10:DIR, cifar100:DIR or synthetic, got {spec!r}")
    if not Path(directory).is_dir():
        raise DataSpecError(f"data directory {directory!r} does not exist")
    train = load_cifar(directory, "train", kind, normalization)
    test = load_cifar(directory, "test", kind, normalization or train.normalization())
    return train, test


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} already holds a run; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def cmd_plan(args) -> int:
    from .planner import format_plan, plan_network

    cfg = _config_or_default(args.config)
    plan = plan_network(cfg.arch)
    if args.json:
        print(plan.to_json())
    else:
        print(format_plan(plan, block_trace=args.block_trace))
    return 0


def cmd_train(args) -> int:
    from .data import save_normalization
    from .network import build_network
    from .trainer import train

    cfg = load_config(args.config)
    if args.iterations:
        cfg.train.iterations = args.iterations
        cfg.train.__post_init__()
    train_data, test_data = resolve_data(args.data, cfg)
    out = Path(args.out)
    if args.resume:
        # resuming continues the run in place; the checkpoint may live in out
        out.mkdir(parents=True, exist_ok=True)
    else:
        _prepare_out(out, args.force)
    if cfg.ablation is not None:
        from .ablation import AblationSpec, build_ablation_network

        net = build_ablation_network(AblationSpec(**cfg.ablation), seed=cfg.train.seed, dtype=cfg.train.dtype)
    else:
        net = build_network(cfg.arch, seed=cfg.train.seed, dtype=cfg.train.dtype)
    (out / "config.json").write_text(dump_config(cfg))
    save_normalization(out / "normalization.json", train_data)
    meta = {"normalization": train_data.normalization(), "data": args.data}
    metrics = train(net, train_data, cfg.train, eval_data=test_data, out_dir=out,
                    resume_from=args.resume, extra_meta=meta)
    last = metrics.last_eval
    if last is not None:
        print(f"iter {last['iter']}: eval_acc={last['eval_acc']:.4f} eval_loss={last['eval_loss']:.4f}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'final.mdnw'}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import evaluate

    net, meta = load_checkpoint(args.checkpoint)
    cfg = _config_or_default(args.config)
    train_data, test_data = resolve_data(args.data, cfg, meta.get("normalization"))
    data = test_data if args.split == "test" else train_data
    acc, loss = evaluate(net, data)
    print(json.dumps({"split": args.split, "count": len(data), "accuracy": acc, "loss": loss}))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import block_gradcheck, downscale, network_gradcheck

    cfg = _config_or_default(args.config)
    small = downscale(cfg.arch)
    results = {}
    results.update({f"block/{k}": v for k, v in block_gradcheck(n=cfg.arch.n, gc=cfg.arch.gc, ra=cfg.arch.ra).items()})
    results.update({f"block-ds/{k}": v for k, v in
                    block_gradcheck(n=cfg.arch.n, gc=cfg.arch.gc, ra=cfg.arch.ra, downsample=True).items()})
    results.update({f"net/{k}": v for k, v in network_gradcheck(small).items()})
    worst = max(results, key=results.get)
    failed = {k: v for k, v in results.items() if not v < args.tolerance}
    for k, v in failed.items():
        print(f"FAIL {k}: max relative error {v:.3e}")
    print(f"checked {len(results)} tensors; worst {worst} = {results[worst]:.3e} (tolerance {args.tolerance:g})")
    return EXIT_FAIL if failed else 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation, summarize

    cfg = _config_or_default(args.config)
    train_data, test_data = resolve_data(args.data, cfg)
    out = Path(args.out)
    _prepare_out(out, args.force)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(args.kind, args.budget, train_data, test_data, cfg.train, seeds,
                        out_dir=out, **(cfg.ablation or {}))
    for variant, acc in summarize(rows).items():
        print(f"{variant:<14} mean test acc {acc:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microdense", description="Micro-dense network planner and trainer")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("plan", help="print the per-layer plan with parameter and FLOP totals")
    s.add_argument("--config")
    s.add_argument("--block-trace", action="store_true", help="list every layer inside each block")
    s.add_argument("--json", action="store_true", help="emit the structured plan document")
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("train", help="train and write metrics.csv plus checkpoints")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.add_argument("--resume")
    s.add_argument("--iterations", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of a down-scaled instance")
    s.add_argument("--config")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("ablate", help="budget-matched architecture comparison")
    s.add_argument("--kind", required=True, choices=("depth-sweep", "growth-mode", "aggregation"))
    s.add_argument("--budget", required=True, type=int)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seeds", default="0")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.fn(args)
    except (ConfigError, DataSpecError, FileNotFoundError, FileExistsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
