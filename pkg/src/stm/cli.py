"""``stm`` command line: gen-data, train, merge, sweep, eval and the full pipeline.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from .metrics import MetricError
from .pipeline import (
    MODELS,
    ConfigError,
    PipelineError,
    eval_checkpoint,
    gen_data,
    headline,
    load_config,
    merge_file,
    run_stm,
    sweep_method,
    train_model,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON pipeline config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, default=1, help="parallel sweep workers")
    common.add_argument("--budget", type=int, help="override sweep.budget")

    p = argparse.ArgumentParser(prog="stm", description="Synthesize, train and merge toy retrieval experts.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the toy four-split datasets")
    t = sub.add_parser("train", parents=[common], help="fine-tune one expert or the pooled model")
    t.add_argument("split", choices=MODELS)
    m = sub.add_parser("merge", parents=[common], help="apply a merge recipe (JSON) to trained experts")
    m.add_argument("recipe")
    m.add_argument("--out", help="output checkpoint path")
    s = sub.add_parser("sweep", parents=[common], help="search merge coefficients on the dev sets")
    s.add_argument("--method", action="append", choices=["linear", "task_arithmetic", "ties"], help="repeatable; defaults to sweep.methods")
    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on the dev or test sets")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", choices=["dev", "test"], default="test")
    r = sub.add_parser("stm", parents=[common], help="run the whole pipeline and write the final report")
    r.add_argument("--max-pairs", type=int, help="subsample every training split to N pairs")
    return p


def _run(args) -> int:
    overrides = {"seed": args.seed, "sweep.budget": args.budget}
    if getattr(args, "max_pairs", None) is not None:
        overrides["data.max_pairs"] = args.max_pairs
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    cfg = load_config(args.config, **overrides)
    if args.command == "gen-data":
        parts = gen_data(cfg)
        print(f"wrote {sum(len(v) for v in parts.values())} datasets to {cfg.paths.data_dir}")
    elif args.command == "train":
        train_model(cfg, args.split)
        print(f"trained {args.split} -> {cfg.paths.checkpoint_dir}/{args.split}.ckpt")
    elif args.command == "merge":
        print(f"wrote {merge_file(cfg, args.recipe, args.out)}")
    elif args.command == "sweep":
        for method in args.method or cfg.sweep.methods:
            board = sweep_method(cfg, method, workers=args.workers)
            best = board.best
            print(f"{method}: {len(board.rows)} recipes, best ndcg@10={best.score:.4f} weights={best.recipe.weights}")
    elif args.command == "eval":
        print(eval_checkpoint(cfg, args.checkpoint, args.dataset).to_table(), end="")
    elif args.command == "stm":
        body = run_stm(cfg, workers=args.workers)
        for name, score in headline(body, "test").items():
            print(f"{name:16s} test avg ndcg@10 {score:.4f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, MetricError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
