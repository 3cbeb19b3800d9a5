"""
Command line entry point.

    python -m app.cli gen-data --config bench.conf --out runs/
    python -m app.cli train-lam action --config bench.conf
    python -m app.cli train-policy --config bench.conf --seed 0
    python -m app.cli evaluate --checkpoint runs/policy_la_tok_seed0.latb --strategy la_tok
    python -m app.cli suite lambda --config bench.conf
    python -m app.cli serve --port 8000

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, List, Optional

import uvicorn

from app.config import ConfigError, load_config, short_hash, write_config_echo
from app.database import SessionLocal, init_db, record_runs
from app.models.schemas import LamKind, RunConfig, StrategyName, SuiteName
from app.services.action_lam import ActionLam, export_tokens
from app.services.dataset import generate_dataset, write_dataset
from app.services.image_lam import ImageLam, write_token_cache
from app.services.report_writer import write_report
from app.services.suites import load_or_generate_dataset, run_suite
from app.services.tensor_core import NumericError
from app.services.training import (action_chunks, action_token_stream, evaluate_checkpoint, image_token_records,
                                   train_action_lam, train_image_lam, train_policy)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-bench",
                                     description="Train latent action models and policies, run ablation suites")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key = value config file (default: built-in)")
    common.add_argument("--seed", type=int, default=None, help="Run a single seed instead of the configured list")
    common.add_argument("--out", type=Path, default=None, help="Output directory (overrides output_dir)")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="Generate scripted-expert demonstrations")
    lam = sub.add_parser("train-lam", parents=[common], help="Train a latent action model")
    lam.add_argument("kind", choices=[k.value for k in LamKind])
    sub.add_parser("train-policy", parents=[common], help="Train a policy with the configured strategy")
    ev = sub.add_parser("evaluate", parents=[common], help="Evaluate a policy checkpoint in the environment")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--strategy", choices=[s.value for s in StrategyName], default=None,
                    help="Fail unless the checkpoint was trained with this strategy (default: the configured strategy)")
    suite = sub.add_parser("suite", parents=[common], help="Run an ablation suite and write its CSV report")
    suite.add_argument("name", choices=[s.value for s in SuiteName])
    serve = sub.add_parser("serve", parents=[common], help="Serve the read-only run registry API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _load(args) -> RunConfig:
    overrides = {"seeds": None if args.seed is None else [args.seed],
                 "output_dir": None if args.out is None else str(args.out)}
    return load_config(args.config, overrides)


def cmd_gen_data(config: RunConfig, out_dir: Path) -> Path:
    env = config.env
    dataset = generate_dataset(env.tasks, env.n_demos, env.seed, env.image_size, env.max_failure_rate)
    path = out_dir / "dataset.lads"
    write_dataset(path, dataset)
    return path


def cmd_train_lam(config: RunConfig, out_dir: Path, kind: str) -> Path:
    dataset = load_or_generate_dataset(config, out_dir)
    if LamKind(kind) == LamKind.action:
        chunks = action_chunks(dataset, config.horizon)
        model, _ = train_action_lam(chunks, config.action_lam, dataset.normalizer)
        path = out_dir / "action_lam.latb"
        model.save(path)
        export_tokens(out_dir / "action_tokens.txt", action_token_stream(model, chunks))
    else:
        model, _ = train_image_lam(dataset, config.image_lam)
        path = out_dir / "image_lam.latb"
        model.save(path)
        write_token_cache(out_dir / "image_tokens.latc", image_token_records(model, dataset),
                          config.tokens_per_step, config.image_lam.latent_dim)
    logger.info(f"{kind} latent model saved to {path}")
    return path


def cmd_train_policy(config: RunConfig, out_dir: Path, session_factory) -> List[Path]:
    write_config_echo(out_dir, config)
    dataset = load_or_generate_dataset(config, out_dir)
    action_lam = ActionLam.load(config.action_lam_checkpoint) if config.action_lam_checkpoint else None
    image_lam = ImageLam.load(config.image_lam_checkpoint) if config.image_lam_checkpoint else None
    digest = short_hash(config)
    paths = []
    for seed in config.seeds:
        started = time.perf_counter()
        run = train_policy(config, dataset, seed, action_lam=action_lam, image_lam=image_lam, out_dir=out_dir)
        paths.append(run.checkpoint)
        record_runs(session_factory, [{"strategy": config.strategy.value, "seed": seed, "steps": run.steps,
                                       "wall_clock_s": time.perf_counter() - started, "config_hash": digest,
                                       "checkpoint_path": str(run.checkpoint)}])
    return paths


def cmd_evaluate(config: RunConfig, out_dir: Path, checkpoint: Path, strategy: Optional[str],
                 session_factory) -> Path:
    label = strategy or config.strategy.value
    write_config_echo(out_dir, config)
    started = time.perf_counter()
    result = evaluate_checkpoint(checkpoint, config.env.tasks, config.seeds, config.eval_episodes,
                                 expected_strategy=label, workers=config.eval_workers)
    elapsed = time.perf_counter() - started
    digest = short_hash(config)
    rows = [{"strategy": label, "seed": seed, "task": task, "score": score, "steps": 0, "wall_clock_s": elapsed,
             "config_hash": digest, "status": "ok", "checkpoint_path": str(checkpoint)}
            for (task, seed), score in result.per_seed.items()]
    for task, mean in result.per_task.items():
        logger.info(f"{task}: mean score {mean:.3f}")
    record_runs(session_factory, rows)
    return write_report(out_dir / "evaluate.csv", rows, config.report_wall_clock)


def main(argv: Optional[List[str]] = None, session_factory: Optional[Callable] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    if session_factory is None:
        init_db()
        session_factory = SessionLocal

    try:
        config = _load(args)
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            cmd_gen_data(config, out_dir)
        elif args.command == "train-lam":
            cmd_train_lam(config, out_dir, args.kind)
        elif args.command == "train-policy":
            cmd_train_policy(config, out_dir, session_factory)
        elif args.command == "evaluate":
            cmd_evaluate(config, out_dir, args.checkpoint, args.strategy, session_factory)
        elif args.command == "suite":
            path = run_suite(args.name, config, out_dir, session_factory)
            logger.info(f"Suite report: {path}")
        elif args.command == "serve":
            uvicorn.run("app.main:app", host=args.host, port=args.port)
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
