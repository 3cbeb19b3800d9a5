"""
Ablation suites.

Each suite is a list of variants (strategy plus config overrides). Every variant
is trained and evaluated for every seed; results become one CSV row per
(variant, seed, task) and are mirrored into the run registry.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from app.config import short_hash, write_config_echo
from app.database import record_runs
from app.models.schemas import RunConfig, StrategyName, SuiteName
from app.services.action_lam import ActionLam
from app.services.dataset import Dataset, generate_dataset, read_dataset, write_dataset
from app.services.image_lam import ImageLam
from app.services.report_writer import write_report
from app.services.strategies import (ACTION_TARGET_VARIANTS, ALIGN_CHOICES, IMAGE_TARGET_VARIANTS, build_layout,
                                     resolve_align_layer)
from app.services.training import action_chunks, evaluate, train_action_lam, train_image_lam, train_policy

logger = logging.getLogger(__name__)

LAMBDA_VALUES = (0.1, 0.2, 0.5)
DATA_FRACTIONS = (0.33, 0.5, 1.0)


@dataclass
class Variant:
    strategy: StrategyName
    param: str = ""
    overrides: Dict[str, Any] = field(default_factory=dict)
    joint: bool = True


def suite_variants(name: str, config: RunConfig) -> List[Variant]:
    suite = SuiteName(name)
    h, p = config.horizon, config.tokens_per_step
    if suite == SuiteName.placeholder:
        return [Variant(s, f"placeholders={build_layout(s, h, p).total_length}")
                for s in (StrategyName.baseline, StrategyName.ph_direct, StrategyName.ph_cond,
                          StrategyName.la_direct, StrategyName.la_cond)]
    if suite == SuiteName.align_layer:
        return [Variant(StrategyName.la_align, f"align={choice}", {"align_layer": choice})
                for choice in ALIGN_CHOICES]
    if suite == SuiteName.lambda_:
        return [Variant(StrategyName.la_tok, f"lambda={lam}", {"lambda_latent": lam}) for lam in LAMBDA_VALUES]
    if suite == SuiteName.data_fraction:
        return [Variant(s, f"fraction={frac}", {"data_fraction": frac})
                for s in (StrategyName.baseline, StrategyName.la_tok) for frac in DATA_FRACTIONS]
    if suite == SuiteName.disc_vs_cont:
        return [Variant(s) for s in (StrategyName.baseline, StrategyName.la_direct, StrategyName.direct_c,
                                     StrategyName.la_tok, StrategyName.tok_c)]
    if suite == SuiteName.joint:
        return [Variant(s, mode, joint=(mode == "multi"))
                for s in (StrategyName.baseline, StrategyName.la_cond) for mode in ("single", "multi")]
    raise ValueError(f"suite '{name}' has no variants of its own")


SUITE_DESCRIPTIONS = {
    SuiteName.placeholder: "Placeholder length controls (PH-L) against latent strategies",
    SuiteName.align_layer: "Alignment layer choice for la_align",
    SuiteName.lambda_: "Latent loss weight sensitivity for la_tok",
    SuiteName.data_fraction: "Data efficiency: baseline vs la_tok on dataset prefixes",
    SuiteName.disc_vs_cont: "Discrete token supervision vs continuous regression",
    SuiteName.joint: "Per-task vs joint multi-task training",
}


def variant_config(config: RunConfig, variant: Variant) -> RunConfig:
    update: Dict[str, Any] = {"strategy": variant.strategy}
    for key, value in variant.overrides.items():
        update[key] = resolve_align_layer(config.backbone.layers, value) if key == "align_layer" else value
    return RunConfig(**{**config.model_dump(), **update})


def load_or_generate_dataset(config: RunConfig, out_dir: Path) -> Dataset:
    if config.dataset:
        return read_dataset(config.dataset)
    env = config.env
    dataset = generate_dataset(env.tasks, env.n_demos, env.seed, env.image_size, env.max_failure_rate)
    write_dataset(out_dir / "dataset.lads", dataset)
    return dataset


def prepare_latent_models(config: RunConfig, dataset: Dataset, out_dir: Path, need_image: bool,
                          need_action: bool) -> Tuple[Optional[ActionLam], Optional[ImageLam]]:
    """Load the configured latent model checkpoints, training missing ones into ``out_dir/lam``."""
    action_lam, image_lam = None, None
    if need_action:
        if config.action_lam_checkpoint:
            action_lam = ActionLam.load(config.action_lam_checkpoint)
        else:
            action_lam, _ = train_action_lam(action_chunks(dataset, config.horizon), config.action_lam,
                                             dataset.normalizer)
            action_lam.save(out_dir / "lam" / "action_lam.latb")
    if need_image:
        if config.image_lam_checkpoint:
            image_lam = ImageLam.load(config.image_lam_checkpoint)
        else:
            image_lam, _ = train_image_lam(dataset, config.image_lam)
            image_lam.save(out_dir / "lam" / "image_lam.latb")
    return action_lam, image_lam


def _run_variant(suite: str, variant: Variant, config: RunConfig, dataset: Dataset, seed: int,
                 lams: Tuple[Optional[ActionLam], Optional[ImageLam]], out_dir: Path) -> List[Dict[str, Any]]:
    cfg = variant_config(config, variant)
    digest = short_hash(cfg)
    tasks = dataset.tasks
    groups = [tasks] if variant.joint else [[task] for task in tasks]
    label = f"{variant.strategy.value}_{variant.param or 'default'}".replace("=", "-")
    rows = []
    for group in groups:
        started = time.perf_counter()
        base = {"suite": suite, "strategy": variant.strategy.value, "variant_param": variant.param or None,
                "seed": seed, "config_hash": digest}
        try:
            subset = dataset if variant.joint else dataset.for_tasks([t.id for t in group])
            run_dir = out_dir / label / ("joint" if variant.joint else group[0].id)
            run = train_policy(cfg, subset, seed, action_lam=lams[0], image_lam=lams[1], out_dir=run_dir)
            result = evaluate(run.policy, group, [seed], cfg.eval_episodes, cfg.eval_workers, cfg.env.image_size)
            elapsed = time.perf_counter() - started
            for task in group:
                rows.append({**base, "task": task.id, "score": result.per_seed[(task.id, seed)], "steps": run.steps,
                             "wall_clock_s": elapsed, "status": "ok", "checkpoint_path": str(run.checkpoint)})
        except Exception as e:
            logger.error(f"Variant {label} seed {seed} failed: {e}", exc_info=True)
            for task in group:
                rows.append({**base, "task": task.id, "score": None, "steps": 0,
                             "wall_clock_s": time.perf_counter() - started, "status": "failed",
                             "detail": {"error": str(e)}})
    return rows


def run_suite(name: str, config: RunConfig, out_dir, session_factory: Optional[Callable] = None) -> Path:
    """
    Train and evaluate every variant of a suite over all seeds and write the CSV report.

    Returns:
        Path of the report ``suite_<name>.csv`` under ``out_dir``
    """
    out_dir = Path(out_dir)
    suite = SuiteName(name)
    write_config_echo(out_dir, config)
    names = [s for s in SuiteName if s != SuiteName.all] if suite == SuiteName.all else [suite]
    plan = [(s.value, v) for s in names for v in suite_variants(s.value, config)]
    strategies = {v.strategy for _, v in plan}
    dataset = load_or_generate_dataset(config, out_dir)
    need_image = bool(strategies & IMAGE_TARGET_VARIANTS)
    need_action = bool(strategies & ACTION_TARGET_VARIANTS)
    lams = prepare_latent_models(config, dataset, out_dir, need_image, need_action)

    logger.info(f"Suite {suite.value}: {len(plan)} variants x {len(config.seeds)} seeds")
    rows: List[Dict[str, Any]] = []
    for suite_name, variant in plan:
        for seed in config.seeds:
            variant_rows = _run_variant(suite_name, variant, config, dataset, seed, lams, out_dir / suite_name)
            rows.extend(variant_rows)
            if session_factory is not None:
                record_runs(session_factory, variant_rows)
    failed = sum(1 for r in rows if r["status"] == "failed")
    if failed:
        logger.warning(f"Suite {suite.value}: {failed} of {len(rows)} rows failed")
    return write_report(out_dir / f"suite_{suite.value}.csv", rows, config.report_wall_clock)
