"""
Training and evaluation loops: both latent action models, the policy under any
strategy, and closed-loop evaluation of policy checkpoints.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.models.schemas import ActionLamConfig, ImageLamConfig, RunConfig, StrategyName
from app.services import tensor_core as tc
from app.services.action_lam import ActionLam, ActionNormalizer, pad_or_truncate
from app.services.dataset import Dataset
from app.services.env_bench import Policy as EnvPolicy
from app.services.env_bench import Task, evaluate_policy, parse_task
from app.services.image_lam import ImageLam, TokenRecord, TransitionBatch, iterate_batches, select_supervised
from app.services.optim import Adam, StepDecay
from app.services.policy_backbone import Policy
from app.services.report_writer import write_loss_log
from app.services.strategies import LatentTargets, ResolvedStrategy, StrategyHeads, resolve_strategy, strategy_losses
from app.services.tensor_core import NumericError

logger = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000
TARGET_BATCH = 256


# ------------------------------------------------------------ action model


def action_chunks(dataset: Dataset, horizon: int, normalizer: Optional[ActionNormalizer] = None) -> np.ndarray:
    """Every (episode, t) window of H normalized actions, padded by repeating the last action."""
    normalizer = normalizer or dataset.normalizer
    chunks = []
    for episode in dataset.episodes:
        normalized = normalizer.normalize(episode.actions)
        for t in range(len(episode)):
            chunks.append(pad_or_truncate(normalized[t:t + horizon], horizon).values)
    return np.stack(chunks).astype(np.float32)


def train_action_lam(chunks: np.ndarray, config: ActionLamConfig,
                     normalizer: Optional[ActionNormalizer] = None) -> Tuple[ActionLam, List[Dict[str, float]]]:
    model = ActionLam(config, normalizer)
    optimizer = model.make_optimizer()
    batches = iterate_batches(len(chunks), config.batch_size, np.random.default_rng([config.seed, 2]))
    log: List[Dict[str, float]] = []
    for step in range(1, config.train_steps + 1):
        index = next(batches)
        losses = model.train_step(chunks[index], optimizer)
        if step % config.log_every == 0 or step == config.train_steps:
            used, perplexity = model.usage(model.tokenize_batch(chunks[index]).indices)
            losses.update(step=step, codes_used=used, perplexity=perplexity)
            log.append(losses)
            logger.info(f"action_lam step {step}: rec={losses['rec']:.5f} mask={losses['mask']:.5f} "
                        f"commit={losses['commit']:.5f} codes={used} perplexity={perplexity:.2f}")
    return model, log


# ------------------------------------------------------------- image model


def build_transitions(dataset: Dataset, delta: int, supervised_fraction: float, seed: int) -> TransitionBatch:
    starts, ends, actions = [], [], []
    for episode in dataset.episodes:
        last = len(episode) - 1
        normalized = dataset.normalizer.normalize(episode.actions)
        for t in range(max(1, len(episode) - delta)):
            starts.append(episode.observations[t])
            ends.append(episode.observations[min(t + delta, last)])
            actions.append(normalized[t])
    supervised = np.zeros(len(starts), dtype=bool)
    supervised[select_supervised(len(starts), supervised_fraction, seed)] = True
    return TransitionBatch(np.stack(starts).astype(np.float32) / 255.0, np.stack(ends).astype(np.float32) / 255.0,
                           np.stack(actions).astype(np.float32), supervised)


def train_image_lam(dataset: Dataset, config: ImageLamConfig) -> Tuple[ImageLam, List[Dict[str, float]]]:
    transitions = build_transitions(dataset, config.delta, config.supervised_fraction, config.seed)
    model = ImageLam(config, supervised_index=np.flatnonzero(transitions.supervised))
    optimizer = model.make_optimizer()
    batches = iterate_batches(len(transitions), config.batch_size, np.random.default_rng([config.seed, 2]))
    log: List[Dict[str, float]] = []
    for step in range(1, config.train_steps + 1):
        batch = transitions.subset(next(batches))
        losses = model.train_step(batch, optimizer)
        if step % config.log_every == 0 or step == config.train_steps:
            used, perplexity = model.usage(model.tokenize(batch.o_start, batch.o_end).indices)
            losses.update(step=step, codes_used=used, perplexity=perplexity)
            log.append(losses)
            logger.info(f"image_lam step {step}: rec={losses['rec']:.5f} codebook={losses['codebook']:.5f} "
                        f"commit={losses['commit']:.5f} act={losses['act']:.5f} codes={used} "
                        f"perplexity={perplexity:.2f}")
    return model, log


def action_token_stream(model: ActionLam, chunks: np.ndarray) -> np.ndarray:
    """(N, H) token indices for normalized chunks, tokenized in fixed-size batches."""
    return np.concatenate([model.tokenize_batch(chunks[start:start + TARGET_BATCH]).indices
                           for start in range(0, len(chunks), TARGET_BATCH)])


def image_token_records(model: ImageLam, dataset: Dataset) -> List[TokenRecord]:
    """Tokens and pre-quantization latents of (o_t, o_t+delta) for every step of every episode."""
    delta = model.config.delta
    records = []
    for e, episode in enumerate(dataset.episodes):
        last = len(episode) - 1
        frames = episode.observations.astype(np.float32) / 255.0
        ends = frames[np.minimum(np.arange(len(episode)) + delta, last)]
        for start in range(0, len(episode), TARGET_BATCH):
            q = model.tokenize(frames[start:start + TARGET_BATCH], ends[start:start + TARGET_BATCH])
            for i in range(len(q.indices)):
                records.append(TokenRecord(e, start + i, q.indices[i], q.pre_quant.data[i]))
    return records


# ------------------------------------------------------------------ policy


@dataclass
class PolicyData:
    observations: np.ndarray
    instruction_ids: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    episodes: np.ndarray
    timesteps: np.ndarray

    def __len__(self):
        return self.actions.shape[0]


def build_policy_data(dataset: Dataset, horizon: int) -> PolicyData:
    obs, ids, states, eps, steps = [], [], [], [], []
    for e, episode in enumerate(dataset.episodes):
        task = dataset.task_of(episode)
        for t in range(len(episode)):
            obs.append(episode.observations[t])
            ids.append(task.instruction_id)
            states.append(episode.states[t])
            eps.append(e)
            steps.append(t)
    if not obs:
        raise ValueError("dataset has no episodes for policy training")
    return PolicyData(np.stack(obs).astype(np.float32) / 255.0, np.array(ids, dtype=np.int64),
                      np.stack(states).astype(np.float32), action_chunks(dataset, horizon),
                      np.array(eps, dtype=np.int64), np.array(steps, dtype=np.int64))


def compute_latent_targets(data: PolicyData, dataset: Dataset, strategy: ResolvedStrategy,
                           action_lam: Optional[ActionLam] = None, image_lam: Optional[ImageLam] = None) -> LatentTargets:
    """Tokenize every sample with the frozen latent action models the strategy needs."""
    targets = LatentTargets()
    horizon = strategy.layout.horizon
    if strategy.needs_image_lam and image_lam is not None:
        delta = image_lam.config.delta
        z_img, c_img = [], []
        for start in range(0, len(data), TARGET_BATCH):
            stop = min(start + TARGET_BATCH, len(data))
            o_start, o_end = [], []
            for i in range(start, stop):
                episode = dataset.episodes[data.episodes[i]]
                last = len(episode) - 1
                for h in range(horizon):
                    t = data.timesteps[i] + h
                    o_start.append(episode.observations[min(t, last)])
                    o_end.append(episode.observations[min(t + delta, last)])
            q = image_lam.tokenize(np.stack(o_start).astype(np.float32) / 255.0,
                                   np.stack(o_end).astype(np.float32) / 255.0)
            count = stop - start
            z_img.append(q.indices.reshape(count, horizon, -1))
            c_img.append(q.pre_quant.data.reshape(count, horizon, q.pre_quant.shape[1], -1))
        targets.z_img = np.concatenate(z_img)
        targets.c_img = np.concatenate(c_img).astype(np.float32)
    if strategy.needs_action_lam and action_lam is not None:
        chunks = data.actions
        if action_lam.normalizer is not None:
            chunks = action_lam.normalizer.normalize(dataset.normalizer.denormalize(chunks))
        z_act, c_act = [], []
        for start in range(0, len(data), TARGET_BATCH):
            q = action_lam.tokenize_batch(chunks[start:start + TARGET_BATCH])
            z_act.append(q.indices)
            c_act.append(q.pre_quant.data)
        targets.z_act = np.concatenate(z_act)
        targets.c_act = np.concatenate(c_act).astype(np.float32)
    return targets


@dataclass
class PolicyRun:
    policy: Policy
    heads: StrategyHeads
    strategy: ResolvedStrategy
    loss_log: List[Dict[str, Optional[float]]] = field(default_factory=list)
    steps: int = 0
    checkpoint: Optional[Path] = None


def train_policy(config: RunConfig, dataset: Dataset, seed: int, action_lam: Optional[ActionLam] = None,
                 image_lam: Optional[ImageLam] = None, out_dir: Optional[Union[str, Path]] = None) -> PolicyRun:
    """
    Train one policy with the configured strategy.

    Raises:
        ValueError: the strategy needs a latent action model that was not provided
    """
    strategy = resolve_strategy(config.strategy_config(), config.backbone, config.horizon, config.tokens_per_step,
                                config.image_lam.codebook_size, config.action_lam.codebook_size)
    if strategy.lambda_latent != 0:
        if strategy.needs_image_lam and image_lam is None:
            raise ValueError(f"strategy {strategy.variant.value} needs an image latent model checkpoint")
        if strategy.needs_action_lam and action_lam is None:
            raise ValueError(f"strategy {strategy.variant.value} needs an action latent model checkpoint")

    dataset = dataset.fraction(config.data_fraction)
    data = build_policy_data(dataset, config.horizon)
    targets = compute_latent_targets(data, dataset, strategy, action_lam, image_lam) \
        if strategy.lambda_latent != 0 else LatentTargets()

    action_dim = data.actions.shape[-1]
    policy = Policy(config.backbone, strategy.layout, action_dim, seed, normalizer=dataset.normalizer)
    heads = StrategyHeads(strategy.variant, config.backbone.hidden, config.image_lam.latent_dim,
                          config.action_lam.latent_dim, config.image_lam.codebook_size,
                          config.action_lam.codebook_size, seed)
    params = dict(policy.named_parameters())
    params.update(heads.named_parameters("heads."))
    optimizer = Adam(params, learning_rate=config.learning_rate)
    schedule = StepDecay(optimizer, config.lr_decay_steps)
    batches = iterate_batches(len(data), config.batch_size, np.random.default_rng([seed, 2]))

    run = PolicyRun(policy=policy, heads=heads, strategy=strategy)
    logger.info(f"Training {strategy.variant.value} (lambda={strategy.lambda_latent}, "
                f"placeholders={strategy.layout.total_length}) seed {seed} on {len(data)} samples")
    for step in range(1, config.train_steps + 1):
        index = next(batches)
        optimizer.zero_grad()
        losses = strategy_losses(policy, heads, strategy, data.observations[index], data.instruction_ids[index],
                                 data.states[index], data.actions[index], targets.take(index))
        total = losses["total"]
        if not np.isfinite(total.item()):
            raise NumericError(f"policy: non-finite loss at step {step}")
        total.backward()
        optimizer.step()
        schedule.step()
        run.steps = step
        if step % config.log_every == 0 or step == config.train_steps:
            entry = {"step": step, "action": losses["action"].item(),
                     "latent": None if losses["latent"] is None else losses["latent"].item(),
                     "total": total.item(), "lr": optimizer.state.learning_rate}
            run.loss_log.append(entry)
            logger.info(f"policy step {step}: action={entry['action']:.5f} total={entry['total']:.5f}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        run.checkpoint = out_dir / f"policy_{strategy.variant.value}_seed{seed}.latb"
        policy.save(run.checkpoint, {"strategy": strategy.variant.value, "lambda": strategy.lambda_latent,
                                     "align_layer": strategy.align_layer, "steps": run.steps})
        write_loss_log(out_dir / f"loss_{strategy.variant.value}_seed{seed}.csv", run.loss_log)
    return run


# -------------------------------------------------------------- evaluation


@dataclass
class EvaluationResult:
    per_seed: Dict[Tuple[str, int], float]
    per_task: Dict[str, float]


def evaluate(policy: EnvPolicy, tasks: Sequence[Task], seeds: Sequence[int], episodes: int, workers: int = 1,
             image_size: int = 16) -> EvaluationResult:
    """Mean rollout score per (task, seed) over ``episodes`` rollouts, and per task."""
    per_seed: Dict[Tuple[str, int], float] = {}
    for seed in seeds:
        rollout_seeds = [EVAL_SEED_BASE + 1000 * seed + e for e in range(episodes)]
        scores = evaluate_policy(policy, tasks, rollout_seeds, workers=workers, image_size=image_size)
        for task in tasks:
            values = [s for task_id, _, s in scores if task_id == task.id]
            per_seed[(task.id, seed)] = float(np.mean(values))
    per_task = {task.id: float(np.mean([per_seed[(task.id, s)] for s in seeds])) for task in tasks}
    return EvaluationResult(per_seed=per_seed, per_task=per_task)


def evaluate_checkpoint(path: Union[str, Path], task_ids: Sequence[str], seeds: Sequence[int], episodes: int,
                        expected_strategy: Optional[StrategyName] = None, workers: int = 1) -> EvaluationResult:
    """
    Raises:
        ValueError: the checkpoint layout belongs to a different strategy
    """
    policy = Policy.load(path)
    if expected_strategy is not None and policy.layout.strategy != StrategyName(expected_strategy):
        raise ValueError(f"layout mismatch: checkpoint was trained as {policy.layout.strategy.value}, "
                         f"requested {StrategyName(expected_strategy).value}")
    with tc.no_grad():
        return evaluate(policy, [parse_task(t) for t in task_ids], seeds, episodes, workers,
                        policy.config.image_size)
