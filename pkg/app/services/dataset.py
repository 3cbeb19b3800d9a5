"""
Demonstration datasets: generation with the scripted expert and the LADS binary format.

File layout (little-endian): magic ``LADS``, version u32, task count u32, per task
(id length u32, UTF-8 id, n_stages u32, instruction id u32), image size u32,
channels u32, state dim u32, action dim u32, action min (f32 each), action max
(f32 each), episode count u32, then per episode task index u32, length u32 and
per step observation bytes, state f32 values, action f32 values.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from app.services.action_lam import ActionNormalizer
from app.services.checkpoint import DatasetError
from app.services.env_bench import (ACTION_DIM, STATE_DIM, EnvState, Task, is_done, parse_task, render, reset,
                                    scripted_expert, step)

logger = logging.getLogger(__name__)

MAGIC = b"LADS"
VERSION = 1
CHANNELS = 3


@dataclass
class Episode:
    task_index: int
    observations: np.ndarray
    states: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return self.actions.shape[0]


@dataclass
class Dataset:
    tasks: List[Task]
    episodes: List[Episode]
    normalizer: ActionNormalizer
    image_size: int = 16

    def task_of(self, episode: Episode) -> Task:
        return self.tasks[episode.task_index]

    def for_tasks(self, task_ids: Sequence[str]) -> "Dataset":
        """Keep only episodes of the given tasks; task list and statistics unchanged."""
        wanted = {i for i, t in enumerate(self.tasks) if t.id in set(task_ids)}
        return Dataset(self.tasks, [e for e in self.episodes if e.task_index in wanted], self.normalizer,
                       self.image_size)

    def fraction(self, frac: float) -> "Dataset":
        """Per-task prefix of ceil(frac * n) episodes."""
        if not 0.0 < frac <= 1.0:
            raise ValueError(f"data fraction must be in (0, 1], got {frac}")
        kept: List[Episode] = []
        for index in range(len(self.tasks)):
            episodes = [e for e in self.episodes if e.task_index == index]
            kept.extend(episodes[:math.ceil(frac * len(episodes))])
        return Dataset(self.tasks, kept, self.normalizer, self.image_size)


def run_expert_episode(task: Task, seed: int, image_size: int = 16) -> Optional[Episode]:
    """Roll the scripted expert from reset(task, seed); None when it fails within max_steps."""
    state = reset(task, seed)
    observations, states, actions = [], [], []
    for _ in range(task.max_steps):
        if is_done(state, task):
            break
        action = scripted_expert(state, task)
        observations.append(render(state, task, image_size))
        states.append(state.vector(task))
        actions.append(action)
        state = step(state, action, task)
    if not is_done(state, task):
        return None
    return Episode(0, np.stack(observations), np.stack(states).astype(np.float32),
                   np.stack(actions).astype(np.float32))


def generate_dataset(task_ids: Sequence[str], n_demos: int, seed: int, image_size: int = 16,
                     max_failure_rate: float = 0.1) -> Dataset:
    """
    Collect ``n_demos`` successful expert episodes per task.

    Raises:
        DatasetError: the expert fails on more than ``max_failure_rate`` of attempts for a task.
    """
    tasks = [parse_task(t) for t in task_ids]
    episodes: List[Episode] = []
    for index, task in enumerate(tasks):
        seeds = np.random.default_rng([seed, index]).integers(0, 2 ** 31 - 1, size=4 * n_demos + 10)
        collected, failures = 0, 0
        for episode_seed in seeds:
            if collected == n_demos:
                break
            episode = run_expert_episode(task, int(episode_seed), image_size)
            if episode is None:
                failures += 1
                logger.warning(f"Expert failed on task {task.id} seed {int(episode_seed)}")
                continue
            episode.task_index = index
            episodes.append(episode)
            collected += 1
        attempts = collected + failures
        if collected < n_demos or (attempts and failures / attempts > max_failure_rate):
            raise DatasetError(f"expert failure rate {failures}/{attempts} on task {task.id} exceeds "
                               f"{max_failure_rate:.0%}")
        logger.info(f"Task {task.id}: {collected} demos ({failures} expert failures)")
    all_actions = np.concatenate([e.actions for e in episodes], axis=0)
    return Dataset(tasks, episodes, ActionNormalizer.fit(all_actions), image_size)


def write_dataset(path: Union[str, Path], dataset: Dataset):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(dataset.tasks)))
        for task in dataset.tasks:
            encoded = task.id.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<II", task.n_stages, task.instruction_id))
        f.write(struct.pack("<IIII", dataset.image_size, CHANNELS, STATE_DIM, ACTION_DIM))
        f.write(np.asarray(dataset.normalizer.low, dtype="<f4").tobytes())
        f.write(np.asarray(dataset.normalizer.high, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(dataset.episodes)))
        for episode in dataset.episodes:
            f.write(struct.pack("<II", episode.task_index, len(episode)))
            for t in range(len(episode)):
                f.write(np.asarray(episode.observations[t], dtype=np.uint8).tobytes())
                f.write(np.asarray(episode.states[t], dtype="<f4").tobytes())
                f.write(np.asarray(episode.actions[t], dtype="<f4").tobytes())
    logger.info(f"Wrote {len(dataset.episodes)} episodes to {path}")


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path} is not a dataset file (bad magic {raw[:4]!r})")
    try:
        version, task_count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        offset = 12
        tasks = []
        for _ in range(task_count):
            (length,) = struct.unpack_from("<I", raw, offset)
            task_id = raw[offset + 4:offset + 4 + length].decode("utf-8")
            offset += 4 + length
            n_stages, instruction_id = struct.unpack_from("<II", raw, offset)
            offset += 8
            task = parse_task(task_id)
            if task.n_stages != n_stages or task.instruction_id != instruction_id:
                raise DatasetError(f"task record {task_id} does not match its definition")
            tasks.append(task)
        image_size, channels, state_dim, action_dim = struct.unpack_from("<IIII", raw, offset)
        offset += 16
        if (channels, state_dim, action_dim) != (CHANNELS, STATE_DIM, ACTION_DIM):
            raise DatasetError(f"dataset dims {(channels, state_dim, action_dim)} do not match the environment")
        low = np.frombuffer(raw, dtype="<f4", count=action_dim, offset=offset)
        high = np.frombuffer(raw, dtype="<f4", count=action_dim, offset=offset + 4 * action_dim)
        offset += 8 * action_dim
        (episode_count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        obs_bytes = image_size * image_size * channels
        episodes = []
        for _ in range(episode_count):
            task_index, length = struct.unpack_from("<II", raw, offset)
            offset += 8
            if task_index >= task_count:
                raise DatasetError(f"episode references unknown task index {task_index}")
            observations = np.empty((length, image_size, image_size, channels), dtype=np.uint8)
            states = np.empty((length, state_dim), dtype=np.float32)
            actions = np.empty((length, action_dim), dtype=np.float32)
            for t in range(length):
                observations[t] = np.frombuffer(raw, dtype=np.uint8, count=obs_bytes,
                                                offset=offset).reshape(image_size, image_size, channels)
                offset += obs_bytes
                states[t] = np.frombuffer(raw, dtype="<f4", count=state_dim, offset=offset)
                offset += 4 * state_dim
                actions[t] = np.frombuffer(raw, dtype="<f4", count=action_dim, offset=offset)
                offset += 4 * action_dim
            episodes.append(Episode(task_index, observations, states, actions))
    except (struct.error, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"truncated or corrupt dataset {path}: {e}") from e
    if offset != len(raw):
        raise DatasetError(f"{len(raw) - offset} trailing bytes in dataset {path}")
    return Dataset(tasks, episodes, ActionNormalizer(low.copy(), high.copy()), image_size)


def replay_states(episode: Episode, task: Task) -> np.ndarray:
    """Re-simulate an episode's actions from its first stored state."""
    state = EnvState.from_vector(episode.states[0], task)
    out = [state.vector(task)]
    for action in episode.actions[:-1]:
        state = step(state, action, task)
        out.append(state.vector(task))
    return np.stack(out)
