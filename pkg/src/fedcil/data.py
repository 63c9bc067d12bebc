"""Desk-scale datasets and per-client class-incremental task streams."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, LabelRangeError

TRAIN_FRACTION = 0.8
MIXTURE_RADIUS = 2.0
MIXTURE_STD = 0.35
# brings the radius-2 blobs inside the unit box before clipping
MIXTURE_SCALE = 1.0 / 3.0


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ContractError("samples and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError("label outside 0..num_classes-1")
        self.samples.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def data_dim(self) -> int:
        return self.samples.shape[1]

    def class_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def mixture_centroids(num_classes: int, data_dim: int) -> np.ndarray:
    """Class centres before scaling.

    For two dimensions the centres sit evenly on a circle of radius 2. Higher
    dimensions stack circles of odd angular frequency (1, 3, 5, ...) on
    successive coordinate pairs, scaled so every centre keeps norm 2; this
    keeps neighbouring classes apart when many classes share the space.
    """
    theta = 2.0 * np.pi * np.arange(num_classes) / num_classes
    pairs = data_dim // 2
    amp = MIXTURE_RADIUS / np.sqrt(pairs)
    out = np.zeros((num_classes, data_dim))
    for j in range(pairs):
        freq = 2 * j + 1
        out[:, 2 * j] = amp * np.cos(freq * theta)
        out[:, 2 * j + 1] = amp * np.sin(freq * theta)
    return out


def make_synthetic_mixture(num_classes: int, samples_per_class: int, data_dim: int = 2,
                           seed: int = 0) -> LabeledDataset:
    """Gaussian blobs (std 0.35) around :func:`mixture_centroids`, scaled into [-1, 1]."""
    if num_classes < 2 or data_dim < 2:
        raise ConfigurationError("mixture needs at least 2 classes and 2 dimensions")
    rng = np.random.default_rng(seed)
    centres = mixture_centroids(num_classes, data_dim)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    x = centres[labels] + MIXTURE_STD * rng.standard_normal((len(labels), data_dim))
    x = np.clip(x * MIXTURE_SCALE, -1.0, 1.0)
    return LabeledDataset(x, labels, num_classes, f"mixture{num_classes}x{data_dim}d")


def scaled_centroids(num_classes: int, data_dim: int) -> np.ndarray:
    return mixture_centroids(num_classes, data_dim) * MIXTURE_SCALE


_GLYPHS = (
    # 0
    "..####.."
    ".##..##."
    ".##..##."
    ".##..##."
    ".##..##."
    ".##..##."
    ".##..##."
    "..####..",
    # 1
    "...##..."
    "..###..."
    ".####..."
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    ".######.",
    # 2
    "..####.."
    ".##..##."
    ".....##."
    "....##.."
    "...##..."
    "..##...."
    ".##....."
    ".######.",
    # 3
    ".#####.."
    ".....##."
    ".....##."
    "..####.."
    ".....##."
    ".....##."
    ".....##."
    ".#####..",
    # 4
    "....##.."
    "...###.."
    "..#.##.."
    ".#..##.."
    "########"
    "....##.."
    "....##.."
    "....##..",
    # 5
    ".######."
    ".##....."
    ".##....."
    ".#####.."
    ".....##."
    ".....##."
    ".##..##."
    "..####..",
    # 6
    "...###.."
    "..##...."
    ".##....."
    ".#####.."
    ".##..##."
    ".##..##."
    ".##..##."
    "..####..",
    # 7
    ".######."
    ".....##."
    "....##.."
    "....##.."
    "...##..."
    "...##..."
    "..##...."
    "..##....",
    # 8
    "..####.."
    ".##..##."
    ".##..##."
    "..####.."
    ".##..##."
    ".##..##."
    ".##..##."
    "..####..",
    # 9
    "..####.."
    ".##..##."
    ".##..##."
    "..#####."
    ".....##."
    ".....##."
    "....##.."
    "..###...",
)


def digit_templates() -> np.ndarray:
    """The ten 8x8 glyphs as a (10, 64) array of +1 (ink) / -1 (paper)."""
    return np.array([[1.0 if ch == "#" else -1.0 for ch in g] for g in _GLYPHS])


def make_tiny_digits(seed: int = 0, samples_per_class: int = 300,
                     noise_std: float = 0.15) -> LabeledDataset:
    """8x8 digit glyphs plus Gaussian pixel noise, clipped to [-1, 1]."""
    rng = np.random.default_rng(seed)
    tmpl = digit_templates()
    labels = np.repeat(np.arange(10), samples_per_class)
    x = tmpl[labels] + noise_std * rng.standard_normal((len(labels), 64))
    return LabeledDataset(np.clip(x, -1.0, 1.0), labels, 10, "tiny_digits")


# ---------------------------------------------------------------- task streams

@dataclass(frozen=True)
class Task:
    classes: tuple[int, ...]
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class TaskStream:
    client_id: int
    tasks: tuple[Task, ...]
    classes_per_task: int
    dataset: LabeledDataset = field(repr=False, compare=False)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def classes_up_to(self, task_idx: int) -> list[int]:
        out: list[int] = []
        for t in self.tasks[:task_idx + 1]:
            out.extend(t.classes)
        return out


def build_task_streams(dataset: LabeledDataset, num_clients: int, classes_per_task: int,
                       num_tasks: int, seed: int = 0) -> list[TaskStream]:
    """Per-client disjoint class sequences; shared classes split their samples.

    Each client draws ``classes_per_task * num_tasks`` distinct classes
    uniformly without replacement; consecutive pairs form its tasks. Classes
    may repeat across clients, in which case the class's samples are split
    into disjoint parts, one per client. Each part is split 80/20 into
    train/test.
    """
    if num_clients < 1 or classes_per_task < 1 or num_tasks < 1:
        raise ConfigurationError("client, task and class counts must be positive")
    needed = classes_per_task * num_tasks
    if needed > dataset.num_classes:
        raise ConfigurationError(
            f"{num_tasks} tasks x {classes_per_task} classes needs {needed} classes; "
            f"dataset has {dataset.num_classes}")
    rng = np.random.default_rng(seed)
    draws = [rng.choice(dataset.num_classes, size=needed, replace=False)
             for _ in range(num_clients)]
    return _assemble(dataset, [[int(k) for k in d] for d in draws], classes_per_task, rng)


def streams_from_assignment(dataset: LabeledDataset, class_lists: Sequence[Sequence[int]],
                            classes_per_task: int, seed: int = 0) -> list[TaskStream]:
    """Streams with a fixed class order per client (for hand-built fixtures)."""
    if not class_lists or classes_per_task < 1:
        raise ConfigurationError("need at least one client and a positive task width")
    for c, cls in enumerate(class_lists):
        if len(cls) == 0 or len(cls) % classes_per_task:
            raise ConfigurationError(
                f"client {c}: {len(cls)} classes do not fill tasks of {classes_per_task}")
        if len(set(cls)) != len(cls):
            raise ConfigurationError(f"client {c} repeats a class")
        bad = [k for k in cls if not 0 <= k < dataset.num_classes]
        if bad:
            raise LabelRangeError(f"client {c}: classes {bad} not in dataset")
    return _assemble(dataset, [[int(k) for k in cls] for cls in class_lists],
                     classes_per_task, np.random.default_rng(seed))


def _assemble(dataset: LabeledDataset, draws: list[list[int]], classes_per_task: int,
              rng: np.random.Generator) -> list[TaskStream]:
    num_clients = len(draws)
    parts: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    for k in range(dataset.num_classes):
        users = [c for c in range(num_clients) if k in draws[c]]
        if not users:
            continue
        idx = rng.permutation(dataset.class_indices(k))
        for client, chunk in zip(users, np.array_split(idx, len(users))):
            if len(chunk) < 2:
                raise ConfigurationError(
                    f"class {k} has too few samples to split over {len(users)} clients")
            n_train = min(max(int(round(TRAIN_FRACTION * len(chunk))), 1), len(chunk) - 1)
            parts[(client, k)] = (np.sort(chunk[:n_train]), np.sort(chunk[n_train:]))

    streams = []
    for c in range(num_clients):
        tasks = []
        for t in range(len(draws[c]) // classes_per_task):
            cls = tuple(draws[c][t * classes_per_task:(t + 1) * classes_per_task])
            train = np.concatenate([parts[(c, k)][0] for k in cls])
            test = np.concatenate([parts[(c, k)][1] for k in cls])
            train.setflags(write=False)
            test.setflags(write=False)
            tasks.append(Task(cls, train, test))
        streams.append(TaskStream(c, tuple(tasks), classes_per_task, dataset))
    return streams


def task_batch(stream: TaskStream, task_idx: int, batch_size: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform sample with replacement from one task's training indices."""
    if not 0 <= task_idx < stream.num_tasks:
        raise ContractError(f"task {task_idx} outside 0..{stream.num_tasks - 1}")
    train = stream.tasks[task_idx].train_indices
    pick = train[rng.integers(len(train), size=batch_size)]
    ds = stream.dataset
    return ds.samples[pick], ds.labels[pick]


class ClientData:
    """A client's only window onto its data: the current task.

    Earlier tasks become unreachable once :meth:`advance` is called; there is
    no method that returns their samples.
    """

    def __init__(self, stream: TaskStream):
        self._stream = stream
        self._task = 0

    @property
    def client_id(self) -> int:
        return self._stream.client_id

    @property
    def task_index(self) -> int:
        return self._task

    @property
    def num_tasks(self) -> int:
        return self._stream.num_tasks

    @property
    def current_classes(self) -> list[int]:
        return list(self._stream.tasks[self._task].classes)

    @property
    def previous_classes(self) -> list[int]:
        return self._stream.classes_up_to(self._task - 1) if self._task > 0 else []

    @property
    def learned_classes(self) -> list[int]:
        return self._stream.classes_up_to(self._task)

    @property
    def train_size(self) -> int:
        return len(self._stream.tasks[self._task].train_indices)

    def batch(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        return task_batch(self._stream, self._task, batch_size, rng)

    def test_set(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self._stream.tasks[self._task].test_indices
        return self._stream.dataset.samples[idx], self._stream.dataset.labels[idx]

    def advance(self) -> None:
        if self._task + 1 >= self._stream.num_tasks:
            raise ContractError("no further task in this stream")
        self._task += 1


def union_test_set(streams: Sequence[TaskStream], up_to_task: int | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """All clients' test samples for tasks ``0..up_to_task`` (default: all)."""
    if not streams:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    ds = streams[0].dataset
    idx = [t.test_indices for s in streams
           for t in s.tasks[: (up_to_task + 1 if up_to_task is not None else None)]]
    idx = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
    return ds.samples[idx], ds.labels[idx]


def stream_manifest(streams: Sequence[TaskStream]) -> list[dict]:
    return [{"client": s.client_id, "task": t_idx, "classes": list(t.classes),
             "train": int(len(t.train_indices)), "test": int(len(t.test_indices))}
            for s in streams for t_idx, t in enumerate(s.tasks)]


def write_manifest(path: str | Path, streams: Sequence[TaskStream]) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in stream_manifest(streams)]
    Path(path).write_text("\n".join(lines) + "\n")
