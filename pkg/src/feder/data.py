"""Synthetic classification blobs and client partitioning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import derive_rng


@dataclass
class Dataset:
    """Feature maps (n, channels, height, width) with integer class labels."""
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise ValueError("inputs must be (n, channels, height, width)")
        if len(self.inputs) != len(self.labels) or len(self.labels) < 1:
            raise ValueError("need matching, non-empty inputs and labels")
        if self.class_count < 1 or np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count)


def generate_blobs(seed: int, class_count: int, channels: int, height: int, width: int,
                   samples_per_class: int, template_scale: float = 60.0,
                   noise_scale: float = 0.5) -> Dataset:
    """Per-class Gaussian template plus per-sample noise, deterministic per seed.

    Templates sit far apart relative to the noise, so linear probes solve the
    task easily. The large default template scale keeps gradients big enough
    that the small-learning-rate training schedules used in the experiments
    make visible progress within a handful of rounds. Samples come out
    class-major: all of class 0 first, then class 1, and so on.
    """
    if min(class_count, channels, height, width, samples_per_class) < 1:
        raise ValueError("all dataset dimensions must be >= 1")
    if template_scale <= 0 or noise_scale < 0:
        raise ValueError("template_scale must be > 0 and noise_scale >= 0")
    rng = derive_rng(seed, "blobs")
    shape = (channels, height, width)
    templates = rng.normal(0.0, template_scale, size=(class_count, *shape))
    inputs = np.empty((class_count * samples_per_class, *shape))
    labels = np.empty(class_count * samples_per_class, dtype=np.int64)
    for cls in range(class_count):
        start = cls * samples_per_class
        noise = rng.normal(0.0, noise_scale, size=(samples_per_class, *shape))
        inputs[start:start + samples_per_class] = templates[cls] + noise
        labels[start:start + samples_per_class] = cls
    return Dataset(inputs, labels, class_count)


def split_train_test(d: Dataset, test_per_class: int) -> tuple[Dataset, Dataset]:
    """Hold out the last ``test_per_class`` samples of every class."""
    if test_per_class < 1:
        raise ValueError("test_per_class must be >= 1")
    train_idx, test_idx = [], []
    for cls in range(d.class_count):
        idx = np.flatnonzero(d.labels == cls)
        if len(idx) <= test_per_class:
            raise ValueError(
                f"class {cls} has {len(idx)} samples, cannot hold out {test_per_class}")
        train_idx.append(idx[:-test_per_class])
        test_idx.append(idx[-test_per_class:])
    return d.subset(np.concatenate(train_idx)), d.subset(np.concatenate(test_idx))


@dataclass
class PartitionPlan:
    """Disjoint, non-empty index lists into a parent dataset, one per client."""
    client_indices: list[np.ndarray]

    def __post_init__(self):
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]
        if not self.client_indices:
            raise ValueError("need at least one client")
        for ix in self.client_indices:
            if ix.size == 0:
                raise ValueError("every client needs at least one sample")
        merged = np.concatenate(self.client_indices)
        if len(np.unique(merged)) != len(merged):
            raise ValueError("client index lists overlap")

    def sizes(self) -> list[int]:
        return [int(ix.size) for ix in self.client_indices]


def partition(d: Dataset, clients: int, mode: str = "iid", seed: int = 0,
              beta: float = 0.5) -> PartitionPlan:
    """Split dataset indices across clients.

    Args:
        d: parent dataset.
        clients: number of clients K.
        mode: "iid" chops a seeded shuffle into near-equal chunks (exactly
            equal when K divides the dataset size); "dirichlet" draws
            per-class client proportions from Dirichlet(beta), so smaller
            beta means stronger label skew.
        seed: determinism key, combined with mode and K.
        beta: Dirichlet concentration (dirichlet mode only).
    """
    if clients < 1:
        raise ValueError("clients must be >= 1")
    if clients > len(d):
        raise ValueError(f"{clients} clients exceed the {len(d)}-sample dataset")
    rng = derive_rng(seed, "partition", clients, mode)
    if mode == "iid":
        order = rng.permutation(len(d))
        chunks = [np.sort(c) for c in np.array_split(order, clients)]
    elif mode == "dirichlet":
        if beta <= 0:
            raise ValueError("beta must be > 0")
        assigned: list[list[np.ndarray]] = [[] for _ in range(clients)]
        for cls in range(d.class_count):
            idx = np.flatnonzero(d.labels == cls)
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            proportions = rng.dirichlet(np.full(clients, beta))
            cuts = (np.cumsum(proportions)[:-1] * idx.size).astype(np.int64)
            for k, part in enumerate(np.split(idx, cuts)):
                assigned[k].append(part)
        chunks = [np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
                  for parts in assigned]
        chunks = _fill_empty_clients(chunks)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return PartitionPlan(chunks)


def _fill_empty_clients(chunks: list[np.ndarray]) -> list[np.ndarray]:
    # Heavy skew can leave a client empty; move one sample from the largest
    # shard so the plan invariant (every client non-empty) holds.
    sizes = [c.size for c in chunks]
    while min(sizes) == 0:
        empty = sizes.index(0)
        donor = int(np.argmax(sizes))
        chunks[empty] = chunks[donor][-1:]
        chunks[donor] = chunks[donor][:-1]
        sizes = [c.size for c in chunks]
    return chunks
