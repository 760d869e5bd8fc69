"""Synthetic sequence-classification tasks with controllable separability.

Each class owns a block of the vocabulary; `separation` is the probability
mass a class puts on its own block (the rest is uniform noise). High
separation makes the task linearly probeable, which is what the learning
sanity checks calibrate against.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .tensor import Rng


@dataclass
class SyntheticTask:
    n_classes: int = 3
    seq_len: int = 8
    vocab: int = 24
    separation: float = 0.95
    n_train: int = 90
    n_test: int = 60
    n_clients: int = 3


@dataclass
class Dataset:
    task: SyntheticTask
    seed: int
    train_tokens: np.ndarray
    train_labels: np.ndarray
    test_tokens: np.ndarray
    test_labels: np.ndarray
    shards: list  # per-client index arrays into the train split

    @property
    def dataset_id(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for arr in (self.train_tokens, self.train_labels, self.test_tokens,
                    self.test_labels):
            h.update(arr.tobytes())
        for shard in self.shards:
            h.update(np.asarray(shard).tobytes())
        return h.hexdigest()

    def shard_of(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.shards[k]
        return self.train_tokens[idx], self.train_labels[idx]


def _class_distributions(task: SyntheticTask) -> np.ndarray:
    block = task.vocab // task.n_classes
    if block < 1:
        raise ContractError("vocab smaller than the number of classes")
    probs = np.full((task.n_classes, task.vocab), (1.0 - task.separation) / task.vocab)
    for c in range(task.n_classes):
        probs[c, c * block:(c + 1) * block] += task.separation / block
    return probs / probs.sum(axis=1, keepdims=True)


def _sample_split(task: SyntheticTask, n: int, rng: Rng, cum: np.ndarray):
    labels = np.arange(n, dtype=np.int64) % task.n_classes
    labels = labels[rng.permutation(n)]
    u = rng.uniform(0.0, 1.0, (n, task.seq_len))
    tokens = np.empty((n, task.seq_len), dtype=np.int64)
    for i, lab in enumerate(labels):
        tokens[i] = np.searchsorted(cum[lab], u[i], side="right")
    return tokens, labels


def gen_dataset(task: SyntheticTask, seed: int) -> Dataset:
    if task.n_train % task.n_clients != 0:
        raise ContractError(
            f"n_train {task.n_train} must divide into {task.n_clients} equal shards")
    rng = Rng(seed, "dataset")
    cum = np.cumsum(_class_distributions(task), axis=1)
    train_tokens, train_labels = _sample_split(task, task.n_train, rng.stream("train"), cum)
    test_tokens, test_labels = _sample_split(task, task.n_test, rng.stream("test"), cum)
    order = rng.stream("shards").permutation(task.n_train)
    shards = [np.sort(part) for part in np.array_split(order, task.n_clients)]
    return Dataset(task, seed, train_tokens, train_labels, test_tokens, test_labels, shards)


_FILES = ("train_tokens", "train_labels", "test_tokens", "test_labels", "shards")


def save_dataset(ds: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    arrays = {
        "train_tokens": ds.train_tokens, "train_labels": ds.train_labels,
        "test_tokens": ds.test_tokens, "test_labels": ds.test_labels,
        "shards": np.stack(ds.shards),
    }
    for name, arr in arrays.items():
        np.save(os.path.join(out_dir, f"{name}.npy"), arr)
    manifest = {"task": asdict(ds.task), "seed": ds.seed, "dataset_id": ds.dataset_id}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(in_dir: str) -> Dataset:
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    arrays = {name: np.load(os.path.join(in_dir, f"{name}.npy")) for name in _FILES}
    ds = Dataset(
        task=SyntheticTask(**manifest["task"]), seed=manifest["seed"],
        train_tokens=arrays["train_tokens"], train_labels=arrays["train_labels"],
        test_tokens=arrays["test_tokens"], test_labels=arrays["test_labels"],
        shards=list(arrays["shards"]))
    if ds.dataset_id != manifest["dataset_id"]:
        raise ContractError(f"dataset in {in_dir} does not match its manifest")
    return ds
