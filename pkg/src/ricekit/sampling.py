"""Subject-level stratified folds and class-balanced index sampling."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FoldError
from .manifest import CohortManifest, LABELS

K_FOLDS = 5


@dataclass
class FoldAssignment:
    """Subject-level fold mapping, stratified by label, fixed across experiments."""

    mapping: dict[str, int] = field(default_factory=dict)
    k: int = K_FOLDS
    seed: int = 0

    def fold_of(self, subject_id: str) -> int:
        return self.mapping[subject_id]

    def validate(self, manifest: CohortManifest) -> None:
        train_ids = {s.subject_id for s in manifest.train_subjects()}
        if set(self.mapping) != train_ids:
            raise FoldError("fold assignment does not cover exactly the training subjects")
        for label in LABELS:
            counts = np.zeros(self.k, dtype=int)
            for s in manifest.train_subjects():
                if s.label == label:
                    counts[self.mapping[s.subject_id]] += 1
            if counts.max() - counts.min() > 1:
                raise FoldError(f"label {label}: per-fold counts {counts.tolist()} exceed "
                                "stratification tolerance of 1")


def make_folds(manifest: CohortManifest, seed: int, k: int = K_FOLDS) -> FoldAssignment:
    """Deterministic stratified fold assignment over the training subjects.

    Subjects of each class are shuffled and dealt round-robin; each class
    starts dealing at the currently smallest fold so fold sizes stay within
    one subject of each other.
    """
    train = manifest.train_subjects()
    rng = np.random.default_rng(seed)
    mapping: dict[str, int] = {}
    totals = np.zeros(k, dtype=int)
    for label in LABELS:
        ids = sorted(s.subject_id for s in train if s.label == label)
        if len(ids) < k:
            raise FoldError(f"label {label}: {len(ids)} training subjects < {k} folds")
        rng.shuffle(ids)
        start = int(np.argmin(totals))
        for j, sid in enumerate(ids):
            fold = (start + j) % k
            mapping[sid] = fold
            totals[fold] += 1
    assignment = FoldAssignment(mapping=mapping, k=k, seed=int(seed))
    assignment.validate(manifest)
    return assignment


def save_folds(assignment: FoldAssignment, path: str | os.PathLike) -> None:
    doc = {"k": assignment.k, "seed": assignment.seed, "mapping": assignment.mapping}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_folds(path: str | os.PathLike) -> FoldAssignment:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return FoldAssignment(mapping={k: int(v) for k, v in doc["mapping"].items()},
                          k=int(doc["k"]), seed=int(doc["seed"]))


def folds_file_hash(path: str | os.PathLike) -> str:
    """Fingerprint used to prove every experiment consumed the same folds."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def weighted_index_stream(labels, rng: np.random.Generator, n_draws: int) -> np.ndarray:
    """Class-balancing sample-with-replacement index stream.

    Per-sample weight is inversely proportional to its class count, so both
    classes appear with expected frequency 1/2 regardless of imbalance.
    """
    y = np.asarray(labels)
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    counts = np.array([(y == 0).sum(), (y == 1).sum()])
    if counts.min() == 0:
        raise ValueError("weighted sampling needs both classes present")
    weights = 1.0 / counts[y]
    weights /= weights.sum()
    return rng.choice(y.size, size=int(n_draws), replace=True, p=weights)
