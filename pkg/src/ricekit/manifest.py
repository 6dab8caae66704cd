"""Cohort index: one record per subject, serialized as a single JSON manifest."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

LABEL_RECURRENCE = "RECURRENCE"
LABEL_RICE = "RICE"
LABELS = (LABEL_RECURRENCE, LABEL_RICE)
# Integer encoding used by training/metrics: recurrence=0, RICE=1.
LABEL_TO_INT = {LABEL_RECURRENCE: 0, LABEL_RICE: 1}

SPLIT_TRAIN = "TRAIN"
SPLIT_TEST = "TEST"

CHANNEL_NAMES = ("post_op", "event", "dose")


@dataclass
class SubjectRecord:
    """One subject's channel files, label, fraction count, and split assignment."""

    subject_id: str
    channel_paths: dict[str, str]
    label: str
    n_fractions: int
    split: str
    fold: Optional[int] = None

    def validate(self) -> None:
        missing = [c for c in CHANNEL_NAMES if c not in self.channel_paths]
        if missing:
            raise ValueError(f"subject {self.subject_id}: missing channel paths {missing}")
        paths = [self.channel_paths[c] for c in CHANNEL_NAMES]
        if len(set(paths)) != len(paths):
            raise ValueError(f"subject {self.subject_id}: channel paths must be distinct")
        if self.label not in LABELS:
            raise ValueError(f"subject {self.subject_id}: unknown label {self.label!r}")
        if self.split not in (SPLIT_TRAIN, SPLIT_TEST):
            raise ValueError(f"subject {self.subject_id}: unknown split {self.split!r}")
        if int(self.n_fractions) < 1:
            raise ValueError(f"subject {self.subject_id}: n_fractions must be positive")
        # Fold is a training-only concept: present iff the subject trains.
        if self.split == SPLIT_TRAIN and self.fold is not None and not 0 <= self.fold <= 4:
            raise ValueError(f"subject {self.subject_id}: fold must be 0..4, got {self.fold}")
        if self.split == SPLIT_TEST and self.fold is not None:
            raise ValueError(f"subject {self.subject_id}: test subjects carry no fold")

    @property
    def label_int(self) -> int:
        return LABEL_TO_INT[self.label]


@dataclass
class CohortManifest:
    """The cohort index: subjects plus the preprocessing targets they share."""

    subjects: list[SubjectRecord] = field(default_factory=list)
    target_spacing_mm: float = 1.0
    crop_shape: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0

    def validate(self) -> None:
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate subject ids: {dupes}")
        for s in self.subjects:
            s.validate()
        folds = {s.fold for s in self.subjects if s.split == SPLIT_TRAIN and s.fold is not None}
        if folds and folds != set(range(5)):
            raise ValueError(f"fold assignment incomplete: populated folds {sorted(folds)}")

    def train_subjects(self) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.split == SPLIT_TRAIN]

    def test_subjects(self) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.split == SPLIT_TEST]

    def by_id(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(f"no subject {subject_id!r} in manifest")


def save_manifest(manifest: CohortManifest, path: str | os.PathLike) -> None:
    manifest.validate()
    doc = {
        "target_spacing_mm": manifest.target_spacing_mm,
        "crop_shape": list(manifest.crop_shape),
        "seed": manifest.seed,
        "subjects": [
            {
                "subject_id": s.subject_id,
                "channel_paths": {c: s.channel_paths[c] for c in CHANNEL_NAMES},
                "label": s.label,
                "n_fractions": int(s.n_fractions),
                "split": s.split,
                "fold": s.fold,
            }
            for s in manifest.subjects
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | os.PathLike) -> CohortManifest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    manifest = CohortManifest(
        subjects=[
            SubjectRecord(
                subject_id=d["subject_id"],
                channel_paths=dict(d["channel_paths"]),
                label=d["label"],
                n_fractions=int(d["n_fractions"]),
                split=d["split"],
                fold=d.get("fold"),
            )
            for d in doc["subjects"]
        ],
        target_spacing_mm=float(doc["target_spacing_mm"]),
        crop_shape=tuple(int(x) for x in doc["crop_shape"]),
        seed=int(doc["seed"]),
    )
    manifest.validate()
    return manifest
