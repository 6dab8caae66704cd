"""Modality-ablation harness: per-combo cross-validation plus test-set voting.

Every combination trains five fold models from a shared, pre-existing fold
assignment (this module refuses to regenerate folds: fold fixity across
experiments is part of the protocol). The five best-validation checkpoints
then vote on the held-out test set.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from . import net3d
from .augment import AugmentConfig
from .combos import ALL_COMBOS, ModalityCombo
from .errors import FoldError, TrainingDivergedError
from .manifest import CohortManifest, load_manifest
from .metrics import macro_f1_score, majority_vote
from .sampling import folds_file_hash, load_folds
from .train import TrainConfig, load_subject_sample, predict_with_probs, train_fold


@dataclass
class ExperimentResult:
    combo_index: int
    combo_name: str
    fold_val_f1: list[float]
    val_mean: float
    val_sd: float
    fold_test_f1: list[float]
    test_f1_vote: float
    fold_best_epochs: list[int]
    per_subject: dict[str, dict]
    checkpoints: list[str]
    folds_hash: str

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentResult":
        return cls(**doc)


def save_results(results: list[ExperimentResult], extra: dict, path: str | os.PathLike) -> None:
    doc = {"combos": [asdict(r) for r in results]}
    doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_results(path: str | os.PathLike) -> list[ExperimentResult]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [ExperimentResult.from_dict(d) for d in doc["combos"]]


def _fold_job(job: dict) -> dict:
    """One (combo, fold) training, self-contained for process workers."""
    manifest = load_manifest(job["manifest_path"])
    folds = load_folds(job["folds_path"])
    combo = ModalityCombo(job["combo_index"])
    try:
        result = train_fold(
            manifest=manifest,
            cohort_dir=job["cohort_dir"],
            folds=folds,
            fold_id=job["fold_id"],
            combo=combo,
            train_cfg=TrainConfig(**job["train_cfg"]),
            aug_cfg=AugmentConfig(**job["aug_cfg"]),
            base_width=job["base_width"],
            stem_kernel=job["stem_kernel"],
            out_dir=job["out_dir"],
        )
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(
            f"combo {combo} fold {job['fold_id']}: {exc}") from exc
    return {
        "combo_index": combo.index,
        "fold_id": result.fold_id,
        "best_val_f1": result.best_val_f1,
        "best_epoch": result.best_epoch,
        "final_val_f1": result.final_val_f1,
        "best_checkpoint": result.best_checkpoint,
    }


def run_ablation(manifest_path: str,
                 cohort_dir: str,
                 folds_path: str,
                 train_cfg: TrainConfig,
                 aug_cfg: AugmentConfig,
                 combos: tuple[ModalityCombo, ...] = ALL_COMBOS,
                 base_width: int = 8,
                 stem_kernel: int = 7,
                 out_dir: str | os.PathLike = ".",
                 workers: int = 1) -> list[ExperimentResult]:
    """Train every requested combo over all folds and vote on the test set.

    The folds file must already exist; it is hashed and the hash recorded per
    combo so downstream checks can prove all experiments shared one split.
    """
    if not os.path.exists(folds_path):
        raise FoldError(f"folds file {folds_path} does not exist; refusing to regenerate "
                        "mid-experiment (folds are fixed across all experiments)")
    manifest = load_manifest(manifest_path)
    folds = load_folds(folds_path)
    folds.validate(manifest)
    fhash = folds_file_hash(folds_path)
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    jobs = [{
        "manifest_path": manifest_path,
        "cohort_dir": cohort_dir,
        "folds_path": folds_path,
        "combo_index": combo.index,
        "fold_id": fold_id,
        "train_cfg": asdict(train_cfg),
        "aug_cfg": asdict(aug_cfg),
        "base_width": base_width,
        "stem_kernel": stem_kernel,
        "out_dir": out_dir,
    } for combo in combos for fold_id in range(folds.k)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_fold_job, jobs))
    else:
        raw = [_fold_job(job) for job in jobs]
    by_combo: dict[int, list[dict]] = {}
    for r in raw:
        by_combo.setdefault(r["combo_index"], []).append(r)

    test_recs = manifest.test_subjects()
    test_labels = np.array([r.label_int for r in test_recs])
    results = []
    for combo in combos:
        fold_results = sorted(by_combo[combo.index], key=lambda r: r["fold_id"])
        test_arrays = [load_subject_sample(cohort_dir, rec, combo) for rec in test_recs]
        votes = np.zeros((folds.k, len(test_recs)), dtype=np.int64)
        probs = np.zeros((folds.k, len(test_recs)))
        fold_test_f1 = []
        for fr in fold_results:
            cfg, params = net3d.load_checkpoint(fr["best_checkpoint"])
            preds, p1 = predict_with_probs(params, cfg, test_arrays)
            votes[fr["fold_id"]] = preds
            probs[fr["fold_id"]] = p1
            fold_test_f1.append(macro_f1_score(test_labels, preds))
        ensemble = majority_vote(votes, probs)
        fold_val_f1 = [fr["best_val_f1"] for fr in fold_results]
        per_subject = {
            rec.subject_id: {
                "votes": [int(v) for v in votes[:, j]],
                "pred": int(ensemble[j]),
                "label": int(test_labels[j]),
            }
            for j, rec in enumerate(test_recs)
        }
        results.append(ExperimentResult(
            combo_index=combo.index,
            combo_name=combo.name,
            fold_val_f1=[float(v) for v in fold_val_f1],
            val_mean=float(np.mean(fold_val_f1)),
            val_sd=float(np.std(fold_val_f1)),
            fold_test_f1=[float(v) for v in fold_test_f1],
            test_f1_vote=float(macro_f1_score(test_labels, ensemble)),
            fold_best_epochs=[int(fr["best_epoch"]) for fr in fold_results],
            per_subject=per_subject,
            checkpoints=[os.path.relpath(fr["best_checkpoint"], out_dir) for fr in fold_results],
            folds_hash=fhash,
        ))
    return results
