"""Adam/cross-entropy training over one cross-validation fold.

Each epoch draws class-balanced sample indices (one draw per training
subject, with replacement), augments, and steps the optimizer; the held-out
fold is scored with macro F1 after every epoch. Both the best-validation and
final-epoch checkpoints are kept; model selection for ensembling uses the
best-validation one.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import net3d
from .augment import AugmentConfig, augment_sample, kinds_for_channels
from .combos import ModalityCombo
from .errors import TrainingDivergedError
from .manifest import CohortManifest, SubjectRecord
from .metrics import macro_f1_score
from .sampling import FoldAssignment, weighted_index_stream
from .volume import read_volume, stack_channels


@dataclass
class TrainConfig:
    epochs: int = 60            # the original protocol's 800 is reachable via config
    learning_rate: float = 1e-3
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_batch_size: int = 16

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics need spread)")
        if not 0 < self.learning_rate:
            raise ValueError("learning_rate must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_grads(cls, grads: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(g) for k, g in grads.items()},
                   v={k: np.zeros_like(g) for k, g in grads.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, t: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, applied in place. Returns (params, state)."""
    if t < 1:
        raise ValueError("step index t starts at 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        if not np.isfinite(update).all():
            raise TrainingDivergedError(f"non-finite Adam update for {name}")
        params[name] -= update.astype(params[name].dtype)
    return params, state


def load_subject_sample(cohort_dir: str, record: SubjectRecord,
                        combo: ModalityCombo) -> np.ndarray:
    """Read and stack one subject's selected channels -> (C, X, Y, Z) float32."""
    volumes = {name: read_volume(os.path.join(cohort_dir, record.channel_paths[name]))
               for name in combo.channels}
    return stack_channels(volumes, combo)


@dataclass
class FoldHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_macro_f1: list[float] = field(default_factory=list)

    def save_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_macro_f1"])
            for e, l, f in zip(self.epochs, self.train_loss, self.val_macro_f1):
                writer.writerow([e, f"{l:.6f}", f"{f:.6f}"])


@dataclass
class FoldResult:
    fold_id: int
    combo: ModalityCombo
    best_val_f1: float
    best_epoch: int
    final_val_f1: float
    best_checkpoint: str
    final_checkpoint: str
    history: FoldHistory


def _predict(params, cfg, arrays, batch_size) -> np.ndarray:
    """Eval-mode class predictions for a list of (C, X, Y, Z) arrays."""
    preds = []
    for start in range(0, len(arrays), batch_size):
        x = np.stack(arrays[start:start + batch_size]).astype(np.float32)
        logits = net3d.forward(params, x, cfg, mode="eval")
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds)


def predict_with_probs(params, cfg, arrays, batch_size=16):
    """(predictions, probability of class 1) for a list of samples."""
    preds, probs = [], []
    for start in range(0, len(arrays), batch_size):
        x = np.stack(arrays[start:start + batch_size]).astype(np.float32)
        logits = net3d.forward(params, x, cfg, mode="eval")
        p = net3d.predict_prob(logits)
        preds.append(np.argmax(logits, axis=1))
        probs.append(p[:, 1])
    return np.concatenate(preds), np.concatenate(probs)


def train_fold(manifest: CohortManifest,
               cohort_dir: str,
               folds: FoldAssignment,
               fold_id: int,
               combo: ModalityCombo,
               train_cfg: TrainConfig,
               aug_cfg: AugmentConfig,
               base_width: int = 8,
               stem_kernel: int = 7,
               out_dir: str | os.PathLike = ".",
               preloaded: Optional[dict[str, np.ndarray]] = None) -> FoldResult:
    """Train on four folds, validate on the held-out fold each epoch.

    Fully deterministic given (train_cfg.seed, combo, fold_id): the init,
    sampler, and augmentation streams all derive from that triple.
    """
    train_cfg.validate()
    if not 0 <= fold_id < folds.k:
        raise ValueError(f"fold_id must be 0..{folds.k - 1}")
    folds.validate(manifest)
    os.makedirs(out_dir, exist_ok=True)

    train_recs = [s for s in manifest.train_subjects() if folds.fold_of(s.subject_id) != fold_id]
    val_recs = [s for s in manifest.train_subjects() if folds.fold_of(s.subject_id) == fold_id]
    kinds = kinds_for_channels(combo.channels)

    def fetch(rec: SubjectRecord) -> np.ndarray:
        if preloaded is not None:
            return preloaded[rec.subject_id]
        return load_subject_sample(cohort_dir, rec, combo)

    train_arrays = [fetch(r) for r in train_recs]
    train_labels = np.array([r.label_int for r in train_recs])
    val_arrays = [fetch(r) for r in val_recs]
    val_labels = np.array([r.label_int for r in val_recs])

    shape = train_arrays[0].shape[1:]
    net_cfg = net3d.ResNet3DConfig(in_channels=combo.n_channels, base_width=base_width,
                                   stem_kernel=stem_kernel, input_shape=shape)
    root = np.random.SeedSequence([int(train_cfg.seed), int(combo.index), int(fold_id)])
    init_ss, sampler_ss, aug_ss = root.spawn(3)
    params = net3d.init_model(net_cfg, np.random.default_rng(init_ss))
    sampler_rng = np.random.default_rng(sampler_ss)
    aug_rng = np.random.default_rng(aug_ss)

    state: Optional[AdamState] = None
    t = 0
    history = FoldHistory()
    best_val = -1.0
    best_epoch = -1
    best_params: Optional[dict] = None

    n_draws = len(train_arrays)  # one sampler pass per epoch equals the train-set size
    for epoch in range(train_cfg.epochs):
        order = weighted_index_stream(train_labels, sampler_rng, n_draws)
        batches = [order[s:s + train_cfg.batch_size]
                   for s in range(0, n_draws, train_cfg.batch_size)]
        if len(batches) > 1 and len(batches[-1]) == 1:
            # batch statistics are undefined over one sample; merge it back
            batches[-2] = np.concatenate([batches[-2], batches.pop()])
        losses = []
        for idx in batches:
            batch = np.stack([
                augment_sample(train_arrays[i], aug_rng, aug_cfg, kinds) for i in idx
            ]).astype(np.float32)
            loss, grads = net3d.backward(params, batch, train_labels[idx], net_cfg)
            if state is None:
                state = AdamState.for_grads(grads)
            t += 1
            adam_step(params, grads, state, t, train_cfg.learning_rate,
                      train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
            losses.append(loss)

        val_preds = _predict(params, net_cfg, val_arrays, train_cfg.eval_batch_size)
        val_f1 = macro_f1_score(val_labels, val_preds)
        history.epochs.append(epoch)
        history.train_loss.append(float(np.mean(losses)))
        history.val_macro_f1.append(val_f1)
        if val_f1 > best_val:
            best_val = val_f1
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}

    tag = f"combo{combo.index}_fold{fold_id}"
    best_path = os.path.join(str(out_dir), f"{tag}_best")
    final_path = os.path.join(str(out_dir), f"{tag}_final")
    extra = {"combo_index": combo.index, "fold_id": fold_id,
             "best_epoch": best_epoch, "seed": train_cfg.seed}
    net3d.save_checkpoint(best_path, net_cfg, best_params, extra=extra)
    net3d.save_checkpoint(final_path, net_cfg, params, extra=extra)
    history.save_csv(os.path.join(str(out_dir), f"{tag}_history.csv"))
    return FoldResult(
        fold_id=fold_id,
        combo=combo,
        best_val_f1=best_val,
        best_epoch=best_epoch,
        final_val_f1=history.val_macro_f1[-1],
        best_checkpoint=best_path,
        final_checkpoint=final_path,
        history=history,
    )
