"""Synthetic co-registered subject generation.

Each subject gets three channels on a shared grid: a post-surgery MRI, a
follow-up MRI at the time a new enhancing lesion is found, and a radiation
dose map focused on the resection cavity. The class signal is routed
per channel so single-channel informativeness is controllable:

* dose channel: peak dose drawn from a class-conditional distribution,
* post-op channel: cavity rim thickness drawn class-conditionally,
* event channel: lesion position geometry, deliberately weak. High-dose
  lesion placement is enforced for RICE subjects; the rim rendered in the
  event scan is drawn from a pooled (class-independent) distribution so the
  event channel carries position information only.

Everything is deterministic given (config, stream state, label); per-subject
streams derive from (cohort seed, subject index).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import GenerationError
from .manifest import (
    CohortManifest,
    LABEL_RECURRENCE,
    LABEL_RICE,
    SPLIT_TEST,
    SPLIT_TRAIN,
    SubjectRecord,
    save_manifest,
)
from .volume import Volume, write_volume

TISSUE_INTENSITY = 1.0
CAVITY_INTENSITY = 0.2
RIM_INTENSITY = 1.6
LESION_INTENSITY_BOOST = 0.8
HIGH_DOSE_FRACTION = 0.8  # RICE lesions live where dose >= this * peak


@dataclass
class PhantomConfig:
    grid_shape: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 1.0
    brain_semi_axes_vox: tuple[float, float, float] = (20.0, 18.0, 16.0)
    cavity_radius_vox: tuple[float, float] = (3.0, 4.5)
    lesion_radius_vox: tuple[float, float] = (2.5, 4.0)
    lesion_annulus_vox: float = 3.0
    dose_sigma_vox: tuple[float, float] = (9.0, 12.0)
    dose_anisotropy: tuple[float, float] = (0.8, 1.25)
    dmax_gy_recurrence: tuple[float, float] = (57.0, 4.0)
    dmax_gy_rice: tuple[float, float] = (67.0, 4.0)
    rim_thickness_recurrence_vox: tuple[float, float] = (2.7, 0.75)
    rim_thickness_rice_vox: tuple[float, float] = (2.05, 0.75)
    lesion_distance_overlap: float = 0.55
    noise_sigma: float = 0.12
    texture_amp: float = 0.08
    texture_grid_vox: int = 8
    n_fractions_range: tuple[int, int] = (28, 33)
    seed: int = 0

    def validate(self) -> None:
        if len(self.grid_shape) != 3 or any(int(n) < 8 for n in self.grid_shape):
            raise ValueError(f"grid_shape must be 3 ints >= 8, got {self.grid_shape}")
        if self.spacing_mm <= 0:
            raise ValueError("spacing_mm must be positive")
        for a in range(3):
            center = (self.grid_shape[a] - 1) / 2.0
            if center - self.brain_semi_axes_vox[a] < 2.0:
                raise ValueError(
                    f"brain semi-axis {self.brain_semi_axes_vox[a]} leaves <2 voxel margin on axis {a}")
        for name in ("cavity_radius_vox", "lesion_radius_vox", "dose_sigma_vox", "dose_anisotropy"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must be a positive ordered range, got ({lo}, {hi})")
        if not 0.0 <= self.lesion_distance_overlap <= 1.0:
            raise ValueError("lesion_distance_overlap must lie in [0, 1]")
        if self.n_fractions_range[0] < 1 or self.n_fractions_range[1] < self.n_fractions_range[0]:
            raise ValueError(f"n_fractions_range must be ordered positive ints, got {self.n_fractions_range}")


@dataclass
class SubjectTruth:
    """Generative ground truth per subject, written for test oracles only."""

    cavity_center_vox: tuple[int, int, int]
    lesion_center_vox: tuple[int, int, int]
    isocenter_vox: tuple[int, int, int]
    dmax_gy: float
    dose_at_lesion_gy: float
    label: str


def _uniform(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _coarse_texture(rng: np.random.Generator, shape: tuple[int, int, int],
                    step: int, amp: float) -> np.ndarray:
    """Smooth low-frequency field: coarse Gaussian nodes upsampled trilinearly."""
    nodes = [int(np.ceil((n - 1) / step)) + 1 for n in shape]
    coarse = rng.normal(0.0, amp, size=nodes)
    out = coarse
    for a in range(3):
        u = np.arange(shape[a], dtype=np.float64) / step
        lo = np.minimum(np.floor(u).astype(np.intp), nodes[a] - 1)
        hi = np.minimum(lo + 1, nodes[a] - 1)
        w = (u - lo).reshape([-1 if ax == a else 1 for ax in range(3)])
        out = np.take(out, lo, axis=a) * (1.0 - w) + np.take(out, hi, axis=a) * w
    return out.astype(np.float32)


def _pick_voxel(rng: np.random.Generator, mask: np.ndarray, constraint: str) -> tuple[int, int, int]:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise GenerationError(f"no voxel satisfies: {constraint}")
    flat = int(idx[rng.integers(0, idx.size)])
    return tuple(int(v) for v in np.unravel_index(flat, mask.shape))


def generate_subject(cfg: PhantomConfig, rng: np.random.Generator, label: str
                     ) -> tuple[Volume, Volume, Volume, SubjectTruth]:
    """Generate one subject's (post_op, event, dose) channels plus ground truth.

    The dose volume returned here is the full treatment dose (peak = drawn
    D_max at the isocenter voxel); the dose channel is noise-free.
    """
    cfg.validate()
    if label not in (LABEL_RECURRENCE, LABEL_RICE):
        raise ValueError(f"unknown label {label!r}")
    shape = tuple(int(n) for n in cfg.grid_shape)
    center = np.array([(n - 1) / 2.0 for n in shape])
    semi = np.asarray(cfg.brain_semi_axes_vox, dtype=np.float64)

    grids = np.ogrid[0:shape[0], 0:shape[1], 0:shape[2]]
    brain = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center, semi)) <= 1.0

    # Draw sequence is fixed; label changes distribution parameters only,
    # never the number of draws, so streams stay aligned across classes.
    inner = sum(((g - c) / (0.4 * s)) ** 2 for g, c, s in zip(grids, center, semi)) <= 1.0
    cavity_center = _pick_voxel(rng, inner, "cavity center inside the inner 40% of the brain")
    cavity_r = _uniform(rng, cfg.cavity_radius_vox)
    rim_params = cfg.rim_thickness_recurrence_vox if label == LABEL_RECURRENCE else cfg.rim_thickness_rice_vox
    rim_post = max(0.2, float(rng.normal(*rim_params)))
    pooled_mean = 0.5 * (cfg.rim_thickness_recurrence_vox[0] + cfg.rim_thickness_rice_vox[0])
    pooled_sd = 0.5 * (cfg.rim_thickness_recurrence_vox[1] + cfg.rim_thickness_rice_vox[1])
    rim_event = max(0.2, float(rng.normal(pooled_mean, pooled_sd)))
    lesion_r = _uniform(rng, cfg.lesion_radius_vox)
    dose_sigma = _uniform(rng, cfg.dose_sigma_vox)
    aniso = np.array([_uniform(rng, cfg.dose_anisotropy) for _ in range(3)])
    dmax_params = cfg.dmax_gy_recurrence if label == LABEL_RECURRENCE else cfg.dmax_gy_rice
    dmax = max(1.0, float(rng.normal(*dmax_params)))

    texture = _coarse_texture(rng, shape, cfg.texture_grid_vox, cfg.texture_amp)
    noise_post = rng.normal(0.0, cfg.noise_sigma, size=shape).astype(np.float32)
    noise_event = rng.normal(0.0, cfg.noise_sigma, size=shape).astype(np.float32)

    cav_dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, np.asarray(cavity_center, dtype=np.float64))))

    # Dose: anisotropic Gaussian centered on the cavity (= isocenter).
    quad = sum(((g - c) / (dose_sigma * k)) ** 2
               for g, c, k in zip(grids, np.asarray(cavity_center, dtype=np.float64), aniso))
    dose_arr = (dmax * np.exp(-0.5 * quad)).astype(np.float32)

    high_dose = dose_arr >= np.float32(HIGH_DOSE_FRACTION * dmax)
    outside_cavity = cav_dist > cavity_r
    s_rice = high_dose & outside_cavity & brain
    s_rec = (cav_dist <= cavity_r + cfg.lesion_annulus_vox) & outside_cavity & brain

    own_first = rng.uniform() >= cfg.lesion_distance_overlap / 2.0
    if label == LABEL_RICE:
        pool = s_rice if own_first else (s_rec & s_rice)
        if not pool.any():
            pool = s_rice
        lesion_center = _pick_voxel(rng, pool, f"dose >= {HIGH_DOSE_FRACTION}*dmax outside the cavity")
    else:
        pool = s_rec if own_first else s_rice
        if not pool.any():
            pool = s_rec
        lesion_center = _pick_voxel(rng, pool, "cavity-margin annulus inside the brain")

    def render_mri(rim_thickness: float, noise: np.ndarray, lesion: bool) -> np.ndarray:
        arr = np.where(brain, np.float32(TISSUE_INTENSITY) + texture, np.float32(0.0))
        arr = np.where(brain & (cav_dist <= cavity_r), np.float32(CAVITY_INTENSITY), arr)
        rim_mask = brain & (cav_dist > cavity_r) & (cav_dist <= cavity_r + rim_thickness)
        arr = np.where(rim_mask, np.float32(RIM_INTENSITY), arr)
        if lesion:
            les_dist = np.sqrt(sum((g - c) ** 2 for g, c in
                                   zip(grids, np.asarray(lesion_center, dtype=np.float64))))
            arr = arr + np.where(brain & (les_dist <= lesion_r),
                                 np.float32(LESION_INTENSITY_BOOST), np.float32(0.0))
        return (arr + np.where(brain, noise, np.float32(0.0))).astype(np.float32)

    spacing = (cfg.spacing_mm,) * 3
    origin = (0.0, 0.0, 0.0)
    post_op = Volume(render_mri(rim_post, noise_post, lesion=False), spacing, origin)
    event = Volume(render_mri(rim_event, noise_event, lesion=True), spacing, origin)
    dose = Volume(dose_arr, spacing, origin)
    truth = SubjectTruth(
        cavity_center_vox=cavity_center,
        lesion_center_vox=lesion_center,
        isocenter_vox=cavity_center,
        dmax_gy=dmax,
        dose_at_lesion_gy=float(dose_arr[lesion_center]),
        label=label,
    )
    return post_op, event, dose, truth


def subject_stream(cohort_seed: int, subject_index: int) -> np.random.Generator:
    """Per-subject random stream derived from (cohort seed, subject index)."""
    return np.random.default_rng(np.random.SeedSequence([int(cohort_seed), int(subject_index)]))


def generate_cohort(cfg: PhantomConfig,
                    n_train_recurrence: int = 48,
                    n_train_rice: int = 32,
                    n_test_recurrence: int = 7,
                    n_test_rice: int = 5,
                    out_dir: str | os.PathLike = ".",
                    target_spacing_mm: Optional[float] = None,
                    crop_shape: Optional[tuple[int, int, int]] = None) -> CohortManifest:
    """Generate and write a full cohort: channel files, truth files, manifest.

    The dose file on disk is the single-fraction map (total / n_fractions);
    the preprocessing pipeline scales it back up. truth.json files hold the
    generative ground truth and are never read by training code.
    """
    cfg.validate()
    for n in (n_train_recurrence, n_train_rice, n_test_recurrence, n_test_rice):
        if int(n) < 0:
            raise ValueError("subject counts must be >= 0")
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    roster = (
        [(SPLIT_TRAIN, LABEL_RECURRENCE)] * int(n_train_recurrence)
        + [(SPLIT_TRAIN, LABEL_RICE)] * int(n_train_rice)
        + [(SPLIT_TEST, LABEL_RECURRENCE)] * int(n_test_recurrence)
        + [(SPLIT_TEST, LABEL_RICE)] * int(n_test_rice)
    )
    subjects = []
    for index, (split, label) in enumerate(roster):
        rng = subject_stream(cfg.seed, index)
        post_op, event, dose, truth = generate_subject(cfg, rng, label)
        n_fractions = int(rng.integers(cfg.n_fractions_range[0], cfg.n_fractions_range[1] + 1))

        subject_id = f"sub-{index:03d}"
        sub_dir = os.path.join(out_dir, subject_id)
        os.makedirs(sub_dir, exist_ok=True)
        per_fraction = dose.with_values(dose.values / np.float32(n_fractions))
        paths = {}
        for name, vol in (("post_op", post_op), ("event", event), ("dose", per_fraction)):
            rel = os.path.join(subject_id, name)
            write_volume(vol, os.path.join(out_dir, rel))
            paths[name] = rel
        with open(os.path.join(sub_dir, "truth.json"), "w", encoding="utf-8") as fh:
            json.dump(asdict(truth), fh, indent=2, sort_keys=True)
            fh.write("\n")

        subjects.append(SubjectRecord(
            subject_id=subject_id,
            channel_paths=paths,
            label=label,
            n_fractions=n_fractions,
            split=split,
        ))

    manifest = CohortManifest(
        subjects=subjects,
        target_spacing_mm=float(target_spacing_mm if target_spacing_mm is not None else cfg.spacing_mm),
        crop_shape=tuple(crop_shape) if crop_shape is not None else tuple(cfg.grid_shape),
        seed=cfg.seed,
    )
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_truth(cohort_dir: str | os.PathLike, subject_id: str) -> SubjectTruth:
    with open(os.path.join(str(cohort_dir), subject_id, "truth.json"), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return SubjectTruth(
        cavity_center_vox=tuple(doc["cavity_center_vox"]),
        lesion_center_vox=tuple(doc["lesion_center_vox"]),
        isocenter_vox=tuple(doc["isocenter_vox"]),
        dmax_gy=float(doc["dmax_gy"]),
        dose_at_lesion_gy=float(doc["dose_at_lesion_gy"]),
        label=doc["label"],
    )
