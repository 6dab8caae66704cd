"""Standardized preprocessing: resample, dose accumulation, normalize, crop.

Per subject: every channel is resampled to the manifest's isotropic target
spacing; the single-fraction dose file is scaled by the fraction count to the
full treatment dose; channels are normalized; everything is cropped/padded to
the manifest's crop shape. Two normalization modes exist:

* ``masked`` (default): image channels are z-scored over their nonzero
  (brain) voxels; the dose channel is divided by a fixed reference dose so
  its between-subject magnitude ordering survives normalization.
* ``zscore_all``: every channel is z-scored over the whole volume.

A completed output directory carries a stamp with the parameter fingerprint;
rerunning over the same inputs and parameters is a no-op.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import replace

import numpy as np

from .manifest import CohortManifest, load_manifest, save_manifest
from .volume import (Volume, center_crop_pad, read_volume, resample_isotropic,
                     scale_fraction_dose, scale_values, write_volume, zscore)

NORMALIZE_MODES = ("masked", "zscore_all")
STAMP_NAME = ".preprocess_stamp.json"


def preprocess_subject_volumes(volumes: dict[str, Volume], n_fractions: int,
                               target_spacing_mm: float, crop_shape,
                               normalize_mode: str = "masked",
                               dose_ref_gy: float = 80.0) -> dict[str, Volume]:
    """Apply the full pipeline to one subject's channel volumes."""
    if normalize_mode not in NORMALIZE_MODES:
        raise ValueError(f"normalize_mode must be one of {NORMALIZE_MODES}, got {normalize_mode!r}")
    out = {}
    for name, vol in volumes.items():
        v = resample_isotropic(vol, target_spacing_mm)
        if name == "dose":
            v = scale_fraction_dose(v, n_fractions)
            if normalize_mode == "masked":
                v = scale_values(v, 1.0 / dose_ref_gy)
            else:
                v = zscore(v)
        else:
            if normalize_mode == "masked":
                mask = v.with_values((v.values != 0).astype(np.float32))
                v = zscore(v, mask)
            else:
                v = zscore(v)
        out[name] = center_crop_pad(v, crop_shape)
    return out


def _stamp_payload(manifest_path: str, normalize_mode: str, dose_ref_gy: float,
                   manifest: CohortManifest) -> dict:
    with open(manifest_path, "rb") as fh:
        manifest_hash = hashlib.sha256(fh.read()).hexdigest()
    return {
        "manifest_sha256": manifest_hash,
        "normalize_mode": normalize_mode,
        "dose_ref_gy": dose_ref_gy,
        "target_spacing_mm": manifest.target_spacing_mm,
        "crop_shape": list(manifest.crop_shape),
    }


def preprocess_cohort(manifest_path: str, cohort_dir: str, out_dir: str,
                      normalize_mode: str = "masked", dose_ref_gy: float = 80.0,
                      verbose: bool = False) -> str:
    """Preprocess every subject; returns the path of the new manifest.

    The output manifest records n_fractions = 1 for every subject: the dose
    files it references already hold the accumulated treatment dose.
    """
    manifest = load_manifest(manifest_path)
    os.makedirs(out_dir, exist_ok=True)
    stamp_path = os.path.join(out_dir, STAMP_NAME)
    payload = _stamp_payload(manifest_path, normalize_mode, dose_ref_gy, manifest)
    out_manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.exists(stamp_path):
        with open(stamp_path, "r", encoding="utf-8") as fh:
            if json.load(fh) == payload and os.path.exists(out_manifest_path):
                if verbose:
                    print(f"preprocess: outputs in {out_dir} are current, nothing to do")
                return out_manifest_path

    new_subjects = []
    for rec in manifest.subjects:
        volumes = {name: read_volume(os.path.join(cohort_dir, rel))
                   for name, rel in rec.channel_paths.items()}
        processed = preprocess_subject_volumes(
            volumes, rec.n_fractions, manifest.target_spacing_mm, manifest.crop_shape,
            normalize_mode=normalize_mode, dose_ref_gy=dose_ref_gy)
        os.makedirs(os.path.join(out_dir, rec.subject_id), exist_ok=True)
        paths = {}
        for name, vol in processed.items():
            rel = os.path.join(rec.subject_id, name)
            write_volume(vol, os.path.join(out_dir, rel))
            paths[name] = rel
        new_subjects.append(replace(rec, channel_paths=paths, n_fractions=1))
        if verbose:
            print(f"preprocess: {rec.subject_id} done")

    out_manifest = CohortManifest(subjects=new_subjects,
                                  target_spacing_mm=manifest.target_spacing_mm,
                                  crop_shape=manifest.crop_shape,
                                  seed=manifest.seed)
    save_manifest(out_manifest, out_manifest_path)
    with open(stamp_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_manifest_path
