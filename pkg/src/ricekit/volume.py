"""3D volume data model, file I/O, and the standardized preprocessing operations.

A volume is a dense float32 scalar grid with voxel spacing and world origin.
Files are stored as a ``<name>.json`` header plus a ``<name>.raw`` payload of
little-endian float32 values in x-fastest order (index = x + nx*(y + ny*z)).
Arrays are indexed ``values[x, y, z]`` throughout the package.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, InvalidDoseError, VolumeFormatError

RAW_DTYPE = "f32le"
RAW_ORDER = "x-fastest"


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid with spacing/origin metadata.

    Attributes:
        values: float32 array of shape (nx, ny, nz), write-protected.
        spacing_mm: voxel edge lengths per axis, strictly positive.
        origin_mm: world coordinate of voxel (0, 0, 0).
    """

    values: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.ndim != 3 or min(vals.shape) < 1:
            raise ValueError(f"volume needs a 3D non-empty grid, got shape {vals.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive components, got {spacing}")
        if len(origin) != 3:
            raise ValueError(f"origin must have 3 components, got {origin}")
        if not np.isfinite(vals).all():
            raise ValueError("volume contains non-finite values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray, origin_mm: Optional[Sequence[float]] = None,
                    spacing_mm: Optional[Sequence[float]] = None) -> "Volume":
        """New volume reusing this one's metadata unless overridden."""
        return Volume(
            values=values,
            spacing_mm=tuple(spacing_mm) if spacing_mm is not None else self.spacing_mm,
            origin_mm=tuple(origin_mm) if origin_mm is not None else self.origin_mm,
        )


def _paths(path: str | os.PathLike) -> tuple[str, str]:
    base = str(path)
    if base.endswith(".json"):
        base = base[: -len(".json")]
    elif base.endswith(".raw"):
        base = base[: -len(".raw")]
    return base + ".json", base + ".raw"


def write_volume(vol: Volume, path: str | os.PathLike) -> None:
    """Write a volume as a header+raw pair.

    ``path`` may be the basename or either member of the pair; both files are
    derived from it. The payload is float32 little-endian, x-fastest.
    """
    header_path, raw_path = _paths(path)
    header = {
        "shape": list(vol.shape),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
        "dtype": RAW_DTYPE,
        "order": RAW_ORDER,
    }
    payload = vol.values.astype("<f4", copy=False).tobytes(order="F")
    with open(header_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(raw_path, "wb") as fh:
        fh.write(payload)


def read_volume(path: str | os.PathLike) -> Volume:
    """Read a header+raw volume pair written by :func:`write_volume`.

    Raises VolumeFormatError for missing files, unsupported encodings,
    payload size mismatches, or non-finite values.
    """
    header_path, raw_path = _paths(path)
    if not os.path.exists(header_path):
        raise VolumeFormatError(f"missing volume header: {header_path}")
    if not os.path.exists(raw_path):
        raise VolumeFormatError(f"missing volume payload: {raw_path}")
    with open(header_path, "r", encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise VolumeFormatError(f"unparseable volume header {header_path}: {exc}") from exc
    for key in ("shape", "spacing_mm", "origin_mm", "dtype", "order"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: missing header key '{key}'")
    if header["dtype"] != RAW_DTYPE:
        raise VolumeFormatError(f"{header_path}: unsupported dtype {header['dtype']!r} (expected {RAW_DTYPE!r})")
    if header["order"] != RAW_ORDER:
        raise VolumeFormatError(f"{header_path}: unsupported order {header['order']!r} (expected {RAW_ORDER!r})")
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) != 3 or any(n < 1 for n in shape):
        raise VolumeFormatError(f"{header_path}: invalid shape {shape}")
    expected = shape[0] * shape[1] * shape[2] * 4
    with open(raw_path, "rb") as fh:
        raw = fh.read()
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload is {len(raw)} bytes, header shape {shape} needs {expected}")
    values = np.frombuffer(raw, dtype="<f4").reshape(shape, order="F")
    if not np.isfinite(values).all():
        raise VolumeFormatError(f"{raw_path}: payload contains non-finite values")
    return Volume(values=values, spacing_mm=header["spacing_mm"], origin_mm=header["origin_mm"])


def resample_isotropic(vol: Volume, target_spacing_mm: float) -> Volume:
    """Resample to isotropic spacing by trilinear interpolation.

    Output size per axis is round(n * spacing / target) with a minimum of 1
    (round-half-up). Sample positions are voxel centers mapped through
    origin/spacing; positions outside the grid clamp to the boundary. An
    input already at the target spacing round-trips bit-identically.
    """
    t = float(target_spacing_mm)
    if t <= 0:
        raise ValueError(f"target spacing must be positive, got {t}")
    n = vol.shape
    s = vol.spacing_mm
    new_n = tuple(max(1, int(np.floor(n[a] * s[a] / t + 0.5))) for a in range(3))
    if new_n == n and all(abs(sa - t) == 0.0 for sa in s):
        return vol.with_values(vol.values, spacing_mm=(t, t, t))

    # Separable trilinear: per-axis floor index + fractional weight.
    idx0, idx1, frac = [], [], []
    for a in range(3):
        u = np.arange(new_n[a], dtype=np.float64) * (t / s[a])
        u = np.clip(u, 0.0, n[a] - 1)
        lo = np.floor(u).astype(np.intp)
        lo = np.minimum(lo, n[a] - 1)
        hi = np.minimum(lo + 1, n[a] - 1)
        idx0.append(lo)
        idx1.append(hi)
        frac.append(u - lo)
    v = vol.values.astype(np.float64, copy=False)
    out = np.zeros(new_n, dtype=np.float64)
    for cx, ix, wx in ((0, idx0[0], 1.0 - frac[0]), (1, idx1[0], frac[0])):
        for cy, iy, wy in ((0, idx0[1], 1.0 - frac[1]), (1, idx1[1], frac[1])):
            for cz, iz, wz in ((0, idx0[2], 1.0 - frac[2]), (1, idx1[2], frac[2])):
                w = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
                out += w * v[np.ix_(ix, iy, iz)]
    return Volume(values=out.astype(np.float32), spacing_mm=(t, t, t), origin_mm=vol.origin_mm)


def zscore(vol: Volume, mask: Optional[Volume] = None) -> Volume:
    """Normalize to zero mean / unit standard deviation.

    Statistics (population form, divisor N) are computed over mask-nonzero
    voxels when a mask is given, else over all voxels; the affine transform
    is then applied to every voxel. A zero spread raises DegenerateInputError.
    """
    v = vol.values.astype(np.float64, copy=False)
    if mask is not None:
        if mask.shape != vol.shape:
            raise ValueError(f"mask shape {mask.shape} != volume shape {vol.shape}")
        sel = mask.values != 0
        count = int(sel.sum())
        if count < 2:
            raise ValueError(f"mask selects {count} voxels; need at least 2")
        region = v[sel]
    else:
        region = v.reshape(-1)
    mu = float(region.mean())
    sigma = float(region.std())  # population (ddof=0)
    if sigma == 0.0 or not np.isfinite(sigma):
        raise DegenerateInputError(f"zero spread over normalization region (std={sigma})")
    return vol.with_values(((v - mu) / sigma).astype(np.float32))


def center_crop_pad(vol: Volume, target_shape: Sequence[int]) -> Volume:
    """Center-crop or zero-pad each axis to the target size.

    When cropping, floor((n-t)/2) leading voxels are removed; when padding,
    floor((t-n)/2) zero voxels are prepended. The origin shifts so retained
    voxels keep their world coordinates.
    """
    t = tuple(int(x) for x in target_shape)
    if len(t) != 3 or any(x < 1 for x in t):
        raise ValueError(f"target shape must be 3 positive integers, got {target_shape}")
    if t == vol.shape:
        return vol
    src_lo, dst_lo, span, origin = [], [], [], []
    for a in range(3):
        n = vol.shape[a]
        if n >= t[a]:
            start = (n - t[a]) // 2
            src_lo.append(start)
            dst_lo.append(0)
            span.append(t[a])
            origin.append(vol.origin_mm[a] + start * vol.spacing_mm[a])
        else:
            pad = (t[a] - n) // 2
            src_lo.append(0)
            dst_lo.append(pad)
            span.append(n)
            origin.append(vol.origin_mm[a] - pad * vol.spacing_mm[a])
    out = np.zeros(t, dtype=np.float32)
    out[dst_lo[0]:dst_lo[0] + span[0],
        dst_lo[1]:dst_lo[1] + span[1],
        dst_lo[2]:dst_lo[2] + span[2]] = vol.values[
        src_lo[0]:src_lo[0] + span[0],
        src_lo[1]:src_lo[1] + span[1],
        src_lo[2]:src_lo[2] + span[2]]
    return vol.with_values(out, origin_mm=origin)


def scale_fraction_dose(vol: Volume, n_fractions: int) -> Volume:
    """Scale a single-fraction dose map to the full treatment dose."""
    n = int(n_fractions)
    if n < 1:
        raise ValueError(f"fraction count must be a positive integer, got {n_fractions}")
    if float(vol.values.min()) < 0:
        raise InvalidDoseError(f"dose map contains negative values (min {vol.values.min():.4g})")
    return vol.with_values(vol.values * np.float32(n))


def scale_values(vol: Volume, factor: float) -> Volume:
    """Multiply every voxel by a constant (e.g. dose rescaling to [0, 1])."""
    f = float(factor)
    if not np.isfinite(f):
        raise ValueError("scale factor must be finite")
    return vol.with_values((vol.values.astype(np.float64) * f).astype(np.float32))


def stack_channels(volumes: Mapping[str, Volume], combo) -> np.ndarray:
    """Stack a subject's selected channels into a (C, nx, ny, nz) sample.

    Channel order is the canonical [post_op, event, dose] order filtered by
    the combo. All selected volumes must share shape and spacing.
    """
    names = list(combo.channels)
    missing = [n for n in names if n not in volumes]
    if missing:
        raise KeyError(f"combo needs channels {missing} not present in volumes")
    ref = volumes[names[0]]
    for n in names[1:]:
        v = volumes[n]
        if v.shape != ref.shape:
            raise ValueError(f"channel '{n}' shape {v.shape} != '{names[0]}' shape {ref.shape}")
        if v.spacing_mm != ref.spacing_mm:
            raise ValueError(f"channel '{n}' spacing {v.spacing_mm} != '{names[0]}' spacing {ref.spacing_mm}")
    return np.stack([volumes[n].values for n in names], axis=0)
