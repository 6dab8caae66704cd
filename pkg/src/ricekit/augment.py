"""Training-time data augmentation for multi-channel volumes.

Spatial transforms (elastic deformation, rotation, scaling) are composed into
a single sampling grid applied identically to every channel, so the spatial
relationship between scans and the dose map survives augmentation. Intensity
transforms (noise, brightness, gamma) touch the image channels only: the dose
channel is a computed physical quantity and corrupting it would erase the
signal under study.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

KIND_MRI = "mri"
KIND_DOSE = "dose"

# Channel kind lookup for the canonical channel names.
CHANNEL_KINDS = {"post_op": KIND_MRI, "event": KIND_MRI, "dose": KIND_DOSE}


@dataclass
class AugmentConfig:
    enabled: bool = True
    elastic_prob: float = 0.2
    elastic_grid_vox: int = 8
    elastic_max_disp_vox: float = 4.0
    rotation_prob: float = 0.2
    rotation_max_deg: float = 15.0
    scaling_prob: float = 0.2
    scaling_range: tuple[float, float] = (0.9, 1.1)
    noise_prob: float = 0.2
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)
    brightness_prob: float = 0.2
    brightness_range: float = 0.1
    gamma_prob: float = 0.2
    gamma_range: tuple[float, float] = (0.7, 1.5)

    def validate(self) -> None:
        for name in ("elastic_prob", "rotation_prob", "scaling_prob",
                     "noise_prob", "brightness_prob", "gamma_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("scaling_range", "noise_sigma_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} must be ordered, got ({lo}, {hi})")
        if self.elastic_grid_vox < 2:
            raise ValueError("elastic_grid_vox must be >= 2")


def _rotation_matrix(angles_rad: np.ndarray) -> np.ndarray:
    ax, ay, az = angles_rad
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


# voxel-index grids are pure functions of the shape; cache across samples
_GRID_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _base_grid(shape: tuple[int, int, int]) -> np.ndarray:
    grid = _GRID_CACHE.get(shape)
    if grid is None:
        grid = np.ascontiguousarray(
            np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape),
                                 indexing="ij")).reshape(3, -1))
        grid.flags.writeable = False
        _GRID_CACHE[shape] = grid
    return grid


def _upsample_field(coarse: np.ndarray, shape: tuple[int, int, int], step: int) -> np.ndarray:
    """Trilinear upsampling of a (3, gx, gy, gz) control grid to full resolution."""
    out = coarse
    for a in range(3):
        n_nodes = out.shape[1 + a]
        u = np.arange(shape[a], dtype=np.float64) / step
        lo = np.minimum(np.floor(u).astype(np.intp), n_nodes - 1)
        hi = np.minimum(lo + 1, n_nodes - 1)
        w = (u - lo).reshape([1] + [-1 if ax == a else 1 for ax in range(3)])
        out = np.take(out, lo, axis=1 + a) * (1.0 - w) + np.take(out, hi, axis=1 + a) * w
    return out


def _minmax_gamma(channel: np.ndarray, exponent: float) -> np.ndarray:
    lo = float(channel.min())
    hi = float(channel.max())
    if hi <= lo:
        return channel
    t = (channel - lo) / (hi - lo)
    return (t ** exponent) * (hi - lo) + lo


def augment_sample(sample: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig,
                   channel_kinds: Sequence[str]) -> np.ndarray:
    """Randomly augment one (C, X, Y, Z) sample.

    Transforms fire independently with their configured probabilities, in a
    fixed draw order (elastic, rotation, scaling, noise, brightness, gamma).
    Warping uses trilinear resampling with zero fill outside the volume.
    With nothing firing the input is returned unchanged.
    """
    cfg.validate()
    if sample.ndim != 4 or sample.shape[0] != len(channel_kinds):
        raise ValueError(f"sample shape {sample.shape} does not match {len(channel_kinds)} channels")
    if not cfg.enabled:
        return sample
    shape = sample.shape[1:]

    do_elastic = rng.uniform() < cfg.elastic_prob
    do_rotation = rng.uniform() < cfg.rotation_prob
    do_scaling = rng.uniform() < cfg.scaling_prob
    do_noise = rng.uniform() < cfg.noise_prob
    do_brightness = rng.uniform() < cfg.brightness_prob
    do_gamma = rng.uniform() < cfg.gamma_prob

    out = sample
    if do_elastic or do_rotation or do_scaling:
        center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
        matrix = np.eye(3)
        if do_rotation:
            angles = np.deg2rad(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg, size=3))
            matrix = matrix @ _rotation_matrix(angles)
        if do_scaling:
            factor = rng.uniform(*cfg.scaling_range)
            matrix = matrix / factor  # output->source map: zoom inverts
        grid = _base_grid(shape)
        offset = center - matrix @ center
        coords = (matrix @ grid + offset[:, None]).reshape(3, *shape)
        if do_elastic:
            step = cfg.elastic_grid_vox
            nodes = [int(np.ceil((n - 1) / step)) + 1 for n in shape]
            coarse = rng.uniform(-cfg.elastic_max_disp_vox, cfg.elastic_max_disp_vox,
                                 size=(3, *nodes))
            coords = coords + _upsample_field(coarse, shape, step)
        warped = np.empty_like(sample)
        for c in range(sample.shape[0]):
            map_coordinates(out[c], coords, order=1, mode="constant", cval=0.0,
                            output=warped[c])
        out = warped

    if do_noise or do_brightness or do_gamma:
        if out is sample:
            out = sample.copy()
        for c, kind in enumerate(channel_kinds):
            if kind != KIND_MRI:
                continue
            if do_noise:
                sigma = rng.uniform(*cfg.noise_sigma_range)
                out[c] = out[c] + rng.normal(0.0, sigma, size=shape).astype(np.float32)
            if do_brightness:
                out[c] = out[c] + np.float32(rng.uniform(-cfg.brightness_range, cfg.brightness_range))
            if do_gamma:
                exponent = rng.uniform(*cfg.gamma_range)
                out[c] = _minmax_gamma(out[c], exponent).astype(np.float32)
    return out


def kinds_for_channels(channel_names: Sequence[str]) -> tuple[str, ...]:
    return tuple(CHANNEL_KINDS[name] for name in channel_names)
