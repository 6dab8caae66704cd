"""Occlusion-sensitivity maps for trained checkpoints.

Cubic regions on a regular stride grid are replaced with a fill value in
every channel at once (the channels are co-registered, so masking must stay
synchronized), the model is re-run, and the drop in the target-class
probability is recorded. Positive values mark regions whose content supports
the prediction. A per-channel diagnostic mode (occlude one channel only) is
available for attribution debugging; the synchronized mode is the method
proper.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import net3d
from .volume import Volume, write_volume


@dataclass
class OcclusionConfig:
    cube_size_vox: int = 8
    stride_vox: int = 4
    fill_value: float = 0.0  # z-scored background / mean-tissue level
    target: Union[str, int] = "predicted"  # "predicted" or a fixed class index
    channels: Union[str, int] = "all"      # "all" (synchronized) or one channel index

    def validate(self) -> None:
        if self.cube_size_vox < 1 or self.stride_vox < 1:
            raise ValueError("cube size and stride must be >= 1")
        if self.stride_vox > self.cube_size_vox:
            raise ValueError("stride must not exceed cube size (coverage gap)")
        if isinstance(self.target, str) and self.target != "predicted":
            raise ValueError(f"target must be 'predicted' or a class index, got {self.target!r}")
        if isinstance(self.channels, str) and self.channels != "all":
            raise ValueError(f"channels must be 'all' or a channel index, got {self.channels!r}")


@dataclass
class OcclusionMap:
    values: np.ndarray          # (X, Y, Z) sensitivity at input resolution
    coarse: np.ndarray          # raw per-cell probability drops
    baseline_prob: float
    target_class: int
    config: OcclusionConfig

    def as_volume(self, spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)) -> Volume:
        return Volume(self.values, spacing_mm, origin_mm)


def grid_starts(dim: int, cube: int, stride: int) -> np.ndarray:
    if cube > dim:
        raise ValueError(f"occlusion cube ({cube}) larger than volume axis ({dim})")
    n_cells = (dim - cube) // stride + 1
    return np.arange(n_cells) * stride


def _upsample_cells(coarse: np.ndarray, starts: list[np.ndarray], cube: int,
                    shape: tuple[int, int, int]) -> np.ndarray:
    """Trilinear interpolation from cube-center coordinates to the voxel grid.

    Voxels outside the outermost cube centers clamp to the edge cells, so the
    map assigns a value to every voxel.
    """
    out = coarse.astype(np.float32)
    half = (cube - 1) / 2.0
    for a in range(3):
        centers = starts[a].astype(np.float64) + half
        u = (np.arange(shape[a], dtype=np.float64) - centers[0]) / max(
            float(centers[1] - centers[0]) if centers.size > 1 else 1.0, 1e-12)
        u = np.clip(u, 0.0, centers.size - 1)
        lo = np.minimum(np.floor(u).astype(np.intp), centers.size - 1)
        hi = np.minimum(lo + 1, centers.size - 1)
        w = (u - lo).astype(np.float32).reshape([-1 if ax == a else 1 for ax in range(3)])
        out = np.take(out, lo, axis=a) * (1.0 - w) + np.take(out, hi, axis=a) * w
    return out


def occlusion_map(params: dict, net_cfg: net3d.ResNet3DConfig, sample: np.ndarray,
                  cfg: OcclusionConfig, batch_size: int = 16) -> OcclusionMap:
    """Probability-drop map for one (C, X, Y, Z) sample under a trained model."""
    cfg.validate()
    if sample.ndim != 4 or sample.shape[0] != net_cfg.in_channels:
        raise ValueError(f"sample shape {sample.shape} does not match model "
                         f"in_channels={net_cfg.in_channels}")
    shape = sample.shape[1:]
    cube, stride = cfg.cube_size_vox, cfg.stride_vox
    starts = [grid_starts(d, cube, stride) for d in shape]

    base_logits = net3d.forward(params, sample[None].astype(np.float32), net_cfg, mode="eval")
    base_probs = net3d.predict_prob(base_logits)[0]
    target = int(np.argmax(base_probs)) if cfg.target == "predicted" else int(cfg.target)
    p0 = float(base_probs[target])

    cells = [(ix, iy, iz) for ix in starts[0] for iy in starts[1] for iz in starts[2]]
    fill = np.float32(cfg.fill_value)
    drops = np.empty(len(cells), dtype=np.float64)
    for begin in range(0, len(cells), batch_size):
        chunk = cells[begin:begin + batch_size]
        batch = np.repeat(sample[None].astype(np.float32), len(chunk), axis=0)
        for j, (ix, iy, iz) in enumerate(chunk):
            if cfg.channels == "all":
                batch[j, :, ix:ix + cube, iy:iy + cube, iz:iz + cube] = fill
            else:
                batch[j, int(cfg.channels), ix:ix + cube, iy:iy + cube, iz:iz + cube] = fill
        probs = net3d.predict_prob(net3d.forward(params, batch, net_cfg, mode="eval"))
        drops[begin:begin + len(chunk)] = p0 - probs[:, target]

    coarse = drops.reshape(len(starts[0]), len(starts[1]), len(starts[2]))
    values = _upsample_cells(coarse, starts, cube, shape)
    return OcclusionMap(values=values, coarse=coarse, baseline_prob=p0,
                        target_class=target, config=cfg)


def save_occlusion_map(omap: OcclusionMap, path: str | os.PathLike,
                       spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0),
                       model_id: str = "", subject_id: str = "") -> None:
    """Volume pair plus a JSON sidecar with the run metadata."""
    base = str(path)
    if base.endswith(".json"):
        base = base[:-5]
    write_volume(omap.as_volume(spacing_mm, origin_mm), base)
    sidecar = {
        "kind": "occlusion_map",
        "baseline_prob": omap.baseline_prob,
        "target_class": omap.target_class,
        "cube_size_vox": omap.config.cube_size_vox,
        "stride_vox": omap.config.stride_vox,
        "fill_value": omap.config.fill_value,
        "channels": omap.config.channels,
        "model_id": model_id,
        "subject_id": subject_id,
    }
    with open(base + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def overlay_export(omap_values: np.ndarray, underlay: Volume, axial_index: int,
                   path: str | os.PathLike, alpha: float = 0.5,
                   threshold_quantile: float = 0.0) -> str:
    """Write one axial slice as a raster image: grayscale underlay, |drop| overlay."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if omap_values.shape != underlay.shape:
        raise ValueError(f"map shape {omap_values.shape} != underlay shape {underlay.shape}")
    nz = underlay.shape[2]
    if not 0 <= axial_index < nz:
        raise ValueError(f"axial index {axial_index} out of range [0, {nz})")
    under = underlay.values[:, :, axial_index].T
    over = np.abs(omap_values[:, :, axial_index]).T
    if threshold_quantile > 0:
        cut = np.quantile(np.abs(omap_values), threshold_quantile)
        over = np.where(over >= cut, over, np.nan)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(under, cmap="gray", origin="lower", interpolation="nearest")
    vmax = float(np.nanmax(over)) if np.isfinite(over).any() else 0.0
    if vmax > 0:
        ax.imshow(over, cmap="hot", origin="lower", interpolation="nearest",
                  alpha=alpha, vmin=0.0, vmax=vmax)
    ax.set_axis_off()
    fig.tight_layout(pad=0)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)
