"""Channel-fused 3D residual classifier (18-layer basic-block layout).

Architecture, in order: stem convolution (stride 2, padding k//2) -> batch
norm -> ReLU -> 3^3/stride-2 max pool -> four stages of two basic blocks at
widths (w, 2w, 4w, 8w), the first block of stages 2-4 downsampling by stride
2 with a 1^3 projection shortcut -> global average pooling -> affine layer
to two logits. A basic block is conv3-bn-relu-conv3-bn plus the (identity or
projected) shortcut, then ReLU.

Parameters live in a flat name->array mapping whose keys and shapes are a
pure function of the config; ``param_shapes``/``audit_params`` expose the
structural contract. ``backward`` returns exact reverse-mode gradients of
the forward definition for all trainable parameters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import layers3d as L
from .errors import TrainingDivergedError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ResNet3DConfig:
    in_channels: int = 3
    num_classes: int = 2
    base_width: int = 8
    blocks_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2)
    stem_kernel: int = 7
    input_shape: tuple[int, int, int] = (64, 64, 64)

    def validate(self) -> None:
        if self.in_channels not in (1, 2, 3):
            raise ValueError(f"in_channels must be 1..3, got {self.in_channels}")
        if self.num_classes != 2:
            raise ValueError("this classifier is binary (num_classes == 2)")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if tuple(self.blocks_per_stage) != (2, 2, 2, 2):
            raise ValueError("the 18-layer layout requires blocks_per_stage == (2, 2, 2, 2)")
        if self.stem_kernel not in (3, 5, 7):
            raise ValueError(f"stem_kernel must be odd in 3..7, got {self.stem_kernel}")
        if len(self.input_shape) != 3 or any(int(d) < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be 3 positive ints, got {self.input_shape}")

    def stage_widths(self) -> tuple[int, int, int, int]:
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w)


def _block_defs(cfg: ResNet3DConfig):
    """Static topology: (prefix, c_in, c_out, stride, has_projection) per block."""
    defs = []
    c_in = cfg.base_width
    for s, width in enumerate(cfg.stage_widths()):
        for b in range(cfg.blocks_per_stage[s]):
            stride = 2 if (s > 0 and b == 0) else 1
            proj = stride != 1 or c_in != width
            defs.append((f"layer{s + 1}.block{b}", c_in, width, stride, proj))
            c_in = width
    return defs


def param_shapes(cfg: ResNet3DConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every tensor in a parameter set, in creation order.

    Conv weights are (k, k, k, c_in, c_out); the head is (features, classes)
    plus a bias. Norm layers carry scale/offset and running mean/variance.
    """
    cfg.validate()
    shapes: dict[str, tuple[int, ...]] = {}

    def add_bn(prefix: str, c: int):
        shapes[f"{prefix}.gamma"] = (c,)
        shapes[f"{prefix}.beta"] = (c,)
        shapes[f"{prefix}.running_mean"] = (c,)
        shapes[f"{prefix}.running_var"] = (c,)

    k = cfg.stem_kernel
    w = cfg.base_width
    shapes["stem.conv.w"] = (k, k, k, cfg.in_channels, w)
    add_bn("stem.bn", w)
    for prefix, c_in, c_out, stride, proj in _block_defs(cfg):
        shapes[f"{prefix}.conv1.w"] = (3, 3, 3, c_in, c_out)
        add_bn(f"{prefix}.bn1", c_out)
        shapes[f"{prefix}.conv2.w"] = (3, 3, 3, c_out, c_out)
        add_bn(f"{prefix}.bn2", c_out)
        if proj:
            shapes[f"{prefix}.down.conv.w"] = (1, 1, 1, c_in, c_out)
            add_bn(f"{prefix}.down.bn", c_out)
    shapes["head.w"] = (cfg.stage_widths()[-1], cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def is_trainable(name: str) -> bool:
    return not (name.endswith(".running_mean") or name.endswith(".running_var"))


def init_model(cfg: ResNet3DConfig, rng: np.random.Generator | int,
               dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in-scaled Gaussian conv/head weights; norm layers at identity."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("conv.w") or name.endswith("conv1.w") or name.endswith("conv2.w"):
            fan_in = shape[0] * shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name == "head.w":
            # small head init: a fresh model predicts near-uniform probabilities
            arr = rng.normal(0.0, 0.01 * np.sqrt(1.0 / shape[0]), size=shape)
        elif name.endswith(".gamma") or name.endswith(".running_var"):
            arr = np.ones(shape)
        else:  # beta, running_mean, head.b
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def audit_params(params: dict[str, np.ndarray], cfg: ResNet3DConfig) -> None:
    """Structural check: exact name set, exact shapes, finite values."""
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={missing}, extra={extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.isfinite(params[name]).all():
            raise ValueError(f"{name}: contains non-finite values")


def _bn_fwd(params, prefix, x, train, update_stats):
    return L.batchnorm_forward(
        x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"],
        params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"],
        train=train, momentum=BN_MOMENTUM, eps=BN_EPS, update_stats=update_stats)


def _forward_impl(params, x_cl, cfg, train, update_stats, keep_cache):
    """Channels-last forward. Returns (logits, caches or None)."""
    caches = {} if keep_cache else None

    h, c_conv = L.conv3d_forward(x_cl, params["stem.conv.w"], stride=2)
    h, c_bn = _bn_fwd(params, "stem.bn", h, train, update_stats)
    h, c_relu = L.relu_forward(h, inplace=True)  # norm output is not cached itself
    h, c_pool = L.maxpool3d_forward(h)
    if keep_cache:
        caches["stem"] = (c_conv, c_bn, c_relu, c_pool)

    for prefix, c_in, c_out, stride, proj in _block_defs(cfg):
        identity = h
        b1, cb1 = L.conv3d_forward(h, params[f"{prefix}.conv1.w"], stride=stride)
        b2, cb2 = _bn_fwd(params, f"{prefix}.bn1", b1, train, update_stats)
        b3, cb3 = L.relu_forward(b2, inplace=True)
        b4, cb4 = L.conv3d_forward(b3, params[f"{prefix}.conv2.w"], stride=1)
        b5, cb5 = _bn_fwd(params, f"{prefix}.bn2", b4, train, update_stats)
        if proj:
            s1, cs1 = L.conv3d_forward(identity, params[f"{prefix}.down.conv.w"], stride=stride)
            shortcut, cs2 = _bn_fwd(params, f"{prefix}.down.bn", s1, train, update_stats)
        else:
            shortcut, cs1, cs2 = identity, None, None
        b5 += shortcut
        h, cb6 = L.relu_forward(b5, inplace=True)
        if keep_cache:
            caches[prefix] = (cb1, cb2, cb3, cb4, cb5, cs1, cs2, cb6, proj)

    feat, c_gap = L.global_avg_pool_forward(h)
    logits, c_lin = L.linear_forward(feat, params["head.w"], params["head.b"])
    if keep_cache:
        caches["head"] = (c_gap, c_lin)
    return logits, caches


def forward(params: dict[str, np.ndarray], batch: np.ndarray, cfg: ResNet3DConfig,
            mode: str = "eval", update_stats: Optional[bool] = None) -> np.ndarray:
    """Run the classifier on a (N, C, X, Y, Z) batch; returns (N, 2) logits.

    mode="train" normalizes with batch statistics and (by default) updates
    the running statistics stored in ``params``; mode="eval" is a pure
    function of its inputs.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.ndim != 5 or batch.shape[1] != cfg.in_channels:
        raise ValueError(f"batch shape {batch.shape} incompatible with in_channels={cfg.in_channels}")
    if tuple(batch.shape[2:]) != tuple(cfg.input_shape):
        raise ValueError(f"batch spatial dims {batch.shape[2:]} != configured {cfg.input_shape}")
    x_cl = np.ascontiguousarray(batch.transpose(0, 2, 3, 4, 1))
    train = mode == "train"
    logits, _ = _forward_impl(params, x_cl, cfg, train=train,
                              update_stats=train if update_stats is None else update_stats,
                              keep_cache=False)
    return logits


def predict_prob(logits: np.ndarray) -> np.ndarray:
    """Softmax class probabilities, numerically stabilized; rows sum to 1."""
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    return L.softmax(logits)


def loss_eval(params, batch, labels, cfg: ResNet3DConfig) -> float:
    """Training-objective value with batch statistics, no side effects.

    This is the scalar function that ``backward`` differentiates; kept pure
    so finite-difference probes cannot drift the running statistics.
    """
    x_cl = np.ascontiguousarray(batch.transpose(0, 2, 3, 4, 1))
    logits, _ = _forward_impl(params, x_cl, cfg, train=True, update_stats=False, keep_cache=False)
    loss, _ = L.cross_entropy(logits, np.asarray(labels))
    return loss


def backward(params: dict[str, np.ndarray], batch: np.ndarray, labels: np.ndarray,
             cfg: ResNet3DConfig, update_stats: bool = True):
    """Mean cross-entropy loss and its exact gradients for trainable tensors.

    Runs the train-mode forward (batch statistics; running statistics updated
    in place unless disabled) and reverse-mode differentiation. Returns
    (loss, grads) with grads keyed like the trainable subset of ``params``.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or batch.shape[0] != labels.shape[0]:
        raise ValueError("labels must be one integer per batch sample")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    x_cl = np.ascontiguousarray(batch.transpose(0, 2, 3, 4, 1))
    logits, caches = _forward_impl(params, x_cl, cfg, train=True,
                                   update_stats=update_stats, keep_cache=True)
    loss, dlogits = L.cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite training loss: {loss}")

    grads: dict[str, np.ndarray] = {}
    c_gap, c_lin = caches["head"]
    gfeat, grads["head.w"], grads["head.b"] = L.linear_backward(dlogits, params["head.w"], c_lin)
    g = L.global_avg_pool_backward(gfeat, c_gap)

    for prefix, c_in, c_out, stride, proj in reversed(_block_defs(cfg)):
        cb1, cb2, cb3, cb4, cb5, cs1, cs2, cb6, _ = caches[prefix]
        g = L.relu_backward(g, cb6, inplace=True)  # g is freshly owned here
        g_main, g_short = g, g
        g_main, grads[f"{prefix}.bn2.gamma"], grads[f"{prefix}.bn2.beta"] = L.batchnorm_backward(g_main, cb5)
        g_main, grads[f"{prefix}.conv2.w"] = L.conv3d_backward(g_main, params[f"{prefix}.conv2.w"], cb4)
        g_main = L.relu_backward(g_main, cb3, inplace=True)
        g_main, grads[f"{prefix}.bn1.gamma"], grads[f"{prefix}.bn1.beta"] = L.batchnorm_backward(g_main, cb2)
        g_main, grads[f"{prefix}.conv1.w"] = L.conv3d_backward(g_main, params[f"{prefix}.conv1.w"], cb1)
        if proj:
            g_short, grads[f"{prefix}.down.bn.gamma"], grads[f"{prefix}.down.bn.beta"] = \
                L.batchnorm_backward(g_short, cs2)
            g_short, grads[f"{prefix}.down.conv.w"] = \
                L.conv3d_backward(g_short, params[f"{prefix}.down.conv.w"], cs1)
        g_main += g_short
        g = g_main

    c_conv, c_bn, c_relu, c_pool = caches["stem"]
    g = L.maxpool3d_backward(g, c_pool)
    g = L.relu_backward(g, c_relu, inplace=True)
    g, grads["stem.bn.gamma"], grads["stem.bn.beta"] = L.batchnorm_backward(g, c_bn)
    _, grads["stem.conv.w"] = L.conv3d_backward(g, params["stem.conv.w"], c_conv, need_gx=False)
    return loss, grads


def save_checkpoint(path: str | os.PathLike, cfg: ResNet3DConfig,
                    params: dict[str, np.ndarray], extra: Optional[dict] = None) -> None:
    """Checkpoint = JSON manifest (config + tensor index) + raw f32le payload.

    ``extra`` holds small provenance values (e.g. which channel combination
    the model consumes); it travels in the JSON manifest.
    """
    base = str(path)
    if base.endswith(".json"):
        base = base[:-5]
    index = []
    offset = 0
    blobs = []
    for name in param_shapes(cfg):
        arr = params[name].astype("<f4", copy=False)
        blob = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    doc = {"config": asdict(cfg), "dtype": "f32le", "tensors": index,
           "extra": dict(extra or {})}
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(base + ".raw", "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint_extra(path: str | os.PathLike) -> dict:
    base = str(path)
    if base.endswith(".json"):
        base = base[:-5]
    with open(base + ".json", "r", encoding="utf-8") as fh:
        return dict(json.load(fh).get("extra", {}))


def load_checkpoint(path: str | os.PathLike):
    """Returns (cfg, params) from a checkpoint pair."""
    base = str(path)
    if base.endswith(".json"):
        base = base[:-5]
    with open(base + ".json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg_doc = dict(doc["config"])
    cfg_doc["blocks_per_stage"] = tuple(cfg_doc["blocks_per_stage"])
    cfg_doc["input_shape"] = tuple(cfg_doc["input_shape"])
    cfg = ResNet3DConfig(**cfg_doc)
    with open(base + ".raw", "rb") as fh:
        raw = fh.read()
    params = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
        params[entry["name"]] = arr.astype(np.float32)
    audit_params(params, cfg)
    return cfg, params
