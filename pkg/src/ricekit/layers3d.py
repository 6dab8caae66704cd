"""Low-level 3D network layers: explicit forward and reverse-mode backward kernels.

Activations use channels-last layout (N, X, Y, Z, C) internally so that the
per-kernel-offset matrix products run on contiguous slices. Convolutions are
evaluated as a sum over kernel offsets of (spatial slice) @ (Ci x Co) weight
matrices; stride-2 convolutions first decimate the padded input into its
eight parity sub-volumes so every offset becomes a stride-1 slice.

All kernels are dtype-polymorphic: float32 for training, float64 for
finite-difference verification.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "conv3d_forward", "conv3d_backward",
    "batchnorm_forward", "batchnorm_backward",
    "relu_forward", "relu_backward",
    "maxpool3d_forward", "maxpool3d_backward",
    "global_avg_pool_forward", "global_avg_pool_backward",
    "linear_forward", "linear_backward",
    "softmax", "cross_entropy",
]


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, xx, yy, zz, c = x.shape
    # zero only the six border slabs; the interior is overwritten anyway
    xp = np.empty((n, xx + 2 * p, yy + 2 * p, zz + 2 * p, c), dtype=x.dtype)
    xp[:, :p] = 0
    xp[:, p + xx:] = 0
    xp[:, p:p + xx, :p] = 0
    xp[:, p:p + xx, p + yy:] = 0
    xp[:, p:p + xx, p:p + yy, :p] = 0
    xp[:, p:p + xx, p:p + yy, p + zz:] = 0
    xp[:, p:p + xx, p:p + yy, p:p + zz, :] = x
    return xp


def _parity_split(xp: np.ndarray) -> dict:
    """Eight contiguous sub-volumes xp[:, a::2, b::2, c::2, :]."""
    return {(a, b, c): np.ascontiguousarray(xp[:, a::2, b::2, c::2, :])
            for a in range(2) for b in range(2) for c in range(2)}


def _out_size(n: int, k: int, stride: int, p: int) -> int:
    return (n + 2 * p - k) // stride + 1


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1):
    """3D convolution, no bias, padding k//2.

    x: (N, X, Y, Z, Ci), w: (k, k, k, Ci, Co). Returns (y, cache).
    """
    k = w.shape[0]
    p = k // 2
    n, xx, yy, zz, ci = x.shape
    co = w.shape[4]
    ox, oy, oz = (_out_size(d, k, stride, p) for d in (xx, yy, zz))
    wk = w.reshape(k * k * k, ci, co)
    out = np.zeros((n, ox, oy, oz, co), dtype=x.dtype)
    tmp = np.empty_like(out)  # reused per offset to avoid repeated large allocations
    if stride == 1:
        xp = _pad_spatial(x, p)
        i = 0
        for kx in range(k):
            for ky in range(k):
                for kz in range(k):
                    np.matmul(xp[:, kx:kx + ox, ky:ky + oy, kz:kz + oz, :], wk[i], out=tmp)
                    out += tmp
                    i += 1
        cache = (x.shape, xp, None, stride, k, None)
    elif stride == 2:
        xp = _pad_spatial(x, p)
        par = _parity_split(xp)
        if ci == 1:
            # single-channel fast path: one (M, k^3) @ (k^3, co) product
            m = n * ox * oy * oz
            cols = np.empty((k * k * k, m), dtype=x.dtype)
            i = 0
            for kx in range(k):
                for ky in range(k):
                    for kz in range(k):
                        pv = par[(kx % 2, ky % 2, kz % 2)]
                        sx, sy, sz = kx // 2, ky // 2, kz // 2
                        cols[i] = pv[:, sx:sx + ox, sy:sy + oy, sz:sz + oz, 0].reshape(m)
                        i += 1
            out = (cols.T @ wk[:, 0, :]).reshape(n, ox, oy, oz, co)
            par_shapes = {key: pv.shape for key, pv in par.items()}
            cache = (x.shape, xp.shape, par_shapes, stride, k, cols)
            return out, cache
        i = 0
        for kx in range(k):
            for ky in range(k):
                for kz in range(k):
                    pv = par[(kx % 2, ky % 2, kz % 2)]
                    sx, sy, sz = kx // 2, ky // 2, kz // 2
                    np.matmul(pv[:, sx:sx + ox, sy:sy + oy, sz:sz + oz, :], wk[i], out=tmp)
                    out += tmp
                    i += 1
        cache = (x.shape, xp.shape, par, stride, k, None)
    else:
        raise ValueError(f"unsupported stride {stride}")
    return out, cache


def conv3d_backward(gy: np.ndarray, w: np.ndarray, cache, need_gx: bool = True):
    """Gradients of conv3d_forward. Returns (gx or None, gw)."""
    x_shape, xp_or_shape, par, stride, k, cols = cache
    p = k // 2
    ci, co = w.shape[3], w.shape[4]
    n, ox, oy, oz, _ = gy.shape
    wk = w.reshape(k * k * k, ci, co)
    gw = np.zeros_like(w).reshape(k * k * k, ci, co)
    gyf = np.ascontiguousarray(gy).reshape(-1, co)

    if cols is not None:  # single-channel stride-2 fast path
        gw[:, 0, :] = cols @ gyf
        gx = None
        if need_gx:
            dcols = wk[:, 0, :] @ gyf.T  # (k^3, M)
            gpar = {key: np.zeros(shape, dtype=gy.dtype) for key, shape in par.items()}
            i = 0
            for kx in range(k):
                for ky in range(k):
                    for kz in range(k):
                        key = (kx % 2, ky % 2, kz % 2)
                        sx, sy, sz = kx // 2, ky // 2, kz // 2
                        gpar[key][:, sx:sx + ox, sy:sy + oy, sz:sz + oz, 0] += \
                            dcols[i].reshape(n, ox, oy, oz)
                        i += 1
            gxp = np.zeros(xp_or_shape, dtype=gy.dtype)
            for (a, b, c), g in gpar.items():
                gxp[:, a::2, b::2, c::2, :] = g
            xx, yy, zz = x_shape[1:4]
            gx = gxp[:, p:p + xx, p:p + yy, p:p + zz, :] if p else gxp
        return gx, gw.reshape(w.shape)

    # reused buffers: per-offset input slice (as a flat GEMM operand) and gx temp
    xs_flat = np.empty((gyf.shape[0], ci), dtype=gy.dtype)
    xs_view = xs_flat.reshape(n, ox, oy, oz, ci)
    gx_buf = np.empty((n, ox, oy, oz, ci), dtype=gy.dtype) if need_gx else None
    if stride == 1:
        xp = xp_or_shape
        gxp = np.zeros(xp.shape, dtype=gy.dtype) if need_gx else None
        i = 0
        for kx in range(k):
            for ky in range(k):
                for kz in range(k):
                    sl = (slice(None), slice(kx, kx + ox), slice(ky, ky + oy),
                          slice(kz, kz + oz), slice(None))
                    np.copyto(xs_view, xp[sl])
                    gw[i] = xs_flat.T @ gyf
                    if need_gx:
                        np.matmul(gy, wk[i].T, out=gx_buf)
                        gxp[sl] += gx_buf
                    i += 1
        gx = None
        if need_gx:
            xx, yy, zz = x_shape[1:4]
            gx = gxp[:, p:p + xx, p:p + yy, p:p + zz, :] if p else gxp
    else:
        xp_shape = xp_or_shape
        gpar = {key: np.zeros(pv.shape, dtype=gy.dtype) for key, pv in par.items()} if need_gx else None
        i = 0
        for kx in range(k):
            for ky in range(k):
                for kz in range(k):
                    key = (kx % 2, ky % 2, kz % 2)
                    sx, sy, sz = kx // 2, ky // 2, kz // 2
                    sl = (slice(None), slice(sx, sx + ox), slice(sy, sy + oy),
                          slice(sz, sz + oz), slice(None))
                    np.copyto(xs_view, par[key][sl])
                    gw[i] = xs_flat.T @ gyf
                    if need_gx:
                        np.matmul(gy, wk[i].T, out=gx_buf)
                        gpar[key][sl] += gx_buf
                    i += 1
        gx = None
        if need_gx:
            gxp = np.zeros(xp_shape, dtype=gy.dtype)
            for (a, b, c), g in gpar.items():
                gxp[:, a::2, b::2, c::2, :] = g
            xx, yy, zz = x_shape[1:4]
            gx = gxp[:, p:p + xx, p:p + yy, p:p + zz, :] if p else gxp
    return gx, gw.reshape(w.shape)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True):
    """Per-channel batch normalization over (N, X, Y, Z).

    In train mode, statistics come from the batch (population form); running
    statistics are blended in place when update_stats is set. In eval mode
    the stored running statistics are used.
    """
    axes = (0, 1, 2, 3)
    c = x.shape[-1]
    if train:
        if x.dtype == np.float64:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            # single-pass moments; adequate for O(1)-scale activations
            m_count = x.size // c
            x2 = x.reshape(-1, c)
            mean = x2.mean(axis=0)
            sq = np.einsum("mc,mc->c", x2, x2, optimize=False) / m_count
            var = np.maximum(sq - mean * mean, 0.0)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = (gamma * inv_std).astype(x.dtype)
    shift = (beta - mean * gamma * inv_std).astype(x.dtype)
    y = x * scale
    y += shift
    cache = (x, mean.astype(x.dtype), inv_std.astype(x.dtype), gamma, train)
    return y, cache


def batchnorm_backward(gy, cache):
    """Returns (gx, ggamma, gbeta)."""
    x, mean, inv_std, gamma, train = cache
    c = x.shape[-1]
    xhat = x - mean
    xhat *= inv_std
    gyf = gy.reshape(-1, c)
    gbeta = gyf.sum(axis=0)
    ggamma = np.einsum("mc,mc->c", gyf, xhat.reshape(-1, c), optimize=False)
    scale = (gamma * inv_std).astype(gy.dtype)
    if not train:
        return gy * scale, ggamma, gbeta
    # population-variance form: correction terms are means over all batch positions
    m_count = gy.size // c
    gx = gy - (gbeta / m_count).astype(gy.dtype)
    gx -= xhat * (ggamma / m_count).astype(gy.dtype)
    gx *= scale
    return gx, ggamma, gbeta


def relu_forward(x, inplace: bool = False):
    """When ``inplace`` the caller guarantees x is not cached elsewhere."""
    y = np.maximum(x, 0, out=x) if inplace else np.maximum(x, 0)
    return y, y


def relu_backward(gy, cache, inplace: bool = False):
    y = cache
    if inplace:
        gy *= y > 0
        return gy
    return gy * (y > 0)


def _axis_max3_s2(x: np.ndarray, axis: int):
    """Max over 3-wide windows at stride 2 along one padded axis."""
    n = x.shape[axis]
    q = (n - 3) // 2 + 1

    def sl(d):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(d, d + 2 * (q - 1) + 1, 2)
        return x[tuple(idx)]

    m = sl(0).copy()
    arg = np.zeros(m.shape, dtype=np.int8)
    for d in (1, 2):
        s = sl(d)
        upd = s > m
        np.copyto(m, s, where=upd)
        arg[upd] = d
    return m, arg


def maxpool3d_forward(x: np.ndarray):
    """3x3x3 max pooling, stride 2, padding 1, evaluated separably per axis."""
    n, xx, yy, zz, c = x.shape
    neg = np.array(-np.inf, dtype=x.dtype)
    xp = np.full((n, xx + 2, yy + 2, zz + 2, c), neg, dtype=x.dtype)
    xp[:, 1:1 + xx, 1:1 + yy, 1:1 + zz, :] = x
    m1, a1 = _axis_max3_s2(xp, 1)
    m2, a2 = _axis_max3_s2(m1, 2)
    m3, a3 = _axis_max3_s2(m2, 3)
    cache = (x.shape, m1.shape, m2.shape, a1, a2, a3)
    return m3, cache


def _axis_max3_s2_backward(gy: np.ndarray, arg: np.ndarray, in_shape, axis: int):
    g = np.zeros(in_shape, dtype=gy.dtype)
    q = gy.shape[axis]
    for d in (0, 1, 2):
        idx = [slice(None)] * gy.ndim
        idx[axis] = slice(d, d + 2 * (q - 1) + 1, 2)
        g[tuple(idx)] += np.where(arg == d, gy, 0)
    return g


def maxpool3d_backward(gy: np.ndarray, cache):
    x_shape, m1_shape, m2_shape, a1, a2, a3 = cache
    n, xx, yy, zz, c = x_shape
    g2 = _axis_max3_s2_backward(gy, a3, m2_shape, 3)
    g1 = _axis_max3_s2_backward(g2, a2, m1_shape, 2)
    gp = _axis_max3_s2_backward(g1, a1, (n, xx + 2, yy + 2, zz + 2, c), 1)
    return gp[:, 1:1 + xx, 1:1 + yy, 1:1 + zz, :]


def global_avg_pool_forward(x: np.ndarray):
    """Mean over all spatial positions -> (N, C)."""
    n, xx, yy, zz, c = x.shape
    return x.mean(axis=(1, 2, 3)), (x.shape,)


def global_avg_pool_backward(gy: np.ndarray, cache):
    (x_shape,) = cache
    n, xx, yy, zz, c = x_shape
    scale = np.asarray(1.0 / (xx * yy * zz), dtype=gy.dtype)
    return np.broadcast_to((gy * scale)[:, None, None, None, :], x_shape).copy()


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def linear_backward(gy: np.ndarray, w: np.ndarray, cache):
    x = cache
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch. Returns (loss, dlogits)."""
    n = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits
