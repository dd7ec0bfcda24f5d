"""Pure-numpy versions of the compiled row kernels.

Same signatures and array contracts as ``_kernels.pyx``; used when the
extension is not built or when ``TRAJMOE_BACKEND=python`` is set.
"""
import numpy as np
from scipy.special import erfc

_SQRT1_2 = 0.70710678118654752440
_INV_SQRT_2PI = 0.39894228040143267794


def gelu_fwd(x):
    """Returns ``(gelu(x), Phi(x))``; the CDF is reused by the backward pass."""
    # erfc keeps full relative precision in the negative tail
    cdf = 0.5 * erfc(-x * _SQRT1_2)
    return x * cdf, cdf


def gelu_bwd(x, cdf, gy):
    return gy * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


def layer_norm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain[:, None, :] + bias[:, None, :]
    return out, xhat, rstd[..., 0]


def layer_norm_bwd(gy, xhat, rstd, gain):
    dxh = gy * gain[:, None, :]
    s1 = dxh.mean(axis=-1, keepdims=True)
    s2 = (dxh * xhat).mean(axis=-1, keepdims=True)
    gx = rstd[..., None] * (dxh - s1 - xhat * s2)
    return gx, (gy * xhat).sum(axis=1), gy.sum(axis=1)


def softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    dead = m == -np.inf
    e = np.exp(x - np.where(dead, 0.0, m))
    s = e.sum(axis=-1, keepdims=True)
    return np.where(dead, 0.0, e / np.where(dead, 1.0, s))


def softmax_bwd(y, gy):
    return y * (gy - (y * gy).sum(axis=-1, keepdims=True))


def topk_rows(scores, k):
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds the number of candidates {scores.shape[1]}")
    # stable sort on negated scores keeps ascending ids within ties
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k].astype(np.int64))
