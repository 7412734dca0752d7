"""Forward and backward passes for the sparse ResNet layers.

Every function works on feature matrices of a :class:`SparseTensor`; the
backward functions return gradients with respect to their inputs and
parameters and never mutate anything.  Convolutions have no bias because
each one is followed by batch norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import EmptyEvent, ShapeError
from .sparse import KernelMap, SparseTensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# --- sparse convolution -----------------------------------------------------

ROW_BLOCK = 32


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` whose rows do not depend on how many other rows ``a`` has.

    BLAS picks its kernel (and so its summation order) from the matrix
    shape, so the same row can round differently at different row counts.
    Rows are zero-padded to whole blocks of ``ROW_BLOCK`` and multiplied as a
    stack of identically shaped GEMMs, which makes an event's output
    bit-identical alone or inside any batch.
    """
    m = a.shape[0]
    nb = -(-m // ROW_BLOCK)
    if nb == 0:
        return np.zeros((0, b.shape[1]), np.result_type(a, b))
    padded = np.zeros((nb * ROW_BLOCK, a.shape[1]), a.dtype)
    padded[:m] = a
    return (padded.reshape(nb, ROW_BLOCK, -1) @ b).reshape(nb * ROW_BLOCK, -1)[:m]


def _check_conv(x: SparseTensor, weight: np.ndarray, kmap: KernelMap) -> None:
    if weight.ndim != 3 or weight.shape[0] != kmap.volume:
        raise ShapeError(f"weight {weight.shape} does not match a {kmap.volume}-offset kernel")
    if weight.shape[1] != x.channels:
        raise ShapeError(f"weight expects {weight.shape[1]} input channels, tensor has {x.channels}")
    if kmap.n_in != len(x) or kmap.in_stride != x.stride:
        raise ShapeError("kernel map was built for a different tensor")


def sparse_conv_fwd(x: SparseTensor, weight: np.ndarray, kmap: KernelMap) -> SparseTensor:
    """Gather, multiply per offset, scatter: ``out[q] = sum_o sum_(p,q) x[p] @ W[o]``."""
    _check_conv(x, weight, kmap)
    out = np.zeros((kmap.n_out, weight.shape[2]), dtype=np.result_type(x.feats, weight))
    for o in range(kmap.volume):
        src, dst = kmap.pairs(o)
        if len(src):
            # dst is unique within one offset, so fancy += is a true accumulation
            out[dst] += rowwise_matmul(x.feats[src], weight[o])
    return SparseTensor(kmap.out_coords, out, kmap.out_stride, x.batch_size)


def sparse_conv_bwd(x: SparseTensor, weight: np.ndarray, kmap: KernelMap, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_weight)``."""
    _check_conv(x, weight, kmap)
    if grad_out.shape != (kmap.n_out, weight.shape[2]):
        raise ShapeError(f"grad_out {grad_out.shape} != {(kmap.n_out, weight.shape[2])}")
    grad_x = np.zeros_like(x.feats, dtype=np.result_type(x.feats, grad_out))
    grad_w = np.zeros_like(weight)
    for o in range(kmap.volume):
        src, dst = kmap.pairs(o)
        if len(src):
            g = grad_out[dst]
            grad_w[o] = x.feats[src].T @ g
            grad_x[src] += rowwise_matmul(g, weight[o].T)
    return grad_x, grad_w


# --- batch norm ---------------------------------------------------------------

@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "BNParams":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype),
        )


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool
    new_running_mean: np.ndarray | None = None
    new_running_var: np.ndarray | None = None


def batchnorm_fwd(x: SparseTensor, params: BNParams, mode: str = "train"):
    """Normalize each channel over every active site of the batch.

    Train mode uses the biased batch variance and reports updated running
    statistics in the cache (they are not written back here); eval mode uses
    the running statistics.
    """
    f = x.feats
    if f.shape[1] != len(params.gamma):
        raise ShapeError(f"batch norm has {len(params.gamma)} channels, input has {f.shape[1]}")
    if mode == "train":
        mean = f.mean(axis=0)
        var = f.var(axis=0)
        n = len(f)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = params.momentum
        new_mean = ((1 - m) * params.running_mean + m * mean).astype(params.running_mean.dtype)
        new_var = ((1 - m) * params.running_var + m * unbiased).astype(params.running_var.dtype)
    elif mode == "eval":
        mean, var = params.running_mean, params.running_var
        new_mean = new_var = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + params.eps)).astype(f.dtype)
    xhat = (f - mean) * inv_std
    y = xhat * params.gamma + params.beta
    cache = BNCache(xhat, inv_std, params.gamma, mode == "train", new_mean, new_var)
    return x.replace(y.astype(f.dtype, copy=False)), cache


def batchnorm_bwd(cache: BNCache, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    grad_beta = grad_out.sum(axis=0)
    grad_gamma = (grad_out * cache.xhat).sum(axis=0)
    if cache.train:
        n = len(grad_out)
        grad_x = (cache.gamma * cache.inv_std / n) * (
            n * grad_out - grad_beta - cache.xhat * grad_gamma
        )
    else:
        grad_x = grad_out * (cache.gamma * cache.inv_std)
    return grad_x, grad_gamma, grad_beta


# --- pointwise -----------------------------------------------------------------

def relu_fwd(f: np.ndarray) -> np.ndarray:
    return np.maximum(f, 0)


def relu_bwd(f: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (f > 0)


def gelu_fwd(f: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return (0.5 * f * (1.0 + erf(f * _INV_SQRT2))).astype(f.dtype, copy=False)


def gelu_bwd(f: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(f * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * f * f)
    return (grad_out * (cdf + f * pdf)).astype(grad_out.dtype, copy=False)


def dropout_mask(shape, p: float, seed: int, layer_id: int, step: int, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier; a pure function of ``(seed, layer_id, step)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    rng = np.random.default_rng([seed, layer_id, step])
    keep = rng.random(shape) >= p
    return (keep * (1.0 / (1.0 - p))).astype(dtype)


def dropout_fwd(f: np.ndarray, p: float, seed: int, layer_id: int, step: int, mode: str = "train"):
    """Returns ``(output, mask)``; ``mask`` is None in eval mode."""
    if mode == "eval" or p == 0.0:
        return f, None
    mask = dropout_mask(f.shape, p, seed, layer_id, step, f.dtype)
    return f * mask, mask


def dropout_bwd(mask: np.ndarray | None, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


# --- pooling -----------------------------------------------------------------

def sparse_maxpool_fwd(x: SparseTensor, kmap: KernelMap):
    """Max over each pooling cell; returns ``(output tensor, argmax rows)``."""
    if kmap.n_in != len(x):
        raise ShapeError("pooling map was built for a different tensor")
    vals, arg = kernels.segment_max(x.feats, kmap.in_rows, kmap.out_rows, kmap.n_out)
    return SparseTensor(kmap.out_coords, vals, kmap.out_stride, x.batch_size), arg


def sparse_maxpool_bwd(arg: np.ndarray, grad_out: np.ndarray, n_in: int) -> np.ndarray:
    return kernels.scatter_arg(grad_out, arg, n_in)


def global_maxpool_fwd(x: SparseTensor):
    """Per-event channel max, ``(B, C)``; ties go to the lowest row."""
    b = x.coords[:, 0]
    if np.any(np.bincount(b, minlength=x.batch_size) == 0):
        raise EmptyEvent("global max pool received an event with no sites")
    rows = np.arange(len(x), dtype=np.int64)
    return kernels.segment_max(x.feats, rows, b, x.batch_size)


def global_maxpool_bwd(arg: np.ndarray, grad_out: np.ndarray, n_in: int) -> np.ndarray:
    return kernels.scatter_arg(grad_out, arg, n_in)


# --- dense head ----------------------------------------------------------------

def linear_fwd(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"linear shapes x{x.shape} W{weight.shape} b{bias.shape}")
    return rowwise_matmul(x, weight) + bias


def linear_bwd(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_weight, grad_bias)``."""
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ShapeError(f"grad_out {grad_out.shape} != {(x.shape[0], weight.shape[1])}")
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)
