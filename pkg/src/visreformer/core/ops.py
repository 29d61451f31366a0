"""Differentiable kernels used by the models, plus the bucket sort helper."""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateRowError, DimensionError
from .tensor import Tensor, _unbroadcast, as_tensor


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def softmax_rows(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; entries where ``mask == 0`` get weight exactly 0.

    Rows with no unmasked entry raise :class:`DegenerateRowError`.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask) > 0, z.shape)
        if not np.all(keep.any(axis=axis)):
            raise DegenerateRowError("softmax row has every entry masked")
        z = np.where(keep, z, -np.inf)
    y = z - z.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv_std * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(xhat * gd + bias.data, (x, gain, bias), back)


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x[B,C,H,W]`` with ``kernels[C',C,k,k]``."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernels")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = kernels.shape
    if Ci != C:
        raise DimensionError(f"kernel expects {Ci} input channels, input has {C}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be >=1 and padding >=0")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kd = kernels.data

    def window(i, j):
        return (slice(None), slice(None), slice(i, i + stride * (Ho - 1) + 1, stride),
                slice(j, j + stride * (Wo - 1) + 1, stride))

    out = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("bchw,oc->bohw", xp[window(i, j)], kd[:, :, i, j], optimize=True)
    parents = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
        parents = parents + (bias,)

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for i in range(kh):
            for j in range(kw):
                w = window(i, j)
                gxp[w] += np.einsum("bohw,oc->bchw", g, kd[:, :, i, j], optimize=True)
                gk[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[w], optimize=True)
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor._make(out, parents, back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B,K]`` against integer ``labels[B]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / len(labels),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean length."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x.data / safe

    def back(g):
        radial = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(norm > eps, (g - y * radial) / safe, g / safe),)

    return Tensor._make(y, (x,), back)


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Batched row gather: ``x[G,n,d]``, ``index[G,m,C]`` -> ``out[G,m,C,d]``.

    ``out[g,i,c] = x[g, index[g,i,c]]``; the backward scatter-adds.
    """
    x = as_tensor(x)
    G, n, d = x.shape
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != G:
        raise DimensionError(f"index leading extent {index.shape[0]} != {G}")
    flat = (index + (np.arange(G) * n).reshape((G,) + (1,) * (index.ndim - 1))).reshape(-1)
    src = x.data.reshape(G * n, d)
    out = src[flat].reshape(index.shape + (d,))

    def back(g):
        gx = np.zeros((G * n, d), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, d))
        return (gx.reshape(G, n, d),)

    return Tensor._make(out, (x,), back)


def stable_sort_with_permutation(keys):
    """Stable ascending sort.

    Returns ``(sorted_keys, perm, inverse)`` with ``sorted_keys == keys[perm]``
    and ``sorted_keys[inverse] == keys``.
    """
    keys = np.asarray(keys)
    perm = np.argsort(keys, kind="stable")
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    return keys[perm], perm, inverse
