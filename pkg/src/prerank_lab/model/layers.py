"""Differentiable building blocks with hand-written backward passes.

Every forward returns (output, cache); the matching backward consumes
the upstream gradient and the cache and returns gradients for inputs
and parameters.  All math is float64 numpy.  The backward passes are
checked against central finite differences in the test suite, so any
edit here must keep the analytic and numeric derivatives in agreement.
"""

from __future__ import annotations

import numpy as np

from ..errors import NormalizationError


# ----------------------------------------------------------------------
# affine


def fc_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """y = x @ W + b for x of shape (..., in)."""
    y = x @ W + b
    return y, (x, W)


def fc_backward(dy: np.ndarray, cache):
    x, W = cache
    dx = dy @ W.T
    lead = x.reshape(-1, x.shape[-1])
    dW = lead.T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dW, db


# ----------------------------------------------------------------------
# layer normalization over the last axis


def layernorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma)


def layernorm_backward(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, n).sum(axis=0)
    dbeta = dy.reshape(-1, n).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


# ----------------------------------------------------------------------
# leaky ReLU


def lrelu_forward(x: np.ndarray, slope: float):
    y = np.where(x >= 0, x, slope * x)
    return y, (x >= 0, slope)


def lrelu_backward(dy: np.ndarray, cache):
    nonneg, slope = cache
    return dy * np.where(nonneg, 1.0, slope)


# ----------------------------------------------------------------------
# row-wise l2 normalization


def l2norm_forward(x: np.ndarray):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise NormalizationError("cannot l2-normalize a zero vector")
    y = x / norm
    return y, (y, norm)


def l2norm_backward(dy: np.ndarray, cache):
    y, norm = cache
    return (dy - (dy * y).sum(axis=-1, keepdims=True) * y) / norm


# ----------------------------------------------------------------------
# softmax


def softmax(s: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dA: np.ndarray, A: np.ndarray) -> np.ndarray:
    """ds for A = softmax(s), applied along the last axis."""
    return A * (dA - (dA * A).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------
# attention pooling: one projected query vector over a set of rows


def attn_pool_forward(proj: np.ndarray, E: np.ndarray, scale: float):
    """pooled = softmax(proj @ E.T * scale) @ E, for proj (d,) and E (n, d)."""
    s = (E @ proj) * scale
    A = softmax(s)
    pooled = A @ E
    return pooled, (proj, E, A, scale)


def attn_pool_backward(dpooled: np.ndarray, cache):
    proj, E, A, scale = cache
    dA = E @ dpooled
    ds = softmax_backward(dA, A)
    dproj = scale * (ds @ E)
    dE = np.outer(A, dpooled) + scale * np.outer(ds, proj)
    return dproj, dE


# ----------------------------------------------------------------------
# self-attention over token rows followed by elementwise max pooling


def self_attn_max_forward(E: np.ndarray, scale: float):
    """H = softmax(E E^T * scale) E; pooled = columnwise max of H.

    Ties in the max go to the earliest row, matching np.argmax.
    """
    S = (E @ E.T) * scale
    A = softmax(S)
    H = A @ E
    arg = H.argmax(axis=0)
    pooled = H[arg, np.arange(E.shape[1])]
    return pooled, (E, A, arg, scale)


def self_attn_max_backward(dpooled: np.ndarray, cache):
    E, A, arg, scale = cache
    n, d = E.shape
    dH = np.zeros((n, d))
    dH[arg, np.arange(d)] = dpooled
    dA = dH @ E.T
    dE = A.T @ dH
    dS = softmax_backward(dA, A)
    dE += scale * (dS @ E + dS.T @ E)
    return dE


# ----------------------------------------------------------------------
# embedding rows


def embed_rows(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[np.asarray(ids, dtype=np.intp)]


def embed_scatter(dtable: np.ndarray, ids: np.ndarray, drows: np.ndarray) -> None:
    np.add.at(dtable, np.asarray(ids, dtype=np.intp), drows)
