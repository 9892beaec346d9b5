"""Batched float64 building blocks with explicit backward passes.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns input and parameter
gradients. Tokens are laid out as ``(batch, tokens, dim)``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy, x, w, has_bias=True):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dw = flat_x.T @ flat_dy
    db = flat_dy.sum(axis=0) if has_bias else None
    return dy @ w.T, dw, db


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(x, wq, wk, wv, wo, n_heads, bq=None, bk=None, bv=None, bo=None):
    """Multi-head scaled dot-product self-attention over the token axis."""
    # a key bias only shifts each score row by a constant; it is accepted for symmetry
    b, t, d = x.shape
    dh = d // n_heads

    def split(m):
        return m.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    q = split(linear_forward(x, wq, bq)[0])
    k = split(linear_forward(x, wk, bk)[0])
    v = split(linear_forward(x, wv, bv)[0])
    scale = 1.0 / math.sqrt(dh)
    attn = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    heads = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = linear_forward(heads, wo, bo)[0]
    cache = (x, q, k, v, attn, heads, scale, n_heads)
    return out, cache


def attention_backward(dout, cache, wq, wk, wv, wo):
    x, q, k, v, attn, heads, scale, n_heads = cache
    b, t, d = x.shape
    dh = d // n_heads
    dheads, dwo, dbo = linear_backward(dout, heads, wo)
    dheads = dheads.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)
    dattn = dheads @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dheads
    # softmax Jacobian, row-wise
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(m):
        return m.transpose(0, 2, 1, 3).reshape(b, t, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    dx_q, dwq, dbq = linear_backward(dq, x, wq)
    dx_k, dwk, _ = linear_backward(dk, x, wk)
    dx_v, dwv, dbv = linear_backward(dv, x, wv)
    grads = {"W_q": dwq, "W_k": dwk, "W_v": dwv, "W_o": dwo,
             "b_q": dbq, "b_v": dbv, "b_o": dbo}
    return dx_q + dx_k + dx_v, grads


def layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
