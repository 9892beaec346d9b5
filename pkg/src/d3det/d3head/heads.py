"""Classifier heads over a stack of frozen embeddings.

A head consumes tokens of shape ``(batch, T, D)``: ``T = 2`` for the
dual-branch detector (row 0 the original embedding, row 1 the disrupted one)
and ``T = 1`` for single-branch probes. Every head ends in one fully connected
unit producing a logit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L

HEAD_KINDS = ("fc_only", "mlp", "self_attention", "transformer2")
PROB_EPS = 1e-7
TRANSFORMER_LAYERS = 2
TRANSFORMER_HEADS = 4


class HeadError(ValueError):
    pass


@dataclass
class HeadParams:
    head_kind: str
    dim: int
    n_tokens: int = 2
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_heads(self) -> int:
        return TRANSFORMER_HEADS if self.head_kind == "transformer2" else 1

    def copy(self) -> "HeadParams":
        return HeadParams(self.head_kind, self.dim, self.n_tokens,
                          {k: v.copy() for k, v in self.weights.items()})

    def as_float32_precision(self) -> "HeadParams":
        """Weights rounded through float32, i.e. exactly what a checkpoint stores."""
        return HeadParams(self.head_kind, self.dim, self.n_tokens,
                          {k: v.astype(np.float32).astype(np.float64) for k, v in self.weights.items()})

    def check_finite(self) -> None:
        for k, v in self.weights.items():
            if not np.all(np.isfinite(v)):
                raise HeadError(f"non-finite weights in {k}")


def _attn_names(prefix=""):
    return [prefix + n for n in ("W_q", "W_k", "W_v", "W_o")]


def init_params(head_kind: str, dim: int, n_tokens: int = 2,
                rng: np.random.Generator | None = None) -> HeadParams:
    """Projections ~ N(0, 1/D), classifier zeros."""
    if head_kind not in HEAD_KINDS:
        raise HeadError(f"unknown head kind {head_kind!r}")
    if head_kind == "transformer2" and dim % TRANSFORMER_HEADS:
        raise HeadError(f"transformer2 needs dim divisible by {TRANSFORMER_HEADS}")
    rng = np.random.default_rng(0) if rng is None else rng
    std = 1.0 / math.sqrt(dim)
    w: dict[str, np.ndarray] = {}
    if head_kind == "self_attention":
        for name in _attn_names():
            w[name] = rng.normal(0.0, std, (dim, dim))
    elif head_kind == "mlp":
        fan_in = n_tokens * dim
        w["W_1"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, 2 * dim))
        w["b_1"] = np.zeros(2 * dim)
    elif head_kind == "transformer2":
        for layer in range(TRANSFORMER_LAYERS):
            p = f"l{layer}."
            w[p + "ln1_g"], w[p + "ln1_b"] = np.ones(dim), np.zeros(dim)
            for name in _attn_names(p):
                w[name] = rng.normal(0.0, std, (dim, dim))
            # no key bias: softmax is invariant to it, so its gradient is identically zero
            for name in ("b_q", "b_v", "b_o"):
                w[p + name] = np.zeros(dim)
            w[p + "ln2_g"], w[p + "ln2_b"] = np.ones(dim), np.zeros(dim)
            w[p + "W_ff1"] = rng.normal(0.0, std, (dim, 4 * dim))
            w[p + "b_ff1"] = np.zeros(4 * dim)
            w[p + "W_ff2"] = rng.normal(0.0, 1.0 / math.sqrt(4 * dim), (4 * dim, dim))
            w[p + "b_ff2"] = np.zeros(dim)
        w["lnf_g"], w["lnf_b"] = np.ones(dim), np.zeros(dim)
    fc_in = 2 * dim if head_kind == "mlp" else n_tokens * dim
    w["w_fc"] = np.zeros(fc_in)
    w["b_fc"] = np.zeros(1)
    return HeadParams(head_kind, dim, n_tokens, w)


def _as_tokens(params: HeadParams, tokens) -> np.ndarray:
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (params.n_tokens, params.dim):
        raise HeadError(f"expected tokens of shape (B, {params.n_tokens}, {params.dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise HeadError("non-finite embedding input")
    return x


def forward(params: HeadParams, tokens) -> tuple[np.ndarray, tuple]:
    """Logits for a batch of token stacks, plus the cache for ``backward``."""
    w = params.weights
    x = _as_tokens(params, tokens)
    b = x.shape[0]
    kind = params.head_kind
    cache: dict = {"x": x}
    if kind == "fc_only":
        feat = x.reshape(b, -1)
    elif kind == "self_attention":
        att, cache["att"] = L.attention_forward(x, w["W_q"], w["W_k"], w["W_v"], w["W_o"], 1)
        feat = att.reshape(b, -1)
    elif kind == "mlp":
        h, cache["lin1"] = L.linear_forward(x.reshape(b, -1), w["W_1"], w["b_1"])
        feat, cache["relu"] = L.relu_forward(h)
    else:
        h = x
        for layer in range(TRANSFORMER_LAYERS):
            p = f"l{layer}."
            y1, cache[p + "ln1"] = L.layernorm_forward(h, w[p + "ln1_g"], w[p + "ln1_b"])
            att, cache[p + "att"] = L.attention_forward(
                y1, w[p + "W_q"], w[p + "W_k"], w[p + "W_v"], w[p + "W_o"], TRANSFORMER_HEADS,
                w[p + "b_q"], None, w[p + "b_v"], w[p + "b_o"])
            h = h + att
            y2, cache[p + "ln2"] = L.layernorm_forward(h, w[p + "ln2_g"], w[p + "ln2_b"])
            u, cache[p + "ff1"] = L.linear_forward(y2, w[p + "W_ff1"], w[p + "b_ff1"])
            g, cache[p + "gelu"] = L.gelu_forward(u)
            ff, cache[p + "ff2"] = L.linear_forward(g, w[p + "W_ff2"], w[p + "b_ff2"])
            h = h + ff
        hf, cache["lnf"] = L.layernorm_forward(h, w["lnf_g"], w["lnf_b"])
        feat = hf.reshape(b, -1)
    cache["feat"] = feat
    logits = feat @ w["w_fc"] + w["b_fc"][0]
    return logits, cache


def backward(params: HeadParams, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every weight, given dloss/dlogit per sample."""
    w = params.weights
    x = cache["x"]
    b = x.shape[0]
    kind = params.head_kind
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(b)
    grads = {"w_fc": cache["feat"].T @ dlogits, "b_fc": np.array([dlogits.sum()])}
    dfeat = np.outer(dlogits, w["w_fc"])
    if kind == "self_attention":
        _, g = L.attention_backward(dfeat.reshape(x.shape), cache["att"],
                                    w["W_q"], w["W_k"], w["W_v"], w["W_o"])
        grads.update({k: g[k] for k in ("W_q", "W_k", "W_v", "W_o")})
    elif kind == "mlp":
        dh = L.relu_backward(dfeat, cache["relu"])
        _, grads["W_1"], grads["b_1"] = L.linear_backward(dh, cache["lin1"], w["W_1"])
    elif kind == "transformer2":
        dh, grads["lnf_g"], grads["lnf_b"] = L.layernorm_backward(dfeat.reshape(x.shape), cache["lnf"])
        for layer in reversed(range(TRANSFORMER_LAYERS)):
            p = f"l{layer}."
            dg, grads[p + "W_ff2"], grads[p + "b_ff2"] = L.linear_backward(dh, cache[p + "ff2"], w[p + "W_ff2"])
            du = L.gelu_backward(dg, cache[p + "gelu"])
            dy2, grads[p + "W_ff1"], grads[p + "b_ff1"] = L.linear_backward(du, cache[p + "ff1"], w[p + "W_ff1"])
            dx2, grads[p + "ln2_g"], grads[p + "ln2_b"] = L.layernorm_backward(dy2, cache[p + "ln2"])
            dh = dh + dx2
            dy1, g = L.attention_backward(dh, cache[p + "att"],
                                          w[p + "W_q"], w[p + "W_k"], w[p + "W_v"], w[p + "W_o"])
            for k, v in g.items():
                if p + k in w:
                    grads[p + k] = v
            dx1, grads[p + "ln1_g"], grads[p + "ln1_b"] = L.layernorm_backward(dy1, cache[p + "ln1"])
            dh = dh + dx1
    return grads


def clamp_probability(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def bce_loss(probability, label) -> np.ndarray:
    """Per-sample binary cross-entropy on clamped probabilities."""
    p = clamp_probability(np.asarray(probability, dtype=np.float64))
    y = np.asarray(label, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def loss_and_grads(params: HeadParams, tokens, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE over the batch and its gradients.

    The logit gradient uses the logistic identity ``(p - y) / N``; the clamp only
    guards the logarithm.
    """
    logits, cache = forward(params, tokens)
    p = L.sigmoid(logits)
    y = np.asarray(labels, dtype=np.float64)
    loss = float(bce_loss(p, y).mean())
    return loss, backward(params, cache, (p - y) / len(y))


def predict_proba(params: HeadParams, tokens) -> np.ndarray:
    logits, _ = forward(params, tokens)
    return L.sigmoid(logits)


def predict_batch(params: HeadParams, tokens, chunk: int = 4096) -> np.ndarray:
    """Order-preserving vectorized inference."""
    x = _as_tokens(params, tokens)
    if len(x) == 0:
        return np.zeros(0)
    return np.concatenate([predict_proba(params, x[i:i + chunk]) for i in range(0, len(x), chunk)])


def attention_weights(params: HeadParams, tokens) -> np.ndarray:
    """Row-stochastic attention matrix of the single-head layer, shape (B, T, T)."""
    if params.head_kind != "self_attention":
        raise HeadError("attention weights are defined for the self_attention head")
    x = _as_tokens(params, tokens)
    _, cache = L.attention_forward(x, params.weights["W_q"], params.weights["W_k"],
                                   params.weights["W_v"], params.weights["W_o"], 1)
    return cache[4][:, 0]


def attended_tokens(params: HeadParams, tokens) -> np.ndarray:
    """Output tokens of the self-attention layer before concatenation, (B, T, D)."""
    x = _as_tokens(params, tokens)
    w = params.weights
    out, _ = L.attention_forward(x, w["W_q"], w["W_k"], w["W_v"], w["W_o"], 1)
    return out
