"""Independent reference implementations used as test oracles.

The head reference evaluates a whole batch of parameter sets at once (leading
axis P), which makes full central-difference gradient checks cheap.
"""
import math

import numpy as np
from scipy.special import erf, expit

LN_EPS = 1e-5
EPS = 1e-7


def _layernorm(h, g, b):
    mu = h.mean(-1, keepdims=True)
    var = ((h - mu) ** 2).mean(-1, keepdims=True)
    return g[:, None, None, :] * (h - mu) / np.sqrt(var + LN_EPS) + b[:, None, None, :]


def _lin(h, w):
    """(P|1, B, T, D) @ (P|1, D, F) with tokens flattened into one matrix per parameter row."""
    _, b, t, d = h.shape
    return (h.reshape(h.shape[0], b * t, d) @ w).reshape(-1, b, t, w.shape[-1])


def _mha(h, wq, wk, wv, wo, n_heads, bq=None, bv=None, bo=None):
    _, b, t, d = h.shape
    dh = d // n_heads
    q, k, v = (_lin(h, m) for m in (wq, wk, wv))
    if bq is not None:
        q = q + bq[:, None, None, :]
        v = v + bv[:, None, None, :]
    q, k, v = (m.reshape(-1, b, t, n_heads, dh) for m in (q, k, v))
    q, k, v = (m.transpose(0, 1, 3, 2, 4) for m in (q, k, v))
    s = q @ k.swapaxes(-1, -2) / math.sqrt(dh)
    s = s - s.max(-1, keepdims=True)
    a = np.exp(s)
    a = a / a.sum(-1, keepdims=True)
    heads = (a @ v).transpose(0, 1, 3, 2, 4).reshape(-1, b, t, d)
    out = _lin(heads, wo)
    if bo is not None:
        out = out + bo[:, None, None, :]
    return out


def head_logits(kind, w, x, n_layers=2, n_heads=4):
    """Logits of shape (P, B) for batched weights ``w[name]: (P, *shape)`` and tokens (B, T, D)."""
    # unperturbed prefixes keep P = 1 and broadcast only where a perturbed weight enters
    b, t, d = x.shape
    xs = x[None]
    if kind == "fc_only":
        feat = xs.reshape(1, b, t * d)
    elif kind == "self_attention":
        feat = _mha(xs, w["W_q"], w["W_k"], w["W_v"], w["W_o"], 1).reshape(-1, b, t * d)
    elif kind == "mlp":
        hid = xs.reshape(1, b, t * d) @ w["W_1"] + w["b_1"][:, None, :]
        feat = np.maximum(hid, 0.0)
    elif kind == "transformer2":
        h = xs
        for layer in range(n_layers):
            pre = f"l{layer}."
            y = _layernorm(h, w[pre + "ln1_g"], w[pre + "ln1_b"])
            h = h + _mha(y, w[pre + "W_q"], w[pre + "W_k"], w[pre + "W_v"], w[pre + "W_o"], n_heads,
                         w[pre + "b_q"], w[pre + "b_v"], w[pre + "b_o"])
            y = _layernorm(h, w[pre + "ln2_g"], w[pre + "ln2_b"])
            u = _lin(y, w[pre + "W_ff1"]) + w[pre + "b_ff1"][:, None, None, :]
            g = u * 0.5 * (1.0 + erf(u / math.sqrt(2.0)))
            h = h + _lin(g, w[pre + "W_ff2"]) + w[pre + "b_ff2"][:, None, None, :]
        feat = _layernorm(h, w["lnf_g"], w["lnf_b"])
        feat = feat.reshape(feat.shape[0], b, t * d)
    else:
        raise ValueError(kind)
    return (feat @ w["w_fc"][:, :, None])[..., 0] + w["b_fc"][:, :1]


def head_loss(kind, w, x, y):
    prob = np.clip(expit(head_logits(kind, w, x)), EPS, 1 - EPS)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(prob) + (1 - y) * np.log(1 - prob)).mean(-1)


def finite_difference_grads(kind, weights, x, y, h=1e-5):
    """Central differences of the mean BCE for every coordinate of every weight.

    One weight tensor is perturbed at a time; the others broadcast with P = 1.
    """
    base = {n: v[None].astype(np.float64) for n, v in weights.items()}
    out = {}
    for n, v in weights.items():
        size = v.size
        pert = np.repeat(base[n], 2 * size, axis=0).reshape(2 * size, size)
        idx = np.arange(size)
        pert[2 * idx, idx] += h
        pert[2 * idx + 1, idx] -= h
        losses = head_loss(kind, {**base, n: pert.reshape((2 * size,) + v.shape)}, x, y)
        out[n] = ((losses[0::2] - losses[1::2]) / (2 * h)).reshape(v.shape)
    return out


# -- metrics -----------------------------------------------------------------

def brute_average_precision(probs, labels):
    """AP as the mean over positives of precision at that positive's rank (stable tie order)."""
    order = sorted(range(len(probs)), key=lambda i: -probs[i])
    terms, hits = [], 0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            terms.append(hits / rank)
    return math.fsum(terms) / len(terms)


def brute_global_ap(probs, labels, gens, groups, domains, seed):
    """Three-step resampled AP, written with plain Python containers."""
    rng = np.random.default_rng(seed)
    by_gen = {}
    for i, g in enumerate(gens):
        by_gen.setdefault(g, []).append(i)
    group_members = {}
    for g in by_gen:
        grp = groups[by_gen[g][0]]
        group_members.setdefault(grp, [])
        if g not in group_members[grp]:
            group_members[grp].append(g)

    def top_up(idx, target):
        idx = list(idx)
        short = target - len(idx)
        if short > 0:
            picks = rng.integers(0, len(idx), short)
            idx = idx + [idx[int(j)] for j in picks]
        return idx

    merged = {}
    for grp, members in group_members.items():
        target = max(len(by_gen[g]) for g in members)
        pool = []
        for g in members:
            pool += top_up(by_gen[g], target)
        merged[grp] = pool
    target = max(len(v) for v in merged.values())
    final = {grp: top_up(pool, target) for grp, pool in merged.items()}

    def pool_ap(want):
        idx = [i for grp, pool in final.items() for i in pool if want(domains[pool[0]])]
        lab = [labels[i] for i in idx]
        if not idx or len(set(lab)) < 2:
            return None
        return brute_average_precision([probs[i] for i in idx], lab)

    return (pool_ap(lambda d: d == "ID"), pool_ap(lambda d: d == "OOD"), pool_ap(lambda d: True))
