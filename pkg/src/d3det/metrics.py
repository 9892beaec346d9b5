"""Fixed-threshold mean accuracy with same-architecture merging, and global AP.

Mean accuracy: per-generator accuracy at threshold 0.5, generators of one
architecture group averaged first, then an unweighted mean over groups within
ID, OOD and Total.

Global AP: (1) inside each architecture group, top every member up to the
largest member's sample count by drawing with replacement, and merge; (2) top
every merged group up to the largest group's count the same way; (3) compute AP
over the ID, OOD and Total pools of the resampled set. Samples already at the
target count are kept as-is, so equal-sized singleton groups reproduce plain AP.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

THRESHOLD = 0.5


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    probability: float
    label: int
    generator_id: str
    architecture_group: str
    domain: str


@dataclass
class ScoreTable:
    """Column-oriented scored samples."""

    probabilities: np.ndarray
    labels: np.ndarray
    generator_ids: np.ndarray
    groups: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.generator_ids = np.asarray(self.generator_ids, dtype=object)
        self.groups = np.asarray(self.groups, dtype=object)
        self.domains = np.asarray(self.domains, dtype=object)
        n = len(self.probabilities)
        if not all(len(a) == n for a in (self.labels, self.generator_ids, self.groups, self.domains)):
            raise MetricError("score columns differ in length")
        if not np.all(np.isfinite(self.probabilities)):
            raise MetricError("non-finite probability")

    def __len__(self):
        return len(self.probabilities)

    @classmethod
    def from_samples(cls, samples) -> "ScoreTable":
        samples = list(samples)
        return cls([s.probability for s in samples], [s.label for s in samples],
                   [s.generator_id for s in samples], [s.architecture_group for s in samples],
                   [s.domain for s in samples])

    def subset(self, idx) -> "ScoreTable":
        return ScoreTable(self.probabilities[idx], self.labels[idx], self.generator_ids[idx],
                          self.groups[idx], self.domains[idx])


def _table(samples) -> ScoreTable:
    return samples if isinstance(samples, ScoreTable) else ScoreTable.from_samples(samples)


def _ordered_unique(values) -> list:
    seen = {}
    for v in values:
        seen.setdefault(v, None)
    return list(seen)


def _group_domains(t: ScoreTable) -> dict:
    out = {}
    for g, d in zip(t.groups, t.domains):
        if out.setdefault(g, d) != d:
            raise MetricError(f"architecture group {g!r} spans both ID and OOD")
    return out


def _mean_or_none(values):
    return float(np.mean(values)) if values else None


def mean_accuracy(samples, threshold: float = THRESHOLD) -> dict:
    t = _table(samples)
    if len(t) == 0:
        raise MetricError("no samples")
    correct = (t.probabilities > threshold).astype(np.int64) == t.labels
    per_gen = {}
    for gid in _ordered_unique(t.generator_ids):
        mask = t.generator_ids == gid
        per_gen[gid] = float(correct[mask].mean())
    merged = {}
    for g in _ordered_unique(t.groups):
        members = _ordered_unique(t.generator_ids[t.groups == g])
        if not members:
            raise MetricError(f"empty generator group {g!r}")
        merged[g] = float(np.mean([per_gen[m] for m in members]))
    domains = _group_domains(t)
    return {
        "per_generator_accuracy": per_gen,
        "merged_generator_accuracy": merged,
        "id_mean_acc": _mean_or_none([v for g, v in merged.items() if domains[g] == "ID"]),
        "ood_mean_acc": _mean_or_none([v for g, v in merged.items() if domains[g] == "OOD"]),
        "total_mean_acc": _mean_or_none(list(merged.values())),
    }


def average_precision(probabilities, labels) -> float:
    """Mean over positives of precision at each positive's rank.

    Ranking is by descending probability with ties kept in index order. The sum
    is evaluated with ``math.fsum`` so the result is the correctly rounded value
    of the exact sum of the per-positive terms.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise MetricError("average precision needs at least one positive and one negative")
    order = np.argsort(-p, kind="stable")
    ranked = y[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(y) + 1)
    pos = ranked == 1
    terms = hits[pos] / ranks[pos]
    return math.fsum(terms.tolist()) / n_pos


def _top_up(idx: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    short = target - len(idx)
    if short <= 0:
        return idx
    return np.concatenate([idx, idx[rng.integers(0, len(idx), short)]])


def resample_indices(samples, resample_seed: int) -> dict[str, np.ndarray]:
    """Row indices of the evenly distributed test set, keyed by architecture group."""
    t = _table(samples)
    rng = np.random.default_rng(resample_seed)
    merged = {}
    for g in _ordered_unique(t.groups):
        in_group = t.groups == g
        members = [np.flatnonzero(in_group & (t.generator_ids == m))
                   for m in _ordered_unique(t.generator_ids[in_group])]
        if not members:
            raise MetricError(f"empty generator group {g!r}")
        target = max(len(m) for m in members)
        merged[g] = np.concatenate([_top_up(m, target, rng) for m in members])
    target = max(len(v) for v in merged.values())
    return {g: _top_up(idx, target, rng) for g, idx in merged.items()}


def global_ap(samples, resample_seed: int = 0) -> tuple[float | None, float | None, float]:
    t = _table(samples)
    if len(t) == 0:
        raise MetricError("no samples")
    resampled = resample_indices(t, resample_seed)
    domains = _group_domains(t)

    def pool_ap(keep):
        parts = [idx for g, idx in resampled.items() if keep(domains[g])]
        if not parts:
            return None
        idx = np.concatenate(parts)
        return average_precision(t.probabilities[idx], t.labels[idx])

    return (pool_ap(lambda d: d == "ID"), pool_ap(lambda d: d == "OOD"), pool_ap(lambda d: True))


@dataclass
class EvalReport:
    per_generator_accuracy: dict
    merged_generator_accuracy: dict
    id_mean_acc: float | None
    ood_mean_acc: float | None
    total_mean_acc: float | None
    id_ap: float | None
    ood_ap: float | None
    total_ap: float | None
    threshold: float = THRESHOLD
    resample_seed: int = 0
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(samples, resample_seed: int = 0, provenance: dict | None = None) -> EvalReport:
    t = _table(samples)
    acc = mean_accuracy(t)
    id_ap, ood_ap, total_ap = global_ap(t, resample_seed)
    return EvalReport(**acc, id_ap=id_ap, ood_ap=ood_ap, total_ap=total_ap,
                      resample_seed=resample_seed, provenance=dict(provenance or {}))


BLUR_SIGMAS = (0.0, 0.5, 1.0, 1.5, 2.0)
JPEG_QUALITIES = (30, 40, 50, 60, 70, 80, 90, 100)


def robustness_grid(params, backbone, manifest, blur_sigmas=BLUR_SIGMAS, jpeg_qualities=JPEG_QUALITIES, *,
                    disruption=None, policy=None, records=None, aug_seed: int = 0) -> dict:
    """Total mean accuracy with each degradation applied before the eval path.

    Rows carry ``perturbation`` ("blur" or "jpeg"), ``value`` and ``total_mean_acc``.
    Disruption randomness is keyed per record, so only the degradation varies.
    """
    from .d3head import predict_batch
    from .imagekit import AugmentationPolicy, DisruptionSpec, gaussian_blur, jpeg_roundtrip
    from .pipeline import ORIG, compute_embeddings
    from .synthbench import render

    disruption = DisruptionSpec() if disruption is None else disruption
    policy = AugmentationPolicy() if policy is None else policy
    records = manifest.select(split="test") if records is None else list(records)
    if not records:
        raise MetricError("no records to evaluate")
    bench = manifest.benchmark
    images = [render(r, bench) for r in records]
    views = {} if params.n_tokens == 1 else {"shuffled": disruption}

    def total_acc(degrade):
        emb = compute_embeddings(records, manifest, backbone, views, policy, aug_seed,
                                 images=images, degrade=degrade)
        tok = np.stack([emb[ORIG]] + ([emb["shuffled"]] if views else []), axis=1)
        table = ScoreTable(predict_batch(params, tok), [r.y for r in records], [r.generator_id for r in records],
                           [r.architecture_group for r in records], [bench.domain(r.generator_id) for r in records])
        return mean_accuracy(table)["total_mean_acc"]

    rows = []
    for s in blur_sigmas:
        rows.append({"perturbation": "blur", "value": float(s),
                     "total_mean_acc": total_acc(lambda img, s=s: gaussian_blur(img, s))})
    for q in jpeg_qualities:
        rows.append({"perturbation": "jpeg", "value": int(q),
                     "total_mean_acc": total_acc(lambda img, q=q: jpeg_roundtrip(img, q))})
    return {"clean_total_mean_acc": total_acc(None), "rows": rows}
