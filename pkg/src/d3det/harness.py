"""Experiment orchestration: configs, training/evaluation runs, sweeps, ablations,
robustness grids and occlusion maps. Every entry point writes into an output
directory (``report.json``, ``tables/*.csv``, ``maps/*.png``, ``checkpoints/*``)
and every report carries the config hash, master seed and code version.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .backbone import BackboneSpec, ToyBackbone, make_backbone
from .d3head import HEAD_KINDS, HeadParams, TokenSet, TrainConfig, predict_batch, train
from .d3head import checkpoint as ckpt
from .imagekit import AugmentationPolicy, DisruptionSpec, apply_disruption, write_gray_png
from .pipeline import ORIG, EmbeddingStore
from .synthbench import Manifest, build_manifest, default_benchmark, derive_seed, load_manifest, render

EXPERIMENT_KINDS = ("train_eval", "scale_sweep", "disruption_ablation", "patch_size_ablation",
                    "head_ablation", "branch_ablation", "robustness", "occlusion")
DESK_POLICY = AugmentationPolicy(resize_to=224)
DESK_TRAIN = TrainConfig(learning_rate=1e-2, batch_size=64, epochs=20)


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class SweepSettings:
    sizes: tuple[int, ...] = (1, 2, 4, 8)
    orders: int = 3


@dataclass(frozen=True)
class RobustnessSettings:
    blur_sigmas: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
    jpeg_qualities: tuple[int, ...] = (30, 40, 50, 60, 70, 80, 90, 100)
    # per generator and class; None evaluates every test record
    samples_per_class: int | None = 40


@dataclass(frozen=True)
class OcclusionSettings:
    window: int = 28
    stride: int = 14
    fill: int = 128
    sample_ids: tuple[str, ...] = ()
    count: int = 2


def _sub(cls, d):
    if d is None:
        return cls()
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} section must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "train_eval"
    manifest_path: str | None = None
    benchmark: dict = field(default_factory=dict)
    backbone: BackboneSpec = BackboneSpec()
    disruption: DisruptionSpec = DisruptionSpec()
    augmentation: AugmentationPolicy = DESK_POLICY
    head_kind: str = "self_attention"
    train: TrainConfig = DESK_TRAIN
    # distinct augmented passes over the train split; training epochs cycle through them
    augment_epochs: int = 5
    seed: int = 0
    n_seeds: int = 1
    augment_seed: int = 0
    resample_seed: int = 0
    output_dir: str = "out"
    cache_dir: str | None = None
    sweep: SweepSettings = SweepSettings()
    robustness: RobustnessSettings = RobustnessSettings()
    occlusion: OcclusionSettings = OcclusionSettings()

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head_kind!r}")
        if self.augment_epochs < 1:
            raise ConfigError("augment_epochs must be >= 1")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if self.seed < 0 or self.augment_seed < 0 or self.resample_seed < 0:
            raise ConfigError("seeds must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        try:
            if "backbone" in d:
                d["backbone"] = BackboneSpec.from_dict(d["backbone"])
            if "disruption" in d:
                d["disruption"] = DisruptionSpec.from_dict(d["disruption"])
            if "augmentation" in d:
                d["augmentation"] = AugmentationPolicy.from_dict({**DESK_POLICY.to_dict(), **d["augmentation"]})
            if "train" in d:
                d["train"] = TrainConfig.from_dict({**DESK_TRAIN.to_dict(), **d["train"]})
            d["sweep"] = _sub(SweepSettings, d.get("sweep"))
            d["robustness"] = _sub(RobustnessSettings, d.get("robustness"))
            d["occlusion"] = _sub(OcclusionSettings, d.get("occlusion"))
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "manifest_path": self.manifest_path, "benchmark": dict(self.benchmark),
            "backbone": self.backbone.to_dict(), "disruption": self.disruption.to_dict(),
            "augmentation": self.augmentation.to_dict(), "head_kind": self.head_kind,
            "train": self.train.to_dict(), "augment_epochs": self.augment_epochs, "seed": self.seed, "n_seeds": self.n_seeds,
            "augment_seed": self.augment_seed, "resample_seed": self.resample_seed,
            "output_dir": self.output_dir, "cache_dir": self.cache_dir,
            "sweep": _listify(asdict(self.sweep)), "robustness": _listify(asdict(self.robustness)),
            "occlusion": _listify(asdict(self.occlusion)),
        }

    def config_hash(self) -> str:
        """Hash of everything that affects results (output and cache locations excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("cache_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _listify(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# -- shared plumbing ---------------------------------------------------------

def view_name(spec: DisruptionSpec, tag: str = "") -> str:
    if spec.kind == "patch_shuffle":
        base = f"ps{spec.patch_size}"
    elif spec.kind == "random_rotation":
        lo, hi = spec.rotation_range_deg
        base = f"rot{lo:g}-{hi:g}"
    else:
        base = spec.kind
    return base + tag


@dataclass(frozen=True)
class Branches:
    """Token layout of one detector: row names plus the disruptions that produce them."""

    rows: tuple[str, ...]
    views: tuple[tuple[str, DisruptionSpec], ...] = ()

    @classmethod
    def dual(cls, spec: DisruptionSpec) -> "Branches":
        name = view_name(spec)
        return cls((ORIG, name), ((name, spec),))

    @classmethod
    def single(cls) -> "Branches":
        return cls((ORIG,))

    def view_dict(self) -> dict[str, DisruptionSpec]:
        return dict(self.views)


class Experiment:
    """Loaded manifest, backbone and embedding store for one config."""

    def __init__(self, cfg: ExperimentConfig, verbose: bool = False):
        self.cfg = cfg
        self.verbose = verbose
        self.manifest = load_manifest_for(cfg)
        self.bench = self.manifest.benchmark
        self.backbone = make_backbone(cfg.backbone)
        self.digest_before = self.backbone.weights_digest()
        cache = cfg.cache_dir
        self.store = EmbeddingStore(self.manifest, self.backbone, cfg.augmentation, cfg.augment_seed,
                                    cache_dir=cache, verbose=verbose)
        self.provenance = {"config_hash": cfg.config_hash(), "master_seed": cfg.seed,
                           "code_version": __version__}

    def log(self, msg: str) -> None:
        if self.verbose:
            print(msg, flush=True)

    def _meta(self, records):
        return ([r.y for r in records], [r.generator_id for r in records],
                [r.architecture_group for r in records], [self.bench.domain(r.generator_id) for r in records])

    def tokens(self, partition: str, branches: Branches) -> np.ndarray:
        emb = self.store.get(partition, branches.view_dict())
        return np.stack([emb[name] for name in branches.rows], axis=1)

    def token_set(self, split: str, branches: Branches, generators=None, domain: str | None = None) -> TokenSet:
        records = self.store.records(split)
        if split == "train":
            passes = min(self.cfg.augment_epochs, self.cfg.train.epochs)
            tok = np.stack([self.tokens(f"train@{e}", branches) for e in range(passes)])
        else:
            tok = self.tokens(split, branches)
        ts = TokenSet(tok, *self._meta(records))
        keep = np.ones(len(records), dtype=bool)
        if generators is not None:
            keep &= np.isin(ts.generator_ids, list(generators))
        if domain is not None:
            keep &= ts.domains == domain
        return ts if keep.all() else ts.subset(np.flatnonzero(keep))

    def fit(self, head_kind: str, branches: Branches, seed: int, generators=None):
        gens = list(self.bench.train_subset if generators is None else generators)
        data = self.token_set("train", branches, gens)
        val = self.token_set("val", branches, gens)
        unseen = set(data.generator_ids.tolist()) - set(self.bench.train_subset)
        if unseen:
            raise RuntimeError(f"held-out generators leaked into training: {sorted(unseen)}")
        params, log = train(head_kind, data, replace(self.cfg.train, seed=seed), val)
        if set(log.train_generators) - set(gens):
            raise RuntimeError("training log lists generators outside the requested subset")
        return params, log

    def score(self, params: HeadParams, branches: Branches, generators=None, domain_of=None) -> metrics.ScoreTable:
        ts = self.token_set("test", branches, generators)
        table = ts.score(predict_batch(params, ts.tokens))
        if domain_of is not None:
            table.domains = np.array([domain_of(g) for g in table.generator_ids], dtype=object)
        return table

    def evaluate(self, params, branches, generators=None, domain_of=None) -> metrics.EvalReport:
        table = self.score(params, branches, generators, domain_of)
        return metrics.evaluate(table, self.cfg.resample_seed, self.provenance)

    def train_seeds(self) -> list[int]:
        return [self.cfg.seed + i for i in range(self.cfg.n_seeds)]

    def check_backbone_frozen(self) -> None:
        if self.backbone.weights_digest() != self.digest_before:
            raise RuntimeError("backbone weights changed during the experiment")


def load_manifest_for(cfg: ExperimentConfig) -> Manifest:
    if cfg.manifest_path is not None:
        path = Path(cfg.manifest_path)
        if not path.exists():
            raise ConfigError(f"manifest_path {path} does not exist")
        return load_manifest(path)
    try:
        return build_manifest(default_benchmark(**cfg.benchmark))
    except TypeError as exc:
        raise ConfigError(f"benchmark section: {exc}") from None


SUMMARY_KEYS = ("id_mean_acc", "ood_mean_acc", "total_mean_acc", "id_ap", "ood_ap", "total_ap")


def _summary(rep: metrics.EvalReport) -> dict:
    return {k: getattr(rep, k) for k in SUMMARY_KEYS}


def _mean_summary(reps: list[dict]) -> dict:
    out = {}
    for k in SUMMARY_KEYS:
        vals = [r[k] for r in reps if r[k] is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def _run_seeds(exp: Experiment, head_kind: str, branches: Branches) -> dict:
    runs = []
    for seed in exp.train_seeds():
        params, log = exp.fit(head_kind, branches, seed)
        rep = exp.evaluate(params, branches)
        runs.append({"seed": seed, **_summary(rep), "best_epoch": log.best_epoch,
                     "per_generator_accuracy": rep.per_generator_accuracy})
        exp.log(f"    {head_kind} {branches.rows} seed {seed}: "
                f"ID {runs[-1]['id_mean_acc']:.3f} OOD {runs[-1]['ood_mean_acc']:.3f}")
    return {"runs": runs, "mean": _mean_summary(runs)}


# -- experiments -------------------------------------------------------------

def run_train(exp: Experiment, out: Path) -> dict:
    """Train the configured detector once (master seed) and save its checkpoint."""
    cfg = exp.cfg
    branches = Branches.dual(cfg.disruption)
    params, log = exp.fit(cfg.head_kind, branches, cfg.seed)
    exp.check_backbone_frozen()
    prov = {**exp.provenance, "head_kind": cfg.head_kind, "rows": list(branches.rows),
            "disruption": cfg.disruption.to_dict(), "train_config": replace(cfg.train, seed=cfg.seed).to_dict(),
            "best_epoch": log.best_epoch, "train_generators": log.train_generators}
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "checkpoints" / "head.d3ck", params, prov)
    return {"training_log": log.to_dict(), "checkpoint": "checkpoints/head.d3ck"}


def run_eval(exp: Experiment, out: Path, checkpoint_path=None) -> dict:
    path = Path(checkpoint_path) if checkpoint_path else out / "checkpoints" / "head.d3ck"
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    params, prov = ckpt.load(path)
    rows = tuple(prov.get("rows", [ORIG, view_name(exp.cfg.disruption)]))
    spec = DisruptionSpec.from_dict(prov["disruption"]) if "disruption" in prov else exp.cfg.disruption
    branches = Branches(rows, tuple((r, spec) for r in rows if r != ORIG))
    rep = exp.evaluate(params, branches)
    _write_eval_tables(out, rep)
    return {"eval": rep.to_dict(), "checkpoint_provenance": prov,
            "checkpoint_config_hash": prov.get("config_hash"),
            "config_hash_matches": prov.get("config_hash") == exp.provenance["config_hash"]}


def _write_eval_tables(out: Path, rep: metrics.EvalReport, name: str = "eval") -> None:
    write_csv(out / "tables" / f"{name}_per_generator.csv", ["generator", "accuracy"],
              [[g, a] for g, a in rep.per_generator_accuracy.items()])
    write_csv(out / "tables" / f"{name}_summary.csv", list(SUMMARY_KEYS), [[getattr(rep, k) for k in SUMMARY_KEYS]])


def run_train_eval(exp: Experiment, out: Path) -> dict:
    """Dual-branch detector and the single-branch baseline, over ``n_seeds`` training seeds."""
    cfg = exp.cfg
    dual = Branches.dual(cfg.disruption)
    res = {"detector": _run_seeds(exp, cfg.head_kind, dual),
           "single_branch": _run_seeds(exp, "fc_only", Branches.single())}
    params, log = exp.fit(cfg.head_kind, dual, cfg.seed)
    rep = exp.evaluate(params, dual)
    res["master_seed_eval"] = rep.to_dict()
    _write_eval_tables(out, rep)
    margins = [d["ood_mean_acc"] - s["ood_mean_acc"]
               for d, s in zip(res["detector"]["runs"], res["single_branch"]["runs"])]
    res["ood_margin_per_seed"] = margins
    write_csv(out / "tables" / "train_eval.csv", ["model", "seed"] + list(SUMMARY_KEYS),
              [[m, r["seed"]] + [r[k] for k in SUMMARY_KEYS]
               for m in ("detector", "single_branch") for r in res[m]["runs"]])
    exp.check_backbone_frozen()
    return res


def run_scale_sweep(exp: Experiment, out: Path) -> dict:
    cfg = exp.cfg
    pool = list(exp.bench.train_subset)
    sizes = list(cfg.sweep.sizes)
    if max(sizes) > len(pool):
        raise ConfigError(f"sweep size {max(sizes)} exceeds the {len(pool)} training generators")
    ood = [g.generator_id for g in exp.bench.generators if exp.bench.domain(g.generator_id) == "OOD"]
    dual = Branches.dual(cfg.disruption)
    rng = np.random.default_rng(derive_seed(cfg.seed, 0x5EE9))
    runs = []
    for order_idx in range(cfg.sweep.orders):
        order = [pool[i] for i in rng.permutation(len(pool))]
        first = order[0]
        for size in sizes:
            gens = order[:size]
            params, log = exp.fit(cfg.head_kind, dual, cfg.seed, gens)
            table = exp.score(params, dual, [first] + ood,
                              domain_of=lambda g, first=first: "ID" if g == first else "OOD")
            rep = metrics.evaluate(table, cfg.resample_seed)
            runs.append({"order": order_idx, "size": size, "generators": gens,
                         "train_generators_logged": log.train_generators, **_summary(rep)})
            exp.log(f"    order {order_idx} size {size}: ID {rep.id_mean_acc:.3f} OOD {rep.ood_mean_acc:.3f}")
    curves = {k: [float(np.mean([r[k] for r in runs if r["size"] == s])) for s in sizes]
              for k in ("id_mean_acc", "ood_mean_acc", "id_ap", "ood_ap")}
    write_csv(out / "tables" / "scale_sweep_runs.csv", ["order", "size", "generators"] + list(SUMMARY_KEYS),
              [[r["order"], r["size"], " ".join(r["generators"])] + [r[k] for k in SUMMARY_KEYS] for r in runs])
    write_csv(out / "tables" / "scale_sweep_curves.csv", ["size", "id_mean_acc", "ood_mean_acc", "id_ap", "ood_ap"],
              [[s] + [curves[k][i] for k in ("id_mean_acc", "ood_mean_acc", "id_ap", "ood_ap")]
               for i, s in enumerate(sizes)])
    exp.check_backbone_frozen()
    return {"sizes": sizes, "runs": runs, "curves": curves}


def _ablation(exp: Experiment, out: Path, name: str, variants: list[tuple[str, str, Branches]]) -> dict:
    rows = []
    for label, head_kind, branches in variants:
        exp.log(f"  {name}: {label}")
        r = _run_seeds(exp, head_kind, branches)
        rows.append({"name": label, "head_kind": head_kind, "rows": list(branches.rows), **r["mean"],
                     "runs": r["runs"]})
    write_csv(out / "tables" / f"{name}.csv", ["name"] + list(SUMMARY_KEYS),
              [[r["name"]] + [r[k] for k in SUMMARY_KEYS] for r in rows])
    exp.check_backbone_frozen()
    return {"rows": rows}


DISRUPTION_ORDER = ("horizontal_flip", "vertical_flip", "random_rotation", "patch_shuffle")
PATCH_SIZES = (1, 14, 28, 56, 112, 224)


def run_disruption_ablation(exp: Experiment, out: Path) -> dict:
    base = exp.cfg.disruption
    variants = []
    for kind in DISRUPTION_ORDER:
        spec = DisruptionSpec(kind, base.patch_size, base.rotation_range_deg)
        variants.append((kind, exp.cfg.head_kind, Branches.dual(spec)))
    return _ablation(exp, out, "disruption_ablation", variants)


def run_patch_size_ablation(exp: Experiment, out: Path) -> dict:
    size = exp.bench.image_size
    bad = [p for p in PATCH_SIZES if size % p]
    if bad:
        raise ConfigError(f"patch sizes {bad} do not divide the image size {size}")
    variants = [(f"patch_{p}", exp.cfg.head_kind, Branches.dual(DisruptionSpec("patch_shuffle", p)))
                for p in PATCH_SIZES]
    return _ablation(exp, out, "patch_size_ablation", variants)


def run_head_ablation(exp: Experiment, out: Path) -> dict:
    dual = Branches.dual(exp.cfg.disruption)
    return _ablation(exp, out, "head_ablation", [(k, k, dual) for k in HEAD_KINDS])


def branch_variants(spec: DisruptionSpec) -> list[tuple[str, str, Branches]]:
    s1 = view_name(spec)
    s2 = view_name(spec, "#2")
    return [
        ("group1_original", "fc_only", Branches((ORIG,))),
        ("group2_original_sa", "self_attention", Branches((ORIG,))),
        ("group3_original_shuffled", "fc_only", Branches((ORIG, s1), ((s1, spec),))),
        ("group4_original_shuffled_sa", "self_attention", Branches((ORIG, s1), ((s1, spec),))),
        ("group5_original_original_sa", "self_attention", Branches((ORIG, ORIG))),
        ("group6_shuffled_shuffled_sa", "self_attention", Branches((s1, s2), ((s1, spec), (s2, spec)))),
    ]


def run_branch_ablation(exp: Experiment, out: Path) -> dict:
    return _ablation(exp, out, "branch_ablation", branch_variants(exp.cfg.disruption))


def run_robustness(exp: Experiment, out: Path) -> dict:
    cfg = exp.cfg
    dual = Branches.dual(cfg.disruption)
    params, log = exp.fit(cfg.head_kind, dual, cfg.seed)
    records = robustness_records(exp.manifest, cfg.robustness.samples_per_class)
    grid = metrics.robustness_grid(params, exp.backbone, exp.manifest, cfg.robustness.blur_sigmas,
                                   cfg.robustness.jpeg_qualities, disruption=cfg.disruption,
                                   policy=cfg.augmentation, records=records, aug_seed=cfg.augment_seed)
    write_csv(out / "tables" / "robustness.csv", ["perturbation", "value", "total_mean_acc"],
              [[r["perturbation"], r["value"], r["total_mean_acc"]] for r in grid["rows"]])
    exp.check_backbone_frozen()
    return {"clean_total_mean_acc": grid["clean_total_mean_acc"], "rows": grid["rows"],
            "n_records": len(records), "best_epoch": log.best_epoch}


def robustness_records(manifest: Manifest, per_class: int | None):
    test = manifest.select(split="test")
    if per_class is None:
        return test
    seen: dict[tuple[str, str], int] = {}
    keep = []
    for r in test:
        k = (r.generator_id, r.label)
        if seen.get(k, 0) < per_class:
            keep.append(r)
            seen[k] = seen.get(k, 0) + 1
    return keep


# -- occlusion ---------------------------------------------------------------

@dataclass
class OcclusionMap:
    values: np.ndarray
    window: int
    stride: int
    baseline: float

    def heatmap(self) -> np.ndarray:
        """8-bit grayscale rendering normalized over the map (constant maps render black)."""
        v = self.values
        span = v.max() - v.min()
        if span <= 0:
            return np.zeros(v.shape, dtype=np.uint8)
        return np.floor((v - v.min()) / span * 255.0 + 0.5).astype(np.uint8)

    def cell_boxes(self):
        for i in range(self.values.shape[0]):
            for j in range(self.values.shape[1]):
                yield i, j, i * self.stride, j * self.stride


def dual_probability(params: HeadParams, backbone: ToyBackbone, img: np.ndarray,
                     disruption: DisruptionSpec, seed: int = 0) -> float:
    e_o = backbone.embed(img)
    if params.n_tokens == 1:
        tok = e_o[None, None]
    else:
        e_s = backbone.embed(apply_disruption(img, disruption, np.random.default_rng(seed)))
        tok = np.stack([e_o, e_s])[None]
    return float(predict_batch(params, tok)[0])


def occlusion_map(params: HeadParams, backbone: ToyBackbone, img: np.ndarray, window: int = 28,
                  stride: int = 14, fill: int = 128, disruption: DisruptionSpec = DisruptionSpec(),
                  seed: int = 0) -> OcclusionMap:
    """Probability drop when each window of the original image is filled before both branches."""
    h, w = img.shape[:2]
    if window > h or window > w:
        raise ValueError(f"window {window} exceeds image {w}x{h}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    base = dual_probability(params, backbone, img, disruption, seed)
    rows, cols = (h - window) // stride + 1, (w - window) // stride + 1
    vals = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            occ = img.copy()
            occ[i * stride:i * stride + window, j * stride:j * stride + window] = fill
            vals[i, j] = base - dual_probability(params, backbone, occ, disruption, seed)
    return OcclusionMap(vals, window, stride, base)


def top_decile_mask(omap: OcclusionMap, shape) -> np.ndarray:
    """Pixel mask covered by the windows whose value is in the top 10% of the map."""
    thr = np.quantile(omap.values, 0.9)
    mask = np.zeros(shape, dtype=bool)
    for i, j, r, c in omap.cell_boxes():
        if omap.values[i, j] >= thr:
            mask[r:r + omap.window, c:c + omap.window] = True
    return mask


def run_occlusion(exp: Experiment, out: Path) -> dict:
    cfg = exp.cfg
    oc = cfg.occlusion
    dual = Branches.dual(cfg.disruption)
    params, _ = exp.fit(cfg.head_kind, dual, cfg.seed)
    by_id = {r.sample_id: r for r in exp.manifest.records}
    if oc.sample_ids:
        missing = [s for s in oc.sample_ids if s not in by_id]
        if missing:
            raise ConfigError(f"unknown occlusion sample ids {missing}")
        chosen = [by_id[s] for s in oc.sample_ids]
    else:
        firsts, seen = [], set()
        for r in exp.manifest.select(split="test", label="fake"):
            if r.generator_id not in seen:
                seen.add(r.generator_id)
                firsts.append(r)
        chosen = firsts[:oc.count]
    maps = []
    (out / "maps").mkdir(parents=True, exist_ok=True)
    for r in chosen:
        img = render(r, exp.bench)
        seed = derive_seed(r.sample_seed, cfg.seed)
        omap = occlusion_map(params, exp.backbone, img, oc.window, oc.stride, oc.fill, cfg.disruption, seed)
        stem = r.sample_id.replace("/", "_")
        write_gray_png(omap.heatmap(), out / "maps" / f"{stem}.png")
        write_csv(out / "tables" / f"occlusion_{stem}.csv", ["row", "col", "drop"],
                  [[i, j, float(omap.values[i, j])] for i, j, _, _ in omap.cell_boxes()])
        maps.append({"sample_id": r.sample_id, "baseline": omap.baseline, "grid": list(omap.values.shape),
                     "values": omap.values.tolist(), "map": f"maps/{stem}.png"})
    exp.check_backbone_frozen()
    return {"window": oc.window, "stride": oc.stride, "fill": oc.fill, "maps": maps}


RUNNERS = {
    "train_eval": run_train_eval, "scale_sweep": run_scale_sweep,
    "disruption_ablation": run_disruption_ablation, "patch_size_ablation": run_patch_size_ablation,
    "head_ablation": run_head_ablation, "branch_ablation": run_branch_ablation,
    "robustness": run_robustness, "occlusion": run_occlusion,
}


# -- outputs -----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_report(out: Path, exp_or_cfg, command: str, results: dict) -> dict:
    cfg = exp_or_cfg.cfg if isinstance(exp_or_cfg, Experiment) else exp_or_cfg
    report = {"command": command, "config_hash": cfg.config_hash(), "master_seed": cfg.seed,
              "code_version": __version__, "config": cfg.to_dict(), "results": _jsonable(results)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return report


def run_experiment(cfg: ExperimentConfig, kind: str | None = None, out: Path | None = None,
                   verbose: bool = False) -> dict:
    kind = kind or cfg.kind
    out = Path(out or cfg.output_dir)
    exp = Experiment(cfg, verbose)
    results = RUNNERS[kind](exp, out)
    return write_report(out, exp, kind, results)
