"""Image -> embedding plumbing with an on-disk cache.

A *view* is a named disruption. For every record the pipeline renders the
image, applies the training augmentation (per epoch) or the eval transform,
embeds the result (``orig``) and embeds each requested disruption of that same
augmented image. Views of one record share the augmented image, so the
disruption always follows augmentation.

Randomness is keyed on (sample seed, augmentation seed, epoch, view name), so a
view's embeddings do not depend on which other views are computed alongside.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import ToyBackbone
from .imagekit import AugmentationPolicy, DisruptionSpec, apply_augmentation, apply_disruption, eval_transform
from .synthbench import SYNTH_VERSION, Manifest, SampleRecord, derive_seed, render

ORIG = "orig"
EVAL_EPOCH = 2**20  # epoch key used for eval-path disruptions
_TAG_AUG, _TAG_VIEW = 101, 103


def _view_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def augment_rng(record: SampleRecord, aug_seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(_TAG_AUG, record.sample_seed, aug_seed, epoch))


def view_rng(record: SampleRecord, aug_seed: int, epoch: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(_TAG_VIEW, record.sample_seed, aug_seed, epoch, _view_key(name)))


def prepared_image(record: SampleRecord, manifest: Manifest, policy: AugmentationPolicy,
                   epoch: int | None, aug_seed: int, image: np.ndarray | None = None,
                   degrade: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """The image a record contributes before disruption: augmented for training, eval-transformed otherwise."""
    img = render(record, manifest.benchmark) if image is None else image
    if epoch is None:
        if degrade is not None:
            img = degrade(img)
        return eval_transform(img, policy)
    return apply_augmentation(img, policy, augment_rng(record, aug_seed, epoch))


def embed_views(img: np.ndarray, record: SampleRecord, backbone: ToyBackbone, views: dict[str, DisruptionSpec],
                aug_seed: int, epoch: int | None) -> dict[str, np.ndarray]:
    out = {ORIG: backbone.embed(img)}
    ekey = EVAL_EPOCH if epoch is None else epoch
    for name, spec in views.items():
        if spec.kind == "identity":
            out[name] = out[ORIG].copy()
        else:
            out[name] = backbone.embed(apply_disruption(img, spec, view_rng(record, aug_seed, ekey, name)))
    return out


def compute_embeddings(records: list[SampleRecord], manifest: Manifest, backbone: ToyBackbone,
                       views: dict[str, DisruptionSpec], policy: AugmentationPolicy, aug_seed: int = 0,
                       epoch: int | None = None, images: list[np.ndarray] | None = None,
                       degrade: Callable[[np.ndarray], np.ndarray] | None = None,
                       include_orig: bool = True) -> dict[str, np.ndarray]:
    """Embeddings of every record, ``{view name: (n, D) float32}``, rows in record order."""
    names = ([ORIG] if include_orig else []) + list(views)
    out = {k: np.zeros((len(records), backbone.dim), dtype=np.float32) for k in names}
    for i, r in enumerate(records):
        img = prepared_image(r, manifest, policy, epoch, aug_seed,
                             None if images is None else images[i], degrade)
        emb = embed_views(img, r, backbone, views, aug_seed, epoch)
        for k in names:
            out[k][i] = emb[k]
    return out


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:20]


@dataclass
class EmbeddingStore:
    """Disk-backed cache of per-partition view embeddings.

    A partition is ``train@<epoch>``, ``val`` or ``test``. Entries are keyed by
    the benchmark, backbone, policy, augmentation seed and view definition, so
    stale files are never reused.
    """

    manifest: Manifest
    backbone: ToyBackbone
    policy: AugmentationPolicy
    aug_seed: int = 0
    cache_dir: Path | None = None
    verbose: bool = False

    def __post_init__(self):
        self._mem: dict[tuple[str, str], np.ndarray] = {}
        self._images: dict[str, list[np.ndarray]] = {}
        self._base = {"synth_version": SYNTH_VERSION, "benchmark": self.manifest.benchmark.to_dict(),
                      "records": _digest([r.sample_id + str(r.sample_seed) + str(r.path) for r in self.manifest.records]),
                      "backbone": self.backbone.spec.to_dict(), "backbone_weights": self.backbone.weights_digest(),
                      "policy": self.policy.to_dict(), "aug_seed": self.aug_seed}
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def records(self, split: str) -> list[SampleRecord]:
        return self.manifest.select(split=split)

    def _file(self, partition: str, name: str, spec: DisruptionSpec | None) -> Path | None:
        if self.cache_dir is None:
            return None
        key = _digest({**self._base, "partition": partition, "view": name,
                       "spec": None if spec is None else spec.to_dict()})
        return self.cache_dir / f"{partition.replace('@', '_e')}-{name}-{key}.npy"

    def _split_images(self, split: str) -> list[np.ndarray] | None:
        # only the train split is re-read every epoch; others render on demand to bound memory
        if split != "train":
            return None
        if split not in self._images:
            self._images[split] = [render(r, self.manifest.benchmark) for r in self.records(split)]
        return self._images[split]

    def get(self, partition: str, views: dict[str, DisruptionSpec]) -> dict[str, np.ndarray]:
        """Embeddings for ``orig`` plus ``views`` over one partition."""
        wanted = {ORIG: None, **views}
        out, missing = {}, {}
        for name, spec in wanted.items():
            mem_key = (partition, name if spec is None else name + _digest(spec.to_dict()))
            if mem_key in self._mem:
                out[name] = self._mem[mem_key]
                continue
            f = self._file(partition, name, spec)
            if f is not None and f.exists():
                out[name] = self._mem[mem_key] = np.load(f)
            else:
                missing[name] = spec
        if missing:
            split, _, ep = partition.partition("@")
            epoch = int(ep) if ep else None
            need_orig = ORIG in missing
            new_views = {k: v for k, v in missing.items() if k != ORIG}
            if self.verbose:
                print(f"  embedding {partition}: {sorted(missing)}", flush=True)
            res = compute_embeddings(self.records(split), self.manifest, self.backbone, new_views, self.policy,
                                     self.aug_seed, epoch, images=self._split_images(split), include_orig=need_orig)
            for name, arr in res.items():
                spec = wanted[name]
                self._mem[(partition, name if spec is None else name + _digest(spec.to_dict()))] = arr
                f = self._file(partition, name, spec)
                if f is not None:
                    np.save(f, arr)
                out[name] = arr
        return out

    def release_images(self) -> None:
        self._images.clear()
