"""Procedural real/fake benchmark with planted generator fingerprints.

Every fake image is ``real_base + universal_amplitude * U + specific_amplitude * S_g``
where ``U`` is a grid-aligned periodic pattern shared by all generators and
``S_g`` is a per-generator pattern. Patterns have unit RMS, so amplitudes are in
8-bit gray levels. All synthesis is a pure function of integer seeds.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np

from .imagekit import quantize, read_image

SCHEMA_VERSION = 1
SENSOR_NOISE_SIGMA = 2.0
TEXTURE_STD = 8.0  # shared-luminance 1/f texture (gray levels)
DETAIL_STD = 3.0  # per-channel 1/f texture
SYNTH_VERSION = 2  # bump whenever rendering changes so cached embeddings are invalidated
UNIVERSAL_GRID = 14  # period (px) the universal spikes are harmonics of

Family = Literal["gan_like", "diffusion_like"]
Label = Literal["real", "fake"]
Split = Literal["train", "val", "test"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    generator_id: str
    family: Family
    specific_fingerprint_seed: int
    specific_amplitude: float = 10.0
    universal_amplitude: float = 4.0
    architecture_group: str | None = None
    # (top, left, height, width) as fractions of the image; None = whole frame
    support_box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.family not in ("gan_like", "diffusion_like"):
            raise ManifestError(f"unknown family {self.family!r}")
        if self.specific_amplitude < 0 or self.universal_amplitude < 0:
            raise ManifestError("amplitudes must be non-negative")

    @property
    def group(self) -> str:
        return self.architecture_group or self.generator_id

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["support_box"] is not None:
            d["support_box"] = list(d["support_box"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        if d.get("support_box") is not None:
            d["support_box"] = tuple(float(v) for v in d["support_box"])
        return cls(**d)


@dataclass(frozen=True)
class BenchmarkSpec:
    generators: tuple[GeneratorSpec, ...]
    train_subset: tuple[str, ...]
    samples_per_generator_per_class: int = 200
    image_size: int = 224
    master_seed: int = 0
    validation_fraction: float = 0.10
    train_fraction: float = 0.5
    universal_seed: int = 0

    def __post_init__(self):
        ids = [g.generator_id for g in self.generators]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate generator ids")
        unknown = set(self.train_subset) - set(ids)
        if unknown:
            raise ManifestError(f"train_subset references unknown generators {sorted(unknown)}")
        if len(set(self.train_subset)) != len(self.train_subset):
            raise ManifestError("duplicate ids in train_subset")
        if not 0 < len(self.train_subset) < len(ids):
            raise ManifestError("train subset size k must satisfy 0 < k < N")
        if self.samples_per_generator_per_class < 1:
            raise ManifestError("samples_per_generator_per_class must be positive")
        if not 0 <= self.validation_fraction < 1 or not 0 < self.train_fraction < 1:
            raise ManifestError("fractions out of range")

    def generator(self, generator_id: str) -> GeneratorSpec:
        for g in self.generators:
            if g.generator_id == generator_id:
                return g
        raise KeyError(generator_id)

    @property
    def id_groups(self) -> set[str]:
        """Architecture groups that contain at least one training generator."""
        return {self.generator(g).group for g in self.train_subset}

    def domain(self, generator_id: str) -> str:
        return "ID" if self.generator(generator_id).group in self.id_groups else "OOD"

    def to_dict(self) -> dict:
        return {
            "generators": [g.to_dict() for g in self.generators],
            "train_subset": list(self.train_subset),
            "samples_per_generator_per_class": self.samples_per_generator_per_class,
            "image_size": self.image_size,
            "master_seed": self.master_seed,
            "validation_fraction": self.validation_fraction,
            "train_fraction": self.train_fraction,
            "universal_seed": self.universal_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        d = dict(d)
        d["generators"] = tuple(GeneratorSpec.from_dict(g) for g in d["generators"])
        d["train_subset"] = tuple(d["train_subset"])
        return cls(**d)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    generator_id: str
    label: Label
    split: Split
    architecture_group: str
    sample_seed: int
    path: str | None = None

    @property
    def y(self) -> int:
        return 1 if self.label == "fake" else 0


@dataclass
class Manifest:
    benchmark: BenchmarkSpec
    records: list[SampleRecord] = field(default_factory=list)

    def select(self, split: str | None = None, generators=None, label: str | None = None):
        gens = None if generators is None else set(generators)
        return [r for r in self.records
                if (split is None or r.split == split)
                and (gens is None or r.generator_id in gens)
                and (label is None or r.label == label)]

    def validate(self) -> None:
        ids = {g.generator_id for g in self.benchmark.generators}
        seen = set()
        for r in self.records:
            if r.generator_id not in ids:
                raise ManifestError(f"record {r.sample_id} references unknown generator {r.generator_id}")
            if r.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {r.sample_id}")
            if r.label not in ("real", "fake") or r.split not in ("train", "val", "test"):
                raise ManifestError(f"record {r.sample_id} has invalid label/split")
            if r.split == "train" and r.generator_id not in self.benchmark.train_subset:
                raise ManifestError(f"non-training generator {r.generator_id} has train records")
            seen.add(r.sample_id)
        counts = Counter((r.generator_id, r.label) for r in self.records)
        want = self.benchmark.samples_per_generator_per_class
        for g in sorted(ids):
            for label in ("real", "fake"):
                if counts[(g, label)] != want:
                    raise ManifestError(f"generator {g} has {counts[(g, label)]} {label} records, expected {want}")


# -- seeds -------------------------------------------------------------------

def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


_TAG_REAL, _TAG_UNIVERSAL, _TAG_SPECIFIC, _TAG_MANIFEST = 11, 23, 37, 41


# -- real images -------------------------------------------------------------

@lru_cache(maxsize=4)
def _inv_sqrt_freq(size: int) -> np.ndarray:
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    amp = f ** -0.5
    amp[0, 0] = 0.0
    amp.setflags(write=False)
    return amp


def pink_noise(rng: np.random.Generator, size: int, count: int | None = None) -> np.ndarray:
    """Zero-mean, unit-std field(s) whose power spectrum falls as 1/f."""
    amp = _inv_sqrt_freq(size)
    shape = amp.shape if count is None else (count,) + amp.shape
    spec = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * amp
    field_ = np.fft.irfft2(spec, s=(size, size))
    return field_ / field_.std(axis=(-2, -1), keepdims=True)


def _shape_layer(rng: np.random.Generator, size: int, canvas: np.ndarray) -> None:
    cx, cy = rng.uniform(0, size, 2)
    rx, ry = rng.uniform(0.08, 0.35, 2) * size
    phi = rng.uniform(0, math.pi)
    ellipse = rng.random() < 0.5
    color = rng.uniform(20, 235, 3)
    grad_dir = rng.uniform(0, 2 * math.pi)
    grad = rng.uniform(-0.35, 0.35)
    reach = math.hypot(rx, ry)
    x0, x1 = max(0, int(cx - reach)), min(size, int(cx + reach) + 1)
    y0, y1 = max(0, int(cy - reach)), min(size, int(cy + reach) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    if ellipse:
        mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    else:
        mask = (np.abs(u) <= rx) & (np.abs(v) <= ry)
    shade = 1.0 + grad * (dx * math.cos(grad_dir) + dy * math.sin(grad_dir)) / max(rx, ry)
    region = canvas[y0:y1, x0:x1]
    region[mask] = shade[mask][:, None] * color


def synth_real_float(sample_seed: int, image_size: int = 224) -> np.ndarray:
    """Pre-quantization real image (float64, roughly 0..255)."""
    rng = _rng(_TAG_REAL, sample_seed)
    s = image_size
    fields = pink_noise(rng, s, count=4)
    mean = rng.uniform(70, 185, 3)
    img = mean + TEXTURE_STD * fields[0][..., None] + DETAIL_STD * np.moveaxis(fields[1:], 0, -1)
    for _ in range(int(rng.integers(3, 9))):
        _shape_layer(rng, s, img)
    img += rng.normal(0.0, SENSOR_NOISE_SIGMA, img.shape)
    return img


def synth_real(sample_seed: int, image_size: int = 224) -> np.ndarray:
    return quantize(synth_real_float(sample_seed, image_size))


# -- fingerprints ------------------------------------------------------------

def _unit_rms(p: np.ndarray) -> np.ndarray:
    p = p - p.mean()
    return p / np.sqrt(np.mean(p ** 2))


@lru_cache(maxsize=8)
def universal_pattern(universal_seed: int, image_size: int = 224) -> np.ndarray:
    """Sum of a few frequency spikes on harmonics of a 14-px grid, shared by all generators."""
    rng = _rng(_TAG_UNIVERSAL, universal_seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    out = np.zeros((image_size, image_size, 3))
    for _ in range(3):
        while True:
            mx, my = (int(v) for v in rng.integers(0, UNIVERSAL_GRID // 2 + 1, 2))
            if mx or my:
                break
        phase = rng.uniform(0, 2 * math.pi)
        weights = rng.uniform(0.5, 1.5, 3) * rng.choice([-1.0, 1.0])
        wave = np.cos(2 * math.pi * (mx * xx + my * yy) / UNIVERSAL_GRID + phase)
        out += wave[..., None] * weights
    out = _unit_rms(out)
    out.setflags(write=False)
    return out


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    """Low-frequency positive modulation in [0.4, 1.6]."""
    coarse = rng.uniform(0.4, 1.6, (cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i0 = np.minimum(np.floor(t).astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


@lru_cache(maxsize=64)
def specific_pattern(seed: int, family: str, image_size: int = 224) -> np.ndarray:
    """Generator-specific residual, unit RMS.

    gan_like: a seeded zero-mean 2x2 kernel tiled over the frame (the residual a
    stride-2 transposed convolution leaves), modulated by a smooth field.
    diffusion_like: a few mid-frequency ripples at off-grid frequencies.
    """
    rng = _rng(_TAG_SPECIFIC, seed)
    s = image_size
    if family == "gan_like":
        kernel = rng.standard_normal((2, 2, 3))
        kernel -= kernel.mean(axis=(0, 1), keepdims=True)
        tiled = np.tile(kernel, (s // 2 + 1, s // 2 + 1, 1))[:s, :s]
        out = tiled * _smooth_field(rng, s)[..., None]
    elif family == "diffusion_like":
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        out = np.zeros((s, s, 3))
        for _ in range(3):
            radius = rng.uniform(0.18, 0.32)  # cycles per pixel
            theta = rng.uniform(0, math.pi)
            phase = rng.uniform(0, 2 * math.pi)
            weights = rng.uniform(0.5, 1.5, 3) * rng.choice([-1.0, 1.0])
            wave = np.cos(2 * math.pi * radius * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
            out += wave[..., None] * weights
    else:
        raise ManifestError(f"unknown family {family!r}")
    out = _unit_rms(out)
    out.setflags(write=False)
    return out


def support_mask(box, image_size: int) -> np.ndarray:
    if box is None:
        return np.ones((image_size, image_size), dtype=bool)
    top, left, h, w = box
    mask = np.zeros((image_size, image_size), dtype=bool)
    r0, c0 = int(round(top * image_size)), int(round(left * image_size))
    mask[r0:r0 + int(round(h * image_size)), c0:c0 + int(round(w * image_size))] = True
    return mask


def fingerprint_residual(generator: GeneratorSpec, universal_seed: int, image_size: int = 224) -> np.ndarray:
    """The full additive residual a generator plants (gray levels, float64)."""
    res = np.zeros((image_size, image_size, 3))
    if generator.universal_amplitude:
        res += generator.universal_amplitude * universal_pattern(universal_seed, image_size)
    if generator.specific_amplitude:
        spec = specific_pattern(generator.specific_fingerprint_seed, generator.family, image_size)
        res += generator.specific_amplitude * spec * support_mask(generator.support_box, image_size)[..., None]
    return res


def synth_fake_float(sample_seed: int, generator: GeneratorSpec, universal_seed: int,
                     image_size: int = 224) -> np.ndarray:
    return synth_real_float(sample_seed, image_size) + fingerprint_residual(generator, universal_seed, image_size)


def synth_fake(sample_seed: int, generator: GeneratorSpec, universal_seed: int,
               image_size: int = 224) -> np.ndarray:
    return quantize(synth_fake_float(sample_seed, generator, universal_seed, image_size))


# -- manifests ---------------------------------------------------------------

def default_benchmark(samples_per_generator_per_class: int = 200, master_seed: int = 0,
                      image_size: int = 224, universal_amplitude: float = 4.0,
                      specific_amplitude: float = 10.0) -> BenchmarkSpec:
    """20 generators: 8 training (2 gan_like + 6 diffusion_like) and 12 held out."""
    families = (["gan_like"] * 2 + ["diffusion_like"] * 6      # training pool
                + ["gan_like", "diffusion_like"] * 6)           # held-out pool
    gens = []
    for i, fam in enumerate(families):
        prefix = "gan" if fam == "gan_like" else "dm"
        gens.append(GeneratorSpec(
            generator_id=f"{prefix}{i:02d}", family=fam,
            specific_fingerprint_seed=derive_seed(master_seed, 1000 + i),
            specific_amplitude=specific_amplitude, universal_amplitude=universal_amplitude))
    return BenchmarkSpec(
        generators=tuple(gens),
        train_subset=tuple(g.generator_id for g in gens[:8]),
        samples_per_generator_per_class=samples_per_generator_per_class,
        image_size=image_size, master_seed=master_seed,
        universal_seed=derive_seed(master_seed, 7))


def build_manifest(spec: BenchmarkSpec) -> Manifest:
    n = spec.samples_per_generator_per_class
    train_set = set(spec.train_subset)
    records = []
    for gi, gen in enumerate(spec.generators):
        for li, label in enumerate(("real", "fake")):
            n_train = int(round(spec.train_fraction * n)) if gen.generator_id in train_set else 0
            n_val = int(round(spec.validation_fraction * (n - n_train)))
            for j in range(n):
                split = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
                records.append(SampleRecord(
                    sample_id=f"{gen.generator_id}/{label}/{j:05d}",
                    generator_id=gen.generator_id, label=label, split=split,
                    architecture_group=gen.group,
                    sample_seed=derive_seed(_TAG_MANIFEST, spec.master_seed, gi, li, j)))
    manifest = Manifest(spec, records)
    manifest.validate()
    return manifest


def render(record: SampleRecord, spec: BenchmarkSpec) -> np.ndarray:
    """Materialize one record's image (from disk when the record carries a path)."""
    if record.path is not None:
        return read_image(record.path)
    if record.label == "real":
        return synth_real(record.sample_seed, spec.image_size)
    return synth_fake(record.sample_seed, spec.generator(record.generator_id),
                      spec.universal_seed, spec.image_size)


def _record_to_json(r: SampleRecord) -> dict:
    d = asdict(r)
    if d["path"] is None:
        del d["path"]
    return d


def dumps_manifest(manifest: Manifest) -> str:
    lines = [json.dumps({"schema_version": SCHEMA_VERSION, "benchmark": manifest.benchmark.to_dict()},
                        sort_keys=True)]
    lines += [json.dumps(_record_to_json(r), sort_keys=True) for r in manifest.records]
    return "\n".join(lines) + "\n"


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(dumps_manifest(manifest), encoding="utf-8")


_RECORD_FIELDS = {"sample_id", "generator_id", "label", "split", "architecture_group", "sample_seed"}


def loads_manifest(text: str) -> Manifest:
    lines = text.splitlines()
    if not lines:
        raise ManifestError("line 1: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line 1: invalid JSON header ({exc.msg})") from None
    version = header.get("schema_version") if isinstance(header, dict) else None
    if version != SCHEMA_VERSION:
        raise ManifestError(f"line 1: unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    try:
        bench = BenchmarkSpec.from_dict(header["benchmark"])
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"line 1: malformed benchmark spec ({exc})") from None
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(d, dict) or not _RECORD_FIELDS <= d.keys():
            raise ManifestError(f"line {lineno}: record missing fields {sorted(_RECORD_FIELDS - set(d or {}))}")
        try:
            records.append(SampleRecord(**d))
        except TypeError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
    manifest = Manifest(bench, records)
    manifest.validate()
    return manifest


def load_manifest(path) -> Manifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))


def materialize(manifest: Manifest, out_dir) -> list[Path]:
    """Write every record as PNG under ``out_dir/<generator>/<label>/``."""
    from .imagekit import write_png

    out = Path(out_dir)
    paths = []
    for r in manifest.records:
        p = out / f"{r.sample_id}.png"
        p.parent.mkdir(parents=True, exist_ok=True)
        write_png(render(r, manifest.benchmark), p)
        paths.append(p)
    return paths
