"""Frozen feature extractors and the binary embedding-file format.

The toy backbone is a bag of patch features with positional mixing::

    half_raw = mean_p tanh(P_raw @ pixels_p  + pos_p)
    half_hp  = mean_p tanh(P_hp  @ highpass_p + pos_p)
    embed    = concat(half_raw, half_hp)

``highpass`` is the image minus its 3x3 box blur. ``pos`` is a fixed sinusoid
of the centered patch coordinates, odd under point reflection so a featureless
image pools to exactly zero in the high-pass half. With ``flip_invariant`` the
embedding is averaged with that of the mirrored image, mimicking backbones that
were trained with horizontal-flip augmentation.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Literal

import numpy as np
from scipy import ndimage

from .imagekit import DisruptionSpec, apply_disruption, check_image, patch_grid


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    kind: Literal["toy", "file"] = "toy"
    toy_patch_size: int = 14
    out_dim: int = 64
    weights_seed: int = 0
    flip_invariant: bool = True
    pos_scale: float = 1.0
    hp_scale: float = 6.0  # gray levels mapped to unit high-pass input
    embeddings_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("toy", "file"):
            raise BackboneError(f"unknown backbone kind {self.kind!r}")
        if self.out_dim < 2 or self.out_dim % 2:
            raise BackboneError("out_dim must be a positive even number")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)


@dataclass
class EmbeddingPair:
    original: np.ndarray
    disrupted: np.ndarray
    label: int
    generator_id: str
    sample_id: str = ""

    def __post_init__(self):
        if self.original.shape != self.disrupted.shape or self.original.ndim != 1:
            raise BackboneError("embedding pair must hold two vectors of equal dim")


class ToyBackbone:
    """Deterministic random-projection embedder; weights are read-only after construction."""

    def __init__(self, spec: BackboneSpec = BackboneSpec()):
        if spec.kind != "toy":
            raise BackboneError("ToyBackbone requires kind='toy'")
        self.spec = spec
        p = spec.toy_patch_size
        half = spec.out_dim // 2
        n_in = p * p * 3
        rng = np.random.default_rng(np.random.SeedSequence([spec.weights_seed, 0xD3]))
        self.proj_raw = (rng.standard_normal((n_in, half)) * (2.0 / np.sqrt(n_in))).astype(np.float32)
        self.proj_hp = (rng.standard_normal((n_in, half)) * (1.0 / np.sqrt(n_in))).astype(np.float32)
        self.freqs = rng.uniform(0.15, 0.9, (2, spec.out_dim)).astype(np.float32)
        self.phase_sign = rng.choice([-1.0, 1.0], spec.out_dim).astype(np.float32)
        for arr in (self.proj_raw, self.proj_hp, self.freqs, self.phase_sign):
            arr.setflags(write=False)
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.spec.out_dim

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.proj_raw, self.proj_hp, self.freqs, self.phase_sign):
            h.update(arr.tobytes())
        return h.hexdigest()

    def positional(self, rows: int, cols: int) -> np.ndarray:
        """Per-patch positional vectors, shape (rows*cols, out_dim)."""
        key = (rows, cols)
        if key not in self._pos_cache:
            r = np.arange(rows, dtype=np.float32) - (rows - 1) / 2
            c = np.arange(cols, dtype=np.float32) - (cols - 1) / 2
            rr, cc = np.meshgrid(r, c, indexing="ij")
            arg = rr.reshape(-1, 1) * self.freqs[0] + self.phase_sign * cc.reshape(-1, 1) * self.freqs[1]
            pos = (self.spec.pos_scale * np.sin(arg)).astype(np.float32)
            pos.setflags(write=False)
            self._pos_cache[key] = pos
        return self._pos_cache[key]

    def _features(self, img: np.ndarray) -> np.ndarray:
        x = img.astype(np.float32)
        blurred = ndimage.uniform_filter(x, size=(3, 3, 1), mode="nearest")
        hp = (x - blurred) / np.float32(self.spec.hp_scale)
        raw = (x - np.float32(127.5)) / np.float32(64.0)
        p = self.spec.toy_patch_size
        n = (img.shape[0] // p) * (img.shape[1] // p)
        pos = self.positional(img.shape[0] // p, img.shape[1] // p)
        half = self.spec.out_dim // 2
        a = np.tanh(patch_grid(raw, p).reshape(n, -1) @ self.proj_raw + pos[:, :half])
        b = np.tanh(patch_grid(hp, p).reshape(n, -1) @ self.proj_hp + pos[:, half:])
        return np.concatenate([a.mean(axis=0), b.mean(axis=0)])

    def embed(self, img: np.ndarray) -> np.ndarray:
        check_image(img)
        p = self.spec.toy_patch_size
        if img.shape[0] % p or img.shape[1] % p:
            raise BackboneError(f"toy patch size {p} does not divide image size {img.shape[1]}x{img.shape[0]}")
        feats = self._features(img)
        if self.spec.flip_invariant:
            feats = 0.5 * (feats + self._features(img[:, ::-1]))
        return feats.astype(np.float32)

    def embed_pair(self, img: np.ndarray, disruption: DisruptionSpec, rng: np.random.Generator,
                   label: int = 0, generator_id: str = "", sample_id: str = "") -> EmbeddingPair:
        e_o = self.embed(img)
        e_s = e_o.copy() if disruption.kind == "identity" else self.embed(apply_disruption(img, disruption, rng))
        return EmbeddingPair(e_o, e_s, label, generator_id, sample_id)


def make_backbone(spec: BackboneSpec) -> ToyBackbone:
    if spec.kind == "file":
        raise BackboneError("file backbones provide embeddings only; use load_embeddings")
    return ToyBackbone(spec)


# -- embedding files ---------------------------------------------------------

MAGIC = b"D3EB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")


class EmbeddingFileError(BackboneError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_embeddings(pairs: Iterable[EmbeddingPair], path) -> int:
    pairs = list(pairs)
    dim = pairs[0].original.shape[0] if pairs else 0
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, dim, len(pairs))]
    for pr in pairs:
        if pr.original.shape[0] != dim:
            raise EmbeddingFileError("inconsistent embedding dims")
        chunks.append(_pack_str(pr.sample_id))
        chunks.append(_pack_str(pr.generator_id))
        chunks.append(struct.pack("<B", int(pr.label)))
        chunks.append(np.concatenate([pr.original, pr.disrupted]).astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    return len(pairs)


def _read_exact(buf: memoryview, offset: int, n: int, what: str) -> tuple[memoryview, int]:
    if offset + n > len(buf):
        raise EmbeddingFileError(f"truncated file while reading {what} at byte {offset}")
    return buf[offset:offset + n], offset + n


def iter_embeddings(path) -> Iterator[EmbeddingPair]:
    buf = memoryview(Path(path).read_bytes())
    head, off = _read_exact(buf, 0, _HEADER.size, "header")
    magic, version, dim, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise EmbeddingFileError(f"bad magic {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise EmbeddingFileError(f"unsupported embedding file version {version}")

    def read_str(off, what):
        raw, off = _read_exact(buf, off, 4, what)
        (n,) = struct.unpack("<I", raw)
        raw, off = _read_exact(buf, off, n, what)
        return bytes(raw).decode("utf-8"), off

    for i in range(count):
        sid, off = read_str(off, f"record {i} sample_id")
        gid, off = read_str(off, f"record {i} generator_id")
        raw, off = _read_exact(buf, off, 1, f"record {i} label")
        label = raw[0]
        raw, off = _read_exact(buf, off, 8 * dim, f"record {i} vectors")
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        yield EmbeddingPair(vec[:dim].copy(), vec[dim:].copy(), int(label), gid, sid)
    if off != len(buf):
        raise EmbeddingFileError(f"{len(buf) - off} trailing bytes after {count} records")


def load_embeddings(path) -> list[EmbeddingPair]:
    return list(iter_embeddings(path))
