"""Image operators: disruptions, degradations and the train/eval resize paths.

Images are plain ``numpy`` arrays of shape ``(H, W, 3)`` and dtype ``uint8``.
Every operator returns a new array and never mutates its input. Arithmetic is
done in float64 and quantized back to 8 bits (round half away from zero) only
at the operator boundary.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

DisruptionKind = Literal[
    "patch_shuffle", "horizontal_flip", "vertical_flip", "random_rotation", "identity"
]
DISRUPTION_KINDS = ("patch_shuffle", "horizontal_flip", "vertical_flip", "random_rotation", "identity")

ROTATION_FILL = 128


class ImageError(ValueError):
    """Raised for malformed images or invalid operator parameters."""


def check_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8:
        raise ImageError("image must be a uint8 numpy array")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"image must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] <= 0 or img.shape[1] <= 0:
        raise ImageError("image must be non-empty")
    return img


def quantize(x: np.ndarray) -> np.ndarray:
    """Round half away from zero and clip to the 8-bit range."""
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class DisruptionSpec:
    kind: DisruptionKind = "patch_shuffle"
    patch_size: int = 14
    rotation_range_deg: tuple[float, float] = (0.0, 180.0)

    def __post_init__(self):
        if self.kind not in DISRUPTION_KINDS:
            raise ImageError(f"unknown disruption kind {self.kind!r}")
        if self.kind == "patch_shuffle" and self.patch_size < 1:
            raise ImageError("patch_size must be >= 1")
        lo, hi = self.rotation_range_deg
        if not (0 <= lo <= hi < 360):
            raise ImageError("rotation_range_deg must lie within [0, 360)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "patch_size": self.patch_size,
                "rotation_range_deg": list(self.rotation_range_deg)}

    @classmethod
    def from_dict(cls, d: dict) -> "DisruptionSpec":
        d = dict(d)
        if "rotation_range_deg" in d:
            d["rotation_range_deg"] = tuple(float(v) for v in d["rotation_range_deg"])
        return cls(**d)


@dataclass(frozen=True)
class AugmentationPolicy:
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.0, 3.0)
    jpeg_prob: float = 0.5
    jpeg_quality_range: tuple[int, int] = (30, 100)
    resize_to: int = 256
    crop_to: int = 224
    crop_mode: Literal["random", "center"] = "random"

    def __post_init__(self):
        for p in (self.blur_prob, self.jpeg_prob):
            if not 0.0 <= p <= 1.0:
                raise ImageError("probabilities must lie in [0, 1]")
        lo, hi = self.jpeg_quality_range
        if not (1 <= lo <= hi <= 100):
            raise ImageError("jpeg_quality_range must lie within [1, 100]")
        s_lo, s_hi = self.blur_sigma_range
        if not (0 <= s_lo <= s_hi):
            raise ImageError("blur_sigma_range must be a non-negative interval")
        if self.crop_to > self.resize_to:
            raise ImageError("crop_to must not exceed resize_to")
        if self.crop_mode not in ("random", "center"):
            raise ImageError(f"unknown crop_mode {self.crop_mode!r}")

    def to_dict(self) -> dict:
        return {"blur_prob": self.blur_prob, "blur_sigma_range": list(self.blur_sigma_range),
                "jpeg_prob": self.jpeg_prob, "jpeg_quality_range": list(self.jpeg_quality_range),
                "resize_to": self.resize_to, "crop_to": self.crop_to, "crop_mode": self.crop_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        d = dict(d)
        if "blur_sigma_range" in d:
            d["blur_sigma_range"] = tuple(float(v) for v in d["blur_sigma_range"])
        if "jpeg_quality_range" in d:
            d["jpeg_quality_range"] = tuple(int(v) for v in d["jpeg_quality_range"])
        return cls(**d)


# -- disruptions -------------------------------------------------------------

def patch_grid(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Split into non-overlapping patches, shape ``(rows*cols, p, p, 3)`` in row-major order."""
    h, w, c = img.shape
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ImageError(f"patch size {patch_size} does not divide image size {w}x{h}")
    rows, cols = h // patch_size, w // patch_size
    return (img.reshape(rows, patch_size, cols, patch_size, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(rows * cols, patch_size, patch_size, c))


def from_patch_grid(patches: np.ndarray, height: int, width: int) -> np.ndarray:
    n, p, _, c = patches.shape
    rows, cols = height // p, width // p
    return (patches.reshape(rows, cols, p, p, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(height, width, c))


def patch_shuffle(img: np.ndarray, patch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Rearrange the non-overlapping patch grid by one uniformly drawn permutation."""
    check_image(img)
    patches = patch_grid(img, patch_size)
    perm = rng.permutation(len(patches))
    return np.ascontiguousarray(from_patch_grid(patches[perm], img.shape[0], img.shape[1]))


def flip(img: np.ndarray, axis: Literal["horizontal", "vertical"]) -> np.ndarray:
    check_image(img)
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1].copy()
    raise ImageError(f"unknown flip axis {axis!r}")


def _bilinear_sample(src: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``src`` (H, W, C float) at real coordinates, clamping to the border."""
    h, w = src.shape[:2]
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def rotate(img: np.ndarray, angle_deg: float, fill: int = ROTATION_FILL) -> np.ndarray:
    """Rotate counter-clockwise about the image center, keeping the frame size.

    Output pixels whose source falls outside the input frame are set to ``fill``.
    """
    check_image(img)
    if angle_deg % 360 == 0:
        return img.copy()
    h, w = img.shape[:2]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse map; y grows downward so a visual CCW turn flips the sin terms
    sx = cos_t * dx - sin_t * dy + cx
    sy = sin_t * dx + cos_t * dy + cy
    eps = 1e-6
    inside = (sx >= -eps) & (sx <= w - 1 + eps) & (sy >= -eps) & (sy <= h - 1 + eps)
    out = _bilinear_sample(img.astype(np.float64), sx, sy)
    out[~inside] = fill
    return quantize(out)


# -- degradations ------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete normalized Gaussian, radius ``ceil(3*sigma)``."""
    if sigma < 0:
        raise ImageError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: off-center taps underflow to 0
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    check_image(img)
    if sigma < 0:
        raise ImageError("sigma must be non-negative")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img.astype(np.float64), k, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
    return quantize(out)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG encode (4:2:0 chroma) and decode with Pillow's libjpeg."""
    check_image(img)
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
        raise ImageError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    buf = io.BytesIO()
    PILImage.fromarray(img, "RGB").save(buf, format="JPEG", quality=int(quality),
                                        subsampling=2, optimize=False, progressive=False)
    buf.seek(0)
    with PILImage.open(buf) as decoded:
        return np.asarray(decoded.convert("RGB"), dtype=np.uint8).copy()


# -- geometry ----------------------------------------------------------------

def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows hold the two bilinear taps for each output coordinate (half-pixel centers)."""
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def resize_bilinear(img: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Bilinear resize with half-pixel centers and no antialiasing."""
    check_image(img)
    width = height if width is None else width
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    my = _interp_matrix(height, h)
    mx = _interp_matrix(width, w)
    out = (my @ img.reshape(h, w * 3).astype(np.float64)).reshape(height, w, 3)
    out = np.matmul(mx, out)  # (W, w) @ (height, w, 3) -> (height, W, 3)
    return quantize(out)


def resize_and_crop(img: np.ndarray, policy: AugmentationPolicy,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Training geometry: resize to ``resize_to`` square, crop ``crop_to`` square."""
    out = resize_bilinear(img, policy.resize_to)
    span = policy.resize_to - policy.crop_to
    if policy.crop_mode == "center" or span == 0:
        top = left = span // 2
    else:
        if rng is None:
            raise ImageError("random crop requires an rng")
        top, left = (int(v) for v in rng.integers(0, span + 1, size=2))
    return out[top:top + policy.crop_to, left:left + policy.crop_to].copy()


def eval_transform(img: np.ndarray, policy: AugmentationPolicy) -> np.ndarray:
    """Validation/test geometry: direct resize to ``crop_to``, nothing else."""
    return resize_bilinear(img, policy.crop_to)


def apply_augmentation(img: np.ndarray, policy: AugmentationPolicy,
                       rng: np.random.Generator) -> np.ndarray:
    """Resize/crop, then blur with ``blur_prob``, then JPEG with ``jpeg_prob``."""
    out = resize_and_crop(img, policy, rng)
    if rng.random() < policy.blur_prob:
        out = gaussian_blur(out, float(rng.uniform(*policy.blur_sigma_range)))
    if rng.random() < policy.jpeg_prob:
        lo, hi = policy.jpeg_quality_range
        out = jpeg_roundtrip(out, int(rng.integers(lo, hi + 1)))
    return out


def apply_disruption(img: np.ndarray, spec: DisruptionSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "identity":
        return img.copy()
    if spec.kind == "patch_shuffle":
        return patch_shuffle(img, spec.patch_size, rng)
    if spec.kind == "horizontal_flip":
        return flip(img, "horizontal")
    if spec.kind == "vertical_flip":
        return flip(img, "vertical")
    lo, hi = spec.rotation_range_deg
    return rotate(img, float(rng.uniform(lo, hi)))


# -- file IO -----------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(img: np.ndarray, path) -> None:
    check_image(img)
    PILImage.fromarray(img, "RGB").save(path, format="PNG")


def write_gray_png(gray: np.ndarray, path) -> None:
    """Save a 2-D uint8 array as an 8-bit grayscale PNG."""
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ImageError("expected a 2-D uint8 array")
    PILImage.fromarray(gray, "L").save(path, format="PNG")
