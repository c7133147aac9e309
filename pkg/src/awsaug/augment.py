"""Augmentation elements, pair operations and the basic CIFAR-style pre-processing.

Images are ``uint8`` arrays of shape ``(H, W, C)`` with ``C`` in ``{1, 3}``.
Every transform returns a new array of the same shape; inputs are never
modified in place.

The search space has 36 elements (14 transform families on a fixed
magnitude grid) and ``K = 36 ** 2`` ordered pair operations.  Operation
``id = 36 * first.index + second.index``.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

N_ELEMENTS = 36
N_OPS = N_ELEMENTS * N_ELEMENTS
DEFAULT_FILL = 128

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


class Kind(enum.Enum):
    HSHEAR = "HShear"
    VSHEAR = "VShear"
    HTRANSLATE = "HTranslate"
    VTRANSLATE = "VTranslate"
    ROTATE = "Rotate"
    COLOR = "Color"
    POSTERIZE = "Posterize"
    SOLARIZE = "Solarize"
    CONTRAST = "Contrast"
    SHARPNESS = "Sharpness"
    BRIGHTNESS = "Brightness"
    AUTOCONTRAST = "Autocontrast"
    EQUALIZE = "Equalize"
    INVERT = "Invert"


GEOMETRIC = frozenset({Kind.HSHEAR, Kind.VSHEAR, Kind.HTRANSLATE, Kind.VTRANSLATE, Kind.ROTATE})

# table order, magnitude ascending within kind
_MAGNITUDE_GRID = (
    (Kind.HSHEAR, (0.1, 0.2, 0.3)),
    (Kind.VSHEAR, (0.1, 0.2, 0.3)),
    (Kind.HTRANSLATE, (0.15, 0.3, 0.45)),
    (Kind.VTRANSLATE, (0.15, 0.3, 0.45)),
    (Kind.ROTATE, (10.0, 20.0, 30.0)),
    (Kind.COLOR, (0.3, 0.6, 0.9)),
    (Kind.POSTERIZE, (4.4, 5.6, 6.8)),
    (Kind.SOLARIZE, (26.0, 102.0, 179.0)),
    (Kind.CONTRAST, (1.3, 1.6, 1.9)),
    (Kind.SHARPNESS, (1.3, 1.6, 1.9)),
    (Kind.BRIGHTNESS, (1.3, 1.6, 1.9)),
    (Kind.AUTOCONTRAST, (None,)),
    (Kind.EQUALIZE, (None,)),
    (Kind.INVERT, (None,)),
)


@dataclass(frozen=True)
class AugmentElement:
    kind: Kind
    magnitude: Optional[float]
    index: int

    def __str__(self) -> str:
        if self.magnitude is None:
            return self.kind.value
        return f"{self.kind.value}({self.magnitude:g})"


@dataclass(frozen=True)
class AugmentOp:
    first: AugmentElement
    second: AugmentElement

    @property
    def id(self) -> int:
        return N_ELEMENTS * self.first.index + self.second.index

    def __str__(self) -> str:
        return f"{self.first}->{self.second}"


def enumerate_elements() -> list[AugmentElement]:
    """Return the 36 candidate elements in table order."""
    out = []
    for kind, mags in _MAGNITUDE_GRID:
        for m in mags:
            out.append(AugmentElement(kind, m, len(out)))
    return out


ELEMENTS: tuple[AugmentElement, ...] = tuple(enumerate_elements())


def decode_op(op_id: int, elements: Sequence[AugmentElement] = ELEMENTS) -> AugmentOp:
    n = len(elements)
    if not 0 <= op_id < n * n:
        raise ValueError(f"operation id {op_id} out of range [0, {n * n})")
    return AugmentOp(elements[op_id // n], elements[op_id % n])


def op_name(op_id: int) -> str:
    return str(decode_op(op_id))


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 image, got {img.dtype}")
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------------------
# geometric transforms: nearest-neighbour inverse mapping, constant fill


@functools.lru_cache(maxsize=512)
def _inverse_map(kind: Kind, value: float, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat source index and validity mask for every output pixel."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if kind is Kind.HSHEAR:
        sy, sx = ys, xs + value * (ys - cy)
    elif kind is Kind.VSHEAR:
        sy, sx = ys + value * (xs - cx), xs
    elif kind is Kind.HTRANSLATE:
        sy, sx = ys, xs - round(value * w)
    elif kind is Kind.VTRANSLATE:
        sy, sx = ys - round(value * h), xs
    elif kind is Kind.ROTATE:
        a = np.deg2rad(value)
        dy, dx = ys - cy, xs - cx
        sx = np.cos(a) * dx + np.sin(a) * dy + cx
        sy = -np.sin(a) * dx + np.cos(a) * dy + cy
    else:
        raise ValueError(f"{kind} is not geometric")
    iy = np.rint(sy).astype(np.int64)
    ix = np.rint(sx).astype(np.int64)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    idx = np.where(valid, iy * w + ix, 0).ravel()
    idx.flags.writeable = False
    valid = valid.ravel()
    valid.flags.writeable = False
    return idx, valid


def geometric(img: np.ndarray, kind: Kind, value: float, fill: int = DEFAULT_FILL) -> np.ndarray:
    """Apply a geometric transform with a signed magnitude (no randomness)."""
    h, w, c = img.shape
    idx, valid = _inverse_map(kind, float(value), h, w)
    out = img.reshape(h * w, c)[idx]
    out[~valid] = fill
    return out.reshape(h, w, c)


# ---------------------------------------------------------------------------
# photometric transforms


def _to_uint8(x: np.ndarray) -> np.ndarray:
    # round half to even, then clamp
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _blend(img: np.ndarray, degenerate: np.ndarray, factor: float) -> np.ndarray:
    return _to_uint8(degenerate + factor * (img.astype(np.float64) - degenerate))


def grayscale(img: np.ndarray) -> np.ndarray:
    """Float luma (0.299, 0.587, 0.114), shape ``(H, W, 1)``."""
    if img.shape[2] == 1:
        return img.astype(np.float64)
    return (img.astype(np.float64) @ _GRAY_WEIGHTS)[..., None]


def color(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(img, grayscale(img), factor)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(img, np.full(img.shape, grayscale(img).mean()), factor)


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(img, np.zeros(img.shape), factor)


def box_smooth(img: np.ndarray) -> np.ndarray:
    """3x3 mean filter with edge-replicated borders."""
    h, w, _ = img.shape
    padded = np.pad(img.astype(np.float64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros(img.shape)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc / 9.0


def sharpness(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(img, box_smooth(img), factor)


def posterize_bits(magnitude: float) -> int:
    return int(round(magnitude))


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    mask = (0xFF << (8 - bits)) & 0xFF
    return img & np.uint8(mask)


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(img >= threshold, 255 - img, img).astype(np.uint8)


def invert(img: np.ndarray) -> np.ndarray:
    return 255 - img


def autocontrast(img: np.ndarray) -> np.ndarray:
    """Per-channel linear remap of [min, max] onto [0, 255]."""
    x = img.astype(np.float64)
    lo = x.min(axis=(0, 1), keepdims=True)
    hi = x.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    flat = span == 0
    scaled = (x - lo) * 255.0 / np.where(flat, 1.0, span)
    return np.where(flat, img, _to_uint8(scaled)).astype(np.uint8)


def equalize(img: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalization.

    Lookup: ``lut[v] = floor(256 * below(v) / N)`` where ``below(v)`` is the
    number of channel pixels strictly less than ``v`` and ``N`` the pixel
    count.  Channels holding a single value are left unchanged.  Because
    the lookup depends only on counts below each value and on ``N``, a
    second application maps every output level to itself, so the transform
    is idempotent.
    """
    h, w, c = img.shape
    n = h * w
    out = np.empty_like(img)
    for ch in range(c):
        plane = img[..., ch]
        hist = np.bincount(plane.ravel(), minlength=256)
        if np.count_nonzero(hist) <= 1:
            out[..., ch] = plane
            continue
        below = np.concatenate(([0], np.cumsum(hist)[:-1]))
        lut = (256 * below) // n
        out[..., ch] = lut[plane].astype(np.uint8)
    return out


# ---------------------------------------------------------------------------


def apply_element(
    img: np.ndarray,
    e: AugmentElement,
    rng: np.random.Generator,
    fill: int = DEFAULT_FILL,
    random_sign: bool = True,
) -> np.ndarray:
    """Apply one element.

    Geometric kinds draw one uniform from ``rng`` to pick the sign of the
    magnitude (unless ``random_sign`` is false); photometric kinds consume
    no randomness.
    """
    k, m = e.kind, e.magnitude
    if k in GEOMETRIC:
        value = m
        if random_sign and rng.random() < 0.5:
            value = -m
        return geometric(img, k, value, fill)
    if k is Kind.COLOR:
        return color(img, m)
    if k is Kind.CONTRAST:
        return contrast(img, m)
    if k is Kind.BRIGHTNESS:
        return brightness(img, m)
    if k is Kind.SHARPNESS:
        return sharpness(img, m)
    if k is Kind.POSTERIZE:
        return posterize(img, posterize_bits(m))
    if k is Kind.SOLARIZE:
        return solarize(img, m)
    if k is Kind.AUTOCONTRAST:
        return autocontrast(img)
    if k is Kind.EQUALIZE:
        return equalize(img)
    if k is Kind.INVERT:
        return invert(img)
    raise ValueError(f"unknown element kind {k}")


def apply_op(
    img: np.ndarray,
    op: AugmentOp | int,
    rng: np.random.Generator,
    fill: int = DEFAULT_FILL,
    random_sign: bool = True,
    elements: Sequence[AugmentElement] = ELEMENTS,
) -> np.ndarray:
    """Apply an operation (or operation id): first element, then second."""
    if not isinstance(op, AugmentOp):
        op = decode_op(int(op), elements)
    out = apply_element(img, op.first, rng, fill, random_sign)
    return apply_element(out, op.second, rng, fill, random_sign)


# ---------------------------------------------------------------------------
# basic pre-processing


@dataclass(frozen=True)
class PreprocessConfig:
    flip_prob: float = 0.5
    pad: int = 4
    cutout: int = 16
    cutout_fill: int = 0


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def random_flip(img: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    if prob > 0 and rng.random() < prob:
        return hflip(img)
    return img


def pad_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad`` on every side and crop back to the original size."""
    if pad <= 0:
        return img
    h, w, _ = img.shape
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
    y, x = rng.integers(0, 2 * pad + 1, size=2)
    return padded[y:y + h, x:x + w].copy()


def cutout(img: np.ndarray, size: int, rng: np.random.Generator, fill: int = 0) -> np.ndarray:
    """Mask a ``size x size`` square centred at a uniform pixel, clipped at the borders."""
    if size <= 0:
        return img
    h, w, _ = img.shape
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1 = max(cy - size // 2, 0), min(cy - size // 2 + size, h)
    x0, x1 = max(cx - size // 2, 0), min(cx - size // 2 + size, w)
    out = img.copy()
    out[y0:y1, x0:x1] = fill
    return out


def preprocess(
    img: np.ndarray,
    cfg: PreprocessConfig,
    rng: np.random.Generator,
    policy: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """flip -> pad + crop -> ``policy`` (if any) -> cutout."""
    out = random_flip(img, cfg.flip_prob, rng)
    out = pad_crop(out, cfg.pad, rng)
    if policy is not None:
        out = policy(out)
    return cutout(out, cfg.cutout, rng, cfg.cutout_fill)


def augment_batch(
    images: np.ndarray,
    op_ids: Optional[np.ndarray],
    cfg: PreprocessConfig,
    rng: np.random.Generator,
    fill: int = DEFAULT_FILL,
    elements: Sequence[AugmentElement] = ELEMENTS,
) -> np.ndarray:
    """Pre-process a stack of images, inserting ``op_ids[i]`` for image ``i`` when given."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        policy = None
        if op_ids is not None:
            op = decode_op(int(op_ids[i]), elements)
            policy = functools.partial(apply_op, op=op, rng=rng, fill=fill, elements=elements)
        out[i] = preprocess(img, cfg, rng, policy)
    return out
