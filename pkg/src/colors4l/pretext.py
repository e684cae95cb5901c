"""Proxy-label generators for the self-supervised branch.

Six geometric classes (four rotations, two flips) plus a seventh class whose
images are re-colorized by the pretrained colorizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ContractError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class ProxyClass(IntEnum):
    ROT0 = 0
    ROT90 = 1
    ROT180 = 2
    ROT270 = 3
    HFLIP = 4
    VFLIP = 5
    COLORIZED = 6


NUM_PROXY_CLASSES = len(ProxyClass)


@dataclass
class ProxyBatch:
    images: np.ndarray  # B x H x W x C float32 in [0, 1]
    labels: np.ndarray  # B proxy class codes


def rotate90(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate counterclockwise by ``k`` quarter turns."""
    return np.ascontiguousarray(np.rot90(image, k % 4, axes=(0, 1)))


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def vflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[::-1])


def grayscale(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luminance of an H x W x 3 image, shape H x W x 1."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ContractError(f"grayscale needs an H x W x 3 image, got shape {image.shape}")
    return grayscale_batch(image[None])[0]


def grayscale_batch(images: np.ndarray) -> np.ndarray:
    if images.shape[-1] != 3:
        raise ContractError(f"grayscale needs 3 channels, got {images.shape[-1]}")
    gray = np.asarray(images, np.float32) @ LUMA_WEIGHTS
    return np.clip(gray, 0.0, 1.0)[..., None]


_GEOMETRIC = {
    ProxyClass.ROT0: lambda x: x.copy(),
    ProxyClass.ROT90: lambda x: rotate90(x, 1),
    ProxyClass.ROT180: lambda x: rotate90(x, 2),
    ProxyClass.ROT270: lambda x: rotate90(x, 3),
    ProxyClass.HFLIP: hflip,
    ProxyClass.VFLIP: vflip,
}


def apply_proxy(image: np.ndarray, cls, colorizer=None) -> np.ndarray:
    """Apply the transform behind proxy class ``cls`` to one float image."""
    cls = ProxyClass(int(cls))
    if cls is not ProxyClass.COLORIZED:
        return _GEOMETRIC[cls](image)
    if colorizer is None:
        raise ConfigError("the colorized proxy class needs a loaded colorizer")
    from .colorizer import colorizer_forward

    return colorizer_forward(colorizer, grayscale(image)[None])[0]


def sample_proxy_batch(images: np.ndarray, rng: np.random.Generator, colorizer=None) -> ProxyBatch:
    """Assign each image a uniformly drawn proxy class and transform it.

    ``images`` is a B x H x W x 3 batch (uint8 or float in [0, 1]).
    """
    if len(images) < 1:
        raise ContractError("proxy batch needs at least one source image")
    if colorizer is None:
        raise ConfigError("proxy sampling draws the colorized class and needs a colorizer")
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / np.float32(255.0)
    labels = rng.integers(0, NUM_PROXY_CLASSES, size=len(images))
    out = np.empty_like(images, dtype=np.float32)
    for i, cls in enumerate(labels):
        if cls != ProxyClass.COLORIZED:
            out[i] = _GEOMETRIC[ProxyClass(int(cls))](images[i])
    colored = np.flatnonzero(labels == ProxyClass.COLORIZED)
    if colored.size:
        from .colorizer import colorizer_forward

        out[colored] = colorizer_forward(colorizer, grayscale_batch(images[colored]))
    return ProxyBatch(out, labels.astype(np.int64))
