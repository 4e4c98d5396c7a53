"""Image distortions used to probe watermark robustness.

Images are ``(H, W, 3)`` float arrays in ``[0, 1]``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ArgumentError

DISTORTION_KINDS = ("rotation", "noise", "blur", "crop", "jpeg")

DEFAULT_MAGNITUDES = {
    "rotation": 75.0,  # degrees
    "noise": 0.1,  # Gaussian sigma
    "blur": 8,  # filter support in pixels
    "crop": 0.75,  # kept fraction
    "jpeg": 25,  # quality
}


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    magnitude: float | None = None
    crop_by_area: bool = True  # False: magnitude is the kept side fraction

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ArgumentError(f"unsupported distortion {self.kind!r}")
        m = self.value
        ok = {
            "rotation": -360.0 <= m <= 360.0,
            "noise": 0.0 <= m <= 1.0,
            "blur": 1 <= m <= 64,
            "crop": 0.0 < m <= 1.0,
            "jpeg": 1 <= m <= 100,
        }[self.kind]
        if not ok:
            raise ArgumentError(f"magnitude {m} out of range for {self.kind}")

    @property
    def value(self) -> float:
        return DEFAULT_MAGNITUDES[self.kind] if self.magnitude is None else self.magnitude

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.value:g}"


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre, bilinear, zero fill."""
    return np.clip(
        ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0),
        0.0,
        1.0,
    )


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return image.copy()
    return np.clip(image + sigma * rng.standard_normal(image.shape), 0.0, 1.0)


def blur(image: np.ndarray, support: float) -> np.ndarray:
    """Gaussian blur with sigma = support / 6 and a radius of support / 2."""
    sigma = support / 6.0
    radius = int(support // 2)
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), radius=(radius, radius, 0), mode="reflect")


def crop_and_scale(image: np.ndarray, fraction: float, rng: np.random.Generator, by_area: bool = True) -> np.ndarray:
    H, W = image.shape[:2]
    side = np.sqrt(fraction) if by_area else fraction
    ch, cw = max(1, int(round(H * side))), max(1, int(round(W * side)))
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    crop = image[top : top + ch, left : left + cw]
    zoom = (H / ch, W / cw, 1)
    out = ndimage.zoom(crop, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out[:H, :W], 0.0, 1.0)


def jpeg(image: np.ndarray, quality: int, subsampling: int = 0) -> np.ndarray:
    """JPEG round trip; ``subsampling`` uses PIL codes (0 = 4:4:4, 2 = 4:2:0)."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality), subsampling=subsampling)
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=float) / 255.0


def distort(image: np.ndarray, spec: DistortionSpec, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = np.asarray(image, dtype=float)
    m = spec.value
    if spec.kind == "rotation":
        return rotate(x, m)
    if spec.kind == "noise":
        return add_noise(x, m, rng)
    if spec.kind == "blur":
        return blur(x, m)
    if spec.kind == "crop":
        return crop_and_scale(x, m, rng, spec.crop_by_area)
    return jpeg(x, int(m))
