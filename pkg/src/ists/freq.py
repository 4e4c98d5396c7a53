"""Ring patterns in the centred Fourier plane, offsets, injection and extraction.

Conventions
-----------
* Spectra are centred (``fftshift``) unnormalised forward FFTs with the
  matching ``1/(hw)`` inverse.
* The mask is the disc ``dist < radius`` around ``(h // 2, w // 2)``; ring
  ``r`` is the set of support pixels with ``floor(dist) == r``, so a radius-R
  pattern has R distinct values.
* ``offset_pattern`` with ``l = (l_x, l_y)`` returns
  ``W_o[i, j] = W[i + l_x, j + l_y]``: support moves by ``(-l_x, -l_y)``
  (``l_x`` indexes rows).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backend import Latent
from .errors import ArgumentError


@dataclass(frozen=True)
class Offset:
    lx: int = 0
    ly: int = 0

    def __neg__(self) -> "Offset":
        return Offset(-self.lx, -self.ly)


@dataclass(frozen=True, eq=False)
class FreqMask:
    support: np.ndarray
    channel: int = 0

    def __post_init__(self):
        if self.support.dtype != bool or self.support.ndim != 2:
            raise ArgumentError("mask support must be a 2-D boolean array")

    @property
    def size(self) -> int:
        return int(self.support.sum())

    def __eq__(self, other):
        return (
            isinstance(other, FreqMask)
            and self.channel == other.channel
            and np.array_equal(self.support, other.support)
        )


@dataclass(frozen=True, eq=False)
class PatternSpec:
    seed: int
    radius: int
    channel: int
    plane_shape: tuple[int, int]
    plane: np.ndarray = field(repr=False)  # complex, zero off support
    support: np.ndarray = field(repr=False)
    amplitude: float = 1.0
    conjugate_symmetric: bool = False
    offset: Offset = Offset()

    @property
    def values(self) -> np.ndarray:
        return self.plane[self.support]

    @property
    def mask(self) -> FreqMask:
        return FreqMask(self.support, self.channel)

    def scaled(self, amplitude: float) -> "PatternSpec":
        """Same pattern with a different amplitude."""
        return replace(self, plane=self.plane * (amplitude / self.amplitude), amplitude=amplitude)


def centred_distance(plane_shape: tuple[int, int]) -> np.ndarray:
    h, w = plane_shape
    i, j = np.ogrid[:h, :w]
    return np.sqrt((i - h // 2) ** 2 + (j - w // 2) ** 2)


def ring_mask(radius: int, plane_shape: tuple[int, int], channel: int = 0) -> FreqMask:
    _check_radius(radius, plane_shape)
    return FreqMask(centred_distance(plane_shape) < radius, channel)


def _check_radius(radius: int, plane_shape: tuple[int, int]) -> None:
    if radius < 1:
        raise ArgumentError("radius must be >= 1")
    if radius >= min(plane_shape) / 2:
        raise ArgumentError(f"radius {radius} too large for plane {plane_shape}")


def make_ring_pattern(
    seed: int,
    radius: int = 20,
    plane_shape: tuple[int, int] = (64, 64),
    channel: int = 0,
    amplitude: float = 1.0,
    conjugate_symmetric: bool = False,
) -> PatternSpec:
    """Concentric rings, one standard complex normal value per integer radius.

    With ``conjugate_symmetric`` the ring values are real, which makes the
    centred pattern Hermitian so that it survives real-part truncation.
    """
    _check_radius(radius, plane_shape)
    dist = centred_distance(plane_shape)
    support = dist < radius
    ring = np.floor(dist).astype(int)
    rng = np.random.default_rng(seed)
    if conjugate_symmetric:
        vals = rng.standard_normal(radius).astype(complex)
    else:
        vals = (rng.standard_normal(radius) + 1j * rng.standard_normal(radius)) / np.sqrt(2.0)
    plane = np.zeros(plane_shape, dtype=complex)
    plane[support] = amplitude * vals[ring[support]]
    return PatternSpec(
        seed=seed,
        radius=radius,
        channel=channel,
        plane_shape=tuple(plane_shape),
        plane=plane,
        support=support,
        amplitude=amplitude,
        conjugate_symmetric=conjugate_symmetric,
    )


def _shift(arr: np.ndarray, l: Offset, fill) -> np.ndarray:
    """``out[i, j] = arr[i + lx, j + ly]`` with ``fill`` outside the plane."""
    h, w = arr.shape
    out = np.full_like(arr, fill)
    src_i = slice(max(l.lx, 0), min(h, h + l.lx))
    dst_i = slice(max(-l.lx, 0), min(h, h - l.lx))
    src_j = slice(max(l.ly, 0), min(w, w + l.ly))
    dst_j = slice(max(-l.ly, 0), min(w, w - l.ly))
    out[dst_i, dst_j] = arr[src_i, src_j]
    return out


def offset_pattern(W: PatternSpec, M: FreqMask, l: Offset) -> tuple[PatternSpec, FreqMask]:
    if M.support.shape != W.plane_shape:
        raise ArgumentError("mask and pattern planes differ in shape")
    shifted = _shift(M.support, l, False)
    if shifted.sum() != M.support.sum():
        raise ArgumentError(f"offset {l} pushes the mask out of the {W.plane_shape} plane")
    plane = _shift(W.plane, l, 0)
    total = Offset(W.offset.lx + l.lx, W.offset.ly + l.ly)
    W_o = replace(W, plane=plane, support=shifted, offset=total)
    return W_o, FreqMask(shifted, M.channel)


def centred_spectrum(x: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(x))


def inverse_centred_spectrum(spec: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(spec))


def _check_shapes(z: Latent, M: FreqMask) -> None:
    if z.data.ndim != 3 or z.data.shape[1:] != M.support.shape:
        raise ArgumentError(f"latent spatial shape {z.data.shape[1:]} != mask {M.support.shape}")
    if not 0 <= M.channel < z.data.shape[0]:
        raise ArgumentError(f"channel {M.channel} out of range")


def inject(z: Latent, W: PatternSpec, M: FreqMask, keep_complex: bool = True) -> Latent:
    """Replace the masked spectrum of the watermark channel with ``W``.

    With ``keep_complex`` the exact (generally non-Hermitian) result is kept;
    otherwise the real part is returned.
    """
    _check_shapes(z, M)
    if W.plane_shape != M.support.shape:
        raise ArgumentError("pattern and mask planes differ in shape")
    data = z.data.astype(complex)
    spec = centred_spectrum(data[M.channel])
    spec[M.support] = W.plane[M.support]
    data[M.channel] = inverse_centred_spectrum(spec)
    if not keep_complex:
        data = data.real.copy()
    return Latent(data, z.timestep)


def extract(z: Latent, M: FreqMask) -> np.ndarray:
    """Centred spectrum of the watermark channel on the mask, row-major order."""
    _check_shapes(z, M)
    return centred_spectrum(z.data[M.channel])[M.support]


def mask_union(masks) -> np.ndarray:
    masks = list(masks)
    out = np.zeros_like(masks[0].support)
    for m in masks:
        out |= m.support
    return out
