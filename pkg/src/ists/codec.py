"""Latent <-> image codecs.

The toy codec turns a ``(C, h, w)`` latent into a ``(2h, 2w, 3)`` RGB image:
each latent pixel becomes a 2x2 RGB block through a fixed matrix with
orthonormal columns, so ``encode(decode(z)) == z`` whenever no clipping
happened.  By default the first three channels are constant over each block
(spatially smooth, like a VAE decoder); ``smooth=False`` uses a seeded random
matrix instead.  A VAE adapter can replace it for real models.
"""
from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from .backend import DiffusionBackend, Latent
from .errors import ArgumentError

PIXEL_STD = 0.1


@runtime_checkable
class ImageCodec(Protocol):
    def encode(self, image: np.ndarray) -> Latent: ...

    def decode(self, z: Latent | np.ndarray) -> np.ndarray: ...


class ToyCodec:
    """Seeded block-linear codec with a 0.5 grey offset and clamp to [0, 1]."""

    differentiable = True

    def __init__(self, channels: int, height: int, width: int, latent_scale: float, seed: int = 1,
                 smooth: bool = True):
        if channels > 12:
            raise ArgumentError("toy codec supports at most 12 latent channels")
        self.channels, self.height, self.width = channels, height, width
        self.smooth = smooth
        self.proj = _smooth_projection(channels, seed) if smooth else _random_projection(channels, seed)
        # rows of an orthonormal-column 12xC matrix carry C/12 of the energy
        self.gain = PIXEL_STD / (latent_scale * np.sqrt(channels / 12.0))

    @classmethod
    def for_backend(cls, backend: DiffusionBackend, seed: int = 1, smooth: bool = True) -> "ToyCodec":
        c, h, w = backend.cfg.latent_shape
        scale = float(np.mean(backend.latent_std(0)))
        return cls(c, h, w, scale, seed, smooth)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (2 * self.height, 2 * self.width, 3)

    def _pack(self, v: np.ndarray) -> np.ndarray:
        h, w = self.height, self.width
        return v.reshape(h, w, 2, 2, 3).transpose(0, 2, 1, 3, 4).reshape(2 * h, 2 * w, 3)

    def _unpack(self, x: np.ndarray) -> np.ndarray:
        h, w = self.height, self.width
        if x.shape != self.image_shape:
            raise ArgumentError(f"image shape {x.shape} != {self.image_shape}")
        return x.reshape(h, 2, w, 2, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, 12)

    # linear parts (no offset, no clamp); used for gradients
    def decode_linear(self, z: np.ndarray) -> np.ndarray:
        v = np.einsum("kc,chw->hwk", self.proj, z)
        return self._pack(v) * self.gain

    def encode_linear(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("kc,hwk->chw", self.proj, self._unpack(x)) / self.gain

    def encode_adjoint(self, g: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`encode_linear` (latent gradient -> pixel gradient)."""
        v = np.einsum("kc,chw->hwk", self.proj, g)
        return self._pack(v) / self.gain

    def encoder_norm(self) -> float:
        """Operator norm of :meth:`encode_linear` (columns of ``proj`` are orthonormal)."""
        return 1.0 / self.gain

    def encode(self, image: np.ndarray) -> Latent:
        return Latent(self.encode_linear(np.asarray(image, dtype=float) - 0.5), 0)

    def decode(self, z: Latent | np.ndarray) -> np.ndarray:
        data = z.data if isinstance(z, Latent) else z
        return np.clip(0.5 + self.decode_linear(np.real(data)), 0.0, 1.0)


def _random_projection(channels: int, seed: int) -> np.ndarray:
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((12, channels)))
    return q  # (12, C), orthonormal columns


def _smooth_projection(channels: int, seed: int) -> np.ndarray:
    """Orthonormal columns; channel 0 is block-constant grey, 1-2 block-constant
    chroma, the rest intra-block detail (like a VAE whose first latent channel
    tracks luminance)."""
    rng = np.random.default_rng(seed)
    grey = np.ones(3) / np.sqrt(3.0)
    chroma, _ = np.linalg.qr(np.column_stack([grey, rng.standard_normal((3, 2))]))
    colours = np.column_stack([grey, chroma[:, 1:]])
    flat = np.kron(np.ones((4, 1)) / 2.0, colours)  # (12, 3), constant over the 2x2 block
    basis, _ = np.linalg.qr(np.column_stack([flat, rng.standard_normal((12, 9))]))
    detail = basis[:, 3:] @ np.linalg.qr(rng.standard_normal((9, 9)))[0]
    return np.column_stack([flat, detail])[:, :channels]


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
