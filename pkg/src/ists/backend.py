"""Deterministic DDIM denoising and exact inversion.

Two toy backends are provided. Both have a noise predictor that is linear in
the latent (zero for ``toy-scale``, a seeded circular convolution with
channel mixing for ``toy-linear``), so every DDIM step is a linear map that
is diagonal in the 2-D Fourier basis up to a small per-frequency
channel-mixing matrix.  Inversion solves those per-frequency systems exactly.

External latent diffusion models plug in through :class:`DiffusionAdapter`.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Any, Protocol, runtime_checkable

import numpy as np

from .errors import ArgumentError, BackendError, ConfigError

BACKEND_KINDS = ("toy-scale", "toy-linear", "external-adapter")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative noise coefficients ``alphas[t]`` for ``t = 0..T``."""

    alphas: tuple[float, ...]

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        if a.ndim != 1 or a.size < 2:
            raise ConfigError("schedule needs at least two entries (t=0 and t=T)")
        if a[0] != 1.0:
            raise ConfigError("schedule must satisfy alpha_0 = 1")
        if np.any(a <= 0) or np.any(a > 1):
            raise ConfigError("schedule values must lie in (0, 1]")
        if np.any(np.diff(a) >= 0):
            raise ConfigError("schedule must be strictly decreasing in t")

    @property
    def T(self) -> int:
        return len(self.alphas) - 1

    @classmethod
    def linear(cls, T: int = 50, alpha_end: float = 0.01) -> "NoiseSchedule":
        if T < 1:
            raise ConfigError("T must be a positive integer")
        return cls(tuple(float(x) for x in np.linspace(1.0, alpha_end, T + 1)))

    def step_coefficients(self, t: int) -> tuple[float, float]:
        """Return ``(c_keep, c_eps)`` with ``z_{t-1} = c_keep z_t + c_eps eps``."""
        a_t, a_prev = self.alphas[t], self.alphas[t - 1]
        c_keep = np.sqrt(a_prev / a_t)
        c_eps = np.sqrt(1.0 - a_prev) - np.sqrt(a_prev * (1.0 - a_t) / a_t)
        return float(c_keep), float(c_eps)


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "toy-linear"
    channels: int = 4
    height: int = 64
    width: int = 64
    T: int = 50
    alpha_end: float = 0.01
    linear_op_seed: int = 0
    linear_op_scale: float = 0.05

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigError("latent dimensions must be positive")
        self.schedule  # validates T / alpha_end

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.T, self.alpha_end)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BackendConfig":
        return cls(**d)


@dataclass(frozen=True)
class Latent:
    data: np.ndarray
    timestep: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.data)):
            raise ArgumentError("latent contains non-finite entries")

    def with_data(self, data: np.ndarray) -> "Latent":
        return Latent(data, self.timestep)


def derive_seed(*parts: Any) -> int:
    """Stable 64-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


@dataclass(frozen=True)
class PromptContext:
    prompt: str
    seed: int
    guidance_scale: float = field(default=1.0, compare=False)

    @classmethod
    def from_prompt(cls, prompt: str, run_seed: int) -> "PromptContext":
        return cls(prompt, derive_seed("prompt", prompt, run_seed))


@runtime_checkable
class DiffusionAdapter(Protocol):
    """What an external latent diffusion model must provide."""

    def predict_noise(self, ctx: PromptContext, z: np.ndarray, t: int) -> np.ndarray: ...

    def denoise(self, ctx: PromptContext, z: np.ndarray, t2: int, t1: int) -> np.ndarray: ...

    def invert(self, ctx: PromptContext, z: np.ndarray, t1: int, t2: int) -> np.ndarray: ...


class LinearLatentOp:
    """A real-linear map on latents given by per-frequency channel matrices.

    ``mats`` has shape ``(h, w, C, C)``; the map is
    ``z -> ifft2(mats @ fft2(z))`` applied per frequency.
    """

    def __init__(self, mats: np.ndarray):
        self.mats = mats

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return _apply_freq(self.mats, z)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        return _apply_freq(np.conj(np.swapaxes(self.mats, -1, -2)), r)

    def inverse(self) -> "LinearLatentOp":
        return LinearLatentOp(np.linalg.inv(self.mats))

    def __matmul__(self, other: "LinearLatentOp") -> "LinearLatentOp":
        return LinearLatentOp(self.mats @ other.mats)

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.mats, compute_uv=False).ravel()

    def norm(self) -> float:
        return float(self.singular_values().max())

    def gram_norm(self) -> float:
        """Largest eigenvalue of ``A^T A`` (the Lipschitz constant of ``A^T A x``)."""
        return self.norm() ** 2

    def to_dense(self) -> np.ndarray:
        """Materialise the map as a matrix by applying it to every basis latent."""
        h, w, c, _ = self.mats.shape
        n = c * h * w
        cols = np.empty((n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            cols[:, k] = self(e.reshape(c, h, w)).ravel()
        return cols


def _apply_freq(mats: np.ndarray, z: np.ndarray) -> np.ndarray:
    spec = np.fft.fft2(z, axes=(-2, -1))
    out = np.einsum("hwoi,ihw->ohw", mats, spec)
    res = np.fft.ifft2(out, axes=(-2, -1))
    return res.real if np.isrealobj(z) else res


class DiffusionBackend:
    """Common DDIM machinery. Subclasses supply the noise predictor."""

    kind = "abstract"
    differentiable = False

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        self.schedule = cfg.schedule
        self.T = self.schedule.T

    # -- sampling -------------------------------------------------------
    def sample_initial_noise(self, ctx: PromptContext) -> Latent:
        rng = np.random.default_rng(ctx.seed)
        return Latent(rng.standard_normal(self.cfg.latent_shape), self.T)

    def predict_noise(self, ctx: PromptContext, z: Latent | np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def _check_pair(self, lo: int, hi: int) -> None:
        if not (0 <= lo < hi <= self.T):
            raise ArgumentError(f"need 0 <= t1 < t2 <= {self.T}, got t1={lo}, t2={hi}")

    def ddim_step(self, ctx: PromptContext, z: np.ndarray, t: int) -> np.ndarray:
        c_keep, c_eps = self.schedule.step_coefficients(t)
        return c_keep * z + c_eps * self.predict_noise(ctx, z, t)

    def denoise(self, ctx: PromptContext, z: Latent, t1: int) -> Latent:
        """Run DDIM from ``z.timestep`` down to ``t1``."""
        self._check_pair(t1, z.timestep)
        x = z.data
        for t in range(z.timestep, t1, -1):
            x = self.ddim_step(ctx, x, t)
        return Latent(x, t1)

    def invert(self, ctx: PromptContext, z: Latent, t2: int) -> Latent:
        raise NotImplementedError

    def latent_std(self, t: int) -> np.ndarray:
        """Nominal per-channel std of ``z_t`` when ``z_T`` is standard normal."""
        raise NotImplementedError


class ToyLinearBackend(DiffusionBackend):
    """Noise predictor ``eps(z) = L z`` with ``L`` a seeded 3x3 circular
    convolution that mixes channels."""

    kind = "toy-linear"
    differentiable = True

    def __init__(self, cfg: BackendConfig):
        super().__init__(cfg)
        c, h, w = cfg.latent_shape
        self.kernel = self._make_kernel()
        pad = np.zeros((c, c, h, w))
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                pad[:, :, dy % h, dx % w] += self.kernel[:, :, dy + 1, dx + 1]
        # (h, w, C_out, C_in)
        self.kernel_hat = np.moveaxis(np.fft.fft2(pad, axes=(-2, -1)), (0, 1), (2, 3))
        eye = np.eye(c)
        self._steps = []
        for t in range(1, self.T + 1):
            c_keep, c_eps = self.schedule.step_coefficients(t)
            step = c_keep * eye + c_eps * self.kernel_hat
            cond = np.linalg.cond(step)
            if not np.all(np.isfinite(cond)) or cond.max() > 1e8:
                raise BackendError(f"DDIM step {t} is not invertible (cond={cond.max():.3g})")
            self._steps.append(step)
        self._inv_steps = [np.linalg.inv(m) for m in self._steps]

    def _make_kernel(self) -> np.ndarray:
        c = self.cfg.channels
        rng = np.random.default_rng(self.cfg.linear_op_seed)
        return self.cfg.linear_op_scale * rng.standard_normal((c, c, 3, 3))

    def predict_noise(self, ctx, z, t):
        if not 0 < t <= self.T:
            raise ArgumentError(f"timestep {t} outside (0, {self.T}]")
        x = z.data if isinstance(z, Latent) else z
        return _apply_freq(self.kernel_hat, x)

    def step_op(self, t: int) -> LinearLatentOp:
        return LinearLatentOp(self._steps[t - 1])

    def _run_steps(self, z: np.ndarray, mats) -> np.ndarray:
        # every step is diagonal in frequency, so stay there
        spec = np.fft.fft2(z, axes=(-2, -1))
        for m in mats:
            spec = np.einsum("hwoi,ihw->ohw", m, spec)
        out = np.fft.ifft2(spec, axes=(-2, -1))
        return out.real if np.isrealobj(z) else out

    def denoise(self, ctx, z, t1):
        self._check_pair(t1, z.timestep)
        mats = [self._steps[t - 1] for t in range(z.timestep, t1, -1)]
        return Latent(self._run_steps(z.data, mats), t1)

    def invert(self, ctx, z, t2):
        self._check_pair(z.timestep, t2)
        mats = [self._inv_steps[t - 1] for t in range(z.timestep + 1, t2 + 1)]
        return Latent(self._run_steps(z.data, mats), t2)

    @lru_cache(maxsize=None)
    def denoise_op(self, t2: int, t1: int) -> LinearLatentOp:
        """Composite linear map of ``denoise`` from ``t2`` to ``t1``."""
        self._check_pair(t1, t2)
        c = self.cfg.channels
        mats = np.broadcast_to(np.eye(c, dtype=complex), self._steps[0].shape).copy()
        for t in range(t2, t1, -1):
            mats = self._steps[t - 1] @ mats
        return LinearLatentOp(mats)

    @lru_cache(maxsize=None)
    def invert_op(self, t1: int, t2: int) -> LinearLatentOp:
        return self.denoise_op(t2, t1).inverse()

    @lru_cache(maxsize=None)
    def latent_std(self, t: int) -> np.ndarray:
        if t == self.T:
            return np.ones(self.cfg.channels)
        mats = self.denoise_op(self.T, t).mats
        h, w = self.cfg.height, self.cfg.width
        var = (np.abs(mats) ** 2).sum(axis=(0, 1, 3)) / (h * w)
        return np.sqrt(var)


class ToyScaleBackend(ToyLinearBackend):
    """Zero noise predictor: every DDIM step is a pure rescale."""

    kind = "toy-scale"

    def _make_kernel(self) -> np.ndarray:
        c = self.cfg.channels
        return np.zeros((c, c, 3, 3))

    def predict_noise(self, ctx, z, t):
        if not 0 < t <= self.T:
            raise ArgumentError(f"timestep {t} outside (0, {self.T}]")
        x = z.data if isinstance(z, Latent) else z
        return np.zeros_like(x)


class ExternalBackend(DiffusionBackend):
    """Delegates to a :class:`DiffusionAdapter` (e.g. a wrapped Stable Diffusion)."""

    kind = "external-adapter"

    def __init__(self, cfg: BackendConfig, adapter: DiffusionAdapter | None = None):
        super().__init__(cfg)
        self.adapter = adapter
        self.differentiable = bool(adapter is not None and hasattr(adapter, "vjp"))

    def _require(self) -> DiffusionAdapter:
        if self.adapter is None:
            raise BackendError("external-adapter backend has no adapter attached")
        return self.adapter

    def predict_noise(self, ctx, z, t):
        x = z.data if isinstance(z, Latent) else z
        return np.asarray(self._require().predict_noise(ctx, x, t))

    def denoise(self, ctx, z, t1):
        self._check_pair(t1, z.timestep)
        return Latent(np.asarray(self._require().denoise(ctx, z.data, z.timestep, t1)), t1)

    def invert(self, ctx, z, t2):
        self._check_pair(z.timestep, t2)
        return Latent(np.asarray(self._require().invert(ctx, z.data, z.timestep, t2)), t2)

    def latent_std(self, t):
        # Variance-preserving models keep unit-scale latents at every step.
        return np.ones(self.cfg.channels)


def make_backend(cfg: BackendConfig, adapter: DiffusionAdapter | None = None) -> DiffusionBackend:
    if cfg.kind == "toy-scale":
        return ToyScaleBackend(cfg)
    if cfg.kind == "toy-linear":
        return ToyLinearBackend(cfg)
    return ExternalBackend(cfg, adapter)
