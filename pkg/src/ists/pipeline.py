"""Watermark generation and detection.

:class:`Watermarker` bundles a diffusion backend, an image codec, the ring
pattern key and (for dynamic schemes) a trained selector.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from .backend import DiffusionBackend, Latent, PromptContext
from .codec import ImageCodec, ToyCodec
from .errors import ArgumentError, ConfigError
from .freq import Offset, PatternSpec, extract, inject, make_ring_pattern, offset_pattern
from .metrics import threshold_at_fpr
from .selector import InjectionParams, SelectorModel


@dataclass(frozen=True)
class SchemeConfig:
    dynamic_pattern: bool = True
    dynamic_injection: bool = True
    two_sided: bool = True

    @property
    def needs_selector(self) -> bool:
        return self.dynamic_pattern or self.dynamic_injection

    @property
    def name(self) -> str:
        for k, v in SCHEMES.items():
            if v == self:
                return k
        return "custom-p{:d}i{:d}s{:d}".format(self.dynamic_pattern, self.dynamic_injection, self.two_sided)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


SCHEMES: dict[str, SchemeConfig] = {
    "ists": SchemeConfig(True, True, True),
    "no-dyn-pattern": SchemeConfig(False, True, True),
    "no-dyn-injection": SchemeConfig(True, False, True),
    "one-sided": SchemeConfig(True, True, False),
    "tree-ring": SchemeConfig(False, False, False),
}
ABLATION_SCHEMES = ("ists", "no-dyn-pattern", "no-dyn-injection", "one-sided")


def scheme_by_name(name: str) -> SchemeConfig:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ConfigError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}") from None


@dataclass(frozen=True)
class PatternKey:
    seed: int
    radius: int = 20
    channel: int = 0
    conjugate_symmetric: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DetectionResult:
    d: float
    side: str  # "plus" (matched +W) or "minus" (matched -W)
    threshold: float
    decision: bool
    params_used: InjectionParams
    d_plus: float
    d_minus: float


def deviation(W: np.ndarray, s: np.ndarray, modulus: bool = True) -> float:
    """Mean absolute deviation ``mean |W - s|`` over the mask."""
    diff = W - s
    if modulus:
        return float(np.abs(diff).mean())
    return float((np.abs(diff.real) + np.abs(diff.imag)).mean())


def one_sided_stat(W: np.ndarray, s: np.ndarray, modulus: bool = True) -> float:
    return deviation(W, s, modulus)


def two_sided_stat(W: np.ndarray, s: np.ndarray, modulus: bool = True) -> tuple[float, str]:
    plus = deviation(W, s, modulus)
    minus = deviation(W, -s, modulus)
    return (plus, "plus") if plus <= minus else (minus, "minus")


class Watermarker:
    def __init__(
        self,
        backend: DiffusionBackend,
        key: PatternKey,
        selector: SelectorModel | None = None,
        codec: ImageCodec | None = None,
        modulus: bool = True,
    ):
        self.backend = backend
        self.key = key
        self.selector = selector
        self.codec = codec if codec is not None else ToyCodec.for_backend(backend)
        self.modulus = modulus
        c, h, w = backend.cfg.latent_shape
        if not 0 <= key.channel < c:
            raise ConfigError(f"watermark channel {key.channel} outside [0, {c})")
        self.base = make_ring_pattern(
            key.seed, key.radius, (h, w), key.channel, 1.0, key.conjugate_symmetric
        )
        if selector is not None:
            selector.mapping.validate_for(backend.T, (h, w), key.radius)

    @property
    def T(self) -> int:
        return self.backend.T

    def amplitude(self, t: int) -> float:
        """Ring amplitude matched to the spectral scale of ``z_t``."""
        h, w = self.backend.cfg.height, self.backend.cfg.width
        return math.sqrt(h * w) * float(self.backend.latent_std(t)[self.key.channel])

    def pattern_for(self, params: InjectionParams):
        W = self.base.scaled(self.amplitude(params.t))
        return offset_pattern(W, W.mask, params.l)

    def static_params(self) -> InjectionParams:
        return InjectionParams(self.T, Offset(0, 0))

    def params_for(self, image: np.ndarray, scheme: SchemeConfig) -> InjectionParams:
        if not scheme.needs_selector:
            return self.static_params()
        if self.selector is None:
            raise ConfigError("dynamic schemes need a trained selector")
        chosen = self.selector.select(image)
        t = chosen.t if scheme.dynamic_injection else self.T
        l = chosen.l if scheme.dynamic_pattern else Offset(0, 0)
        return InjectionParams(t, l)

    # -- generation -------------------------------------------------------
    def _to_zero(self, ctx: PromptContext, z: Latent) -> Latent:
        return self.backend.denoise(ctx, z, 0) if z.timestep > 0 else z

    def generate_plain(self, ctx: PromptContext) -> np.ndarray:
        z_T = self.backend.sample_initial_noise(ctx)
        return self.codec.decode(self._to_zero(ctx, z_T))

    def watermark_latent(self, ctx: PromptContext, params: InjectionParams) -> Latent:
        z = self.backend.sample_initial_noise(ctx)
        if params.t < z.timestep:
            z = self.backend.denoise(ctx, z, params.t)
        W_o, M_o = self.pattern_for(params)
        z = inject(z, W_o, M_o, keep_complex=False)
        return self._to_zero(ctx, z)

    def generate_pair(self, ctx: PromptContext, scheme: SchemeConfig):
        """Return ``(plain, watermarked, params)`` from the same initial noise."""
        plain = self.generate_plain(ctx)
        params = self.params_for(plain, scheme)
        wm = self.codec.decode(self.watermark_latent(ctx, params))
        return plain, wm, params

    def generate_watermarked(self, ctx: PromptContext, scheme: SchemeConfig):
        _, wm, params = self.generate_pair(ctx, scheme)
        return wm, params

    # -- detection --------------------------------------------------------
    def score_latent(self, z_t: Latent, params: InjectionParams, scheme: SchemeConfig):
        W_o, M_o = self.pattern_for(params)
        s = extract(z_t, M_o)
        Wv = W_o.plane[M_o.support]
        plus = deviation(Wv, s, self.modulus)
        minus = deviation(Wv, -s, self.modulus)
        if scheme.two_sided and minus < plus:
            return minus, "minus", plus, minus
        return plus, "plus", plus, minus

    def detect(
        self,
        image: np.ndarray,
        scheme: SchemeConfig,
        tau: float = float("inf"),
        ctx: PromptContext | None = None,
        params: InjectionParams | None = None,
    ) -> DetectionResult:
        ctx = ctx or PromptContext("", 0)
        if params is None:
            params = self.params_for(image, scheme)
        z0 = self.codec.encode(image)
        z_t = self.backend.invert(ctx, z0, params.t) if params.t > 0 else z0
        d, side, plus, minus = self.score_latent(z_t, params, scheme)
        return DetectionResult(d, side, tau, d < tau, params, plus, minus)

    def scores(self, images: Sequence[np.ndarray], scheme: SchemeConfig) -> np.ndarray:
        return np.array([self.detect(im, scheme).d for im in images])

    def calibrate_threshold(
        self, benign_images: Sequence[np.ndarray], scheme: SchemeConfig, target_fpr: float = 0.01
    ) -> float:
        return calibrate_threshold(self.scores(benign_images, scheme), target_fpr)


def calibrate_threshold(benign_scores: Sequence[float], target_fpr: float = 0.01) -> float:
    """Threshold with empirical benign FPR <= ``target_fpr`` (decision ``d < tau``).

    Needs at least ``1 / target_fpr`` benign scores.
    """
    scores = np.asarray(benign_scores, dtype=float)
    if not 0 < target_fpr <= 1:
        raise ArgumentError("target_fpr must lie in (0, 1]")
    need = math.ceil(1.0 / target_fpr - 1e-9)
    if len(scores) < need:
        raise ArgumentError(f"{len(scores)} benign scores; need >= {need} for FPR {target_fpr}")
    return threshold_at_fpr(scores, target_fpr)
