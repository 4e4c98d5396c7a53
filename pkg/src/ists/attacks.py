"""Removal and forgery attacks through surrogate access.

Imprinting (``imp-*``) attacks descend on a latent perturbation so that the
surrogate's DDIM inversion lands on ``-z_T^w`` (removal) or on a reference
image's ``z_T^w`` (forgery).  Averaging (``avg-*``) attacks add or subtract the
mean watermarked-minus-clean residual.  Encoder (``vae-*``) attacks descend on
a pixel perturbation in the surrogate encoder's latent space with an L2
penalty.

All objectives are squared L2 norms minimised by plain gradient descent at a
fixed step size.  ``lr="auto"`` picks ``1 / L`` where ``L`` is the
objective's smoothness constant (toy surrogates only).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .backend import BackendConfig, DiffusionBackend, PromptContext
from .errors import ArgumentError, AttackUnsupported, ConfigError

ATTACK_KINDS = ("imp-removal", "avg-removal", "vae-removal", "imp-forgery", "avg-forgery", "vae-forgery")
REMOVAL_ATTACKS = ATTACK_KINDS[:3]
FORGERY_ATTACKS = ATTACK_KINDS[3:]

Lr = Union[float, str]


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "imp-removal"
    steps: int = 150
    lr: Lr = 0.01
    lam: float = 5e4
    n_pairs: int = 100
    surrogate: BackendConfig | None = None  # None: same model as the target

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.kind!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if isinstance(self.lr, str):
            if self.lr != "auto":
                raise ConfigError("lr must be a number or 'auto'")
        elif self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be >= 1")

    def to_dict(self):
        return {
            "kind": self.kind, "steps": self.steps, "lr": self.lr, "lam": self.lam,
            "n_pairs": self.n_pairs,
            "surrogate": None if self.surrogate is None else self.surrogate.to_dict(),
        }


@dataclass
class AttackResult:
    attacked_image: np.ndarray
    perturbation_norm: float
    loss_trace: list[float]
    delta: np.ndarray = field(repr=False)


def _descend(grad_and_loss, x0: np.ndarray, steps: int, lr: float):
    delta = np.zeros_like(x0)
    trace = []
    for _ in range(steps):
        loss, g = grad_and_loss(delta)
        trace.append(loss)
        delta = delta - lr * g
    return delta, trace


def _require_linear_inversion(backend: DiffusionBackend):
    if not getattr(backend, "differentiable", False) or not hasattr(backend, "invert_op"):
        raise AttackUnsupported(f"surrogate backend {backend.kind!r} offers no inversion gradients")
    return backend.invert_op(0, backend.T)


def _require_encoder(codec):
    for name in ("encode_linear", "encode_adjoint"):
        if not hasattr(codec, name):
            raise AttackUnsupported("surrogate codec offers no encoder gradients")


def _resolve_lr(lr: Lr, smoothness: float) -> float:
    return 1.0 / smoothness if lr == "auto" else float(lr)


def _imprint(z_start, target, A, steps, lr):
    def grad_and_loss(delta):
        r = A(z_start + delta) - target
        return float((r**2).sum()), 2.0 * A.adjoint(r)

    return _descend(grad_and_loss, z_start, steps, _resolve_lr(lr, 2.0 * A.gram_norm()))


def imp_removal(x_w: np.ndarray, ctx: PromptContext, cfg: AttackConfig, backend: DiffusionBackend, codec) -> AttackResult:
    """Push the surrogate's inverted latent of ``x_w`` towards ``-z_T^w``."""
    A = _require_linear_inversion(backend)
    z0 = codec.encode(x_w).data
    target = -A(z0)
    delta, trace = _imprint(z0, target, A, cfg.steps, cfg.lr)
    out = codec.decode(z0 + delta)
    return AttackResult(out, float(np.linalg.norm(out - x_w)), trace, delta)


def imp_forgery(
    x_c: np.ndarray, x_w_ref: np.ndarray, ctx: PromptContext, cfg: AttackConfig, backend: DiffusionBackend, codec
) -> AttackResult:
    """Pull the inverted latent of ``x_c`` onto the reference's ``z_T^w``."""
    A = _require_linear_inversion(backend)
    z0 = codec.encode(x_c).data
    target = A(codec.encode(x_w_ref).data)
    delta, trace = _imprint(z0, target, A, cfg.steps, cfg.lr)
    out = codec.decode(z0 + delta)
    return AttackResult(out, float(np.linalg.norm(out - x_c)), trace, delta)


def avg_residual(watermarked: Sequence[np.ndarray], clean: Sequence[np.ndarray]) -> np.ndarray:
    if len(watermarked) != len(clean):
        raise ArgumentError(f"{len(watermarked)} watermarked vs {len(clean)} clean images")
    if len(watermarked) == 0:
        raise ArgumentError("need at least one pair")
    w = np.asarray(watermarked, dtype=float)
    c = np.asarray(clean, dtype=float)
    return (w.sum(axis=0) - c.sum(axis=0)) / len(w)


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise ArgumentError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def avg_removal(x_w: np.ndarray, delta: np.ndarray) -> np.ndarray:
    _check_same(x_w, delta)
    return np.clip(x_w - delta, 0.0, 1.0)


def avg_forgery(x_c: np.ndarray, delta: np.ndarray) -> np.ndarray:
    _check_same(x_c, delta)
    return np.clip(x_c + delta, 0.0, 1.0)


def _encoder_attack(x, target_image, cfg: AttackConfig, codec) -> AttackResult:
    _require_encoder(codec)
    x = np.asarray(x, dtype=float)
    e_target = codec.encode_linear(np.asarray(target_image, dtype=float) - 0.5)
    e_x = codec.encode_linear(x - 0.5)

    def grad_and_loss(delta):
        r = e_x + codec.encode_linear(delta) - e_target
        loss = float((r**2).sum() + cfg.lam * (delta**2).sum())
        return loss, 2.0 * codec.encode_adjoint(r) + 2.0 * cfg.lam * delta

    smooth = 2.0 * (codec.encoder_norm() ** 2 + cfg.lam)
    delta, trace = _descend(grad_and_loss, x, cfg.steps, _resolve_lr(cfg.lr, smooth))
    out = np.clip(x + delta, 0.0, 1.0)
    return AttackResult(out, float(np.linalg.norm(out - x)), trace, delta)


def vae_removal(x_w: np.ndarray, cfg: AttackConfig, codec) -> AttackResult:
    """Match the encoding of the flat image at ``x_w``'s mean value."""
    mu = np.full_like(np.asarray(x_w, dtype=float), float(np.mean(x_w)))
    return _encoder_attack(x_w, mu, cfg, codec)


def vae_forgery(x_c: np.ndarray, x_w_ref: np.ndarray, cfg: AttackConfig, codec) -> AttackResult:
    return _encoder_attack(x_c, x_w_ref, cfg, codec)


def sign_flip_oracle(x_w: np.ndarray, t: int, ctx: PromptContext, backend: DiffusionBackend, codec) -> np.ndarray:
    """Idealised removal: negate the inverted latent at step ``t`` and regenerate.

    This is the exact target of ``imp-removal`` when the attacker also knows
    the injection step.
    """
    z0 = codec.encode(x_w)
    z_t = backend.invert(ctx, z0, t) if t > 0 else z0
    flipped = z_t.with_data(-z_t.data)
    return codec.decode(backend.denoise(ctx, flipped, 0) if t > 0 else flipped)
