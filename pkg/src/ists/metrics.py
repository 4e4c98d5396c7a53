"""Detection metrics (AUC, TPR at fixed FPR) and image-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata
from skimage.metrics import structural_similarity

from .errors import ArgumentError

_EPS = 1e-12


@dataclass(frozen=True)
class ScoreSet:
    """Detection scores of the watermarked class (positives) and benign class."""

    positives: np.ndarray
    negatives: np.ndarray
    orientation: str = "lower"  # "lower": smaller d means watermarked

    def __post_init__(self):
        object.__setattr__(self, "positives", np.asarray(self.positives, dtype=float))
        object.__setattr__(self, "negatives", np.asarray(self.negatives, dtype=float))
        if self.orientation not in ("lower", "higher"):
            raise ArgumentError("orientation must be 'lower' or 'higher'")
        if not (np.all(np.isfinite(self.positives)) and np.all(np.isfinite(self.negatives))):
            raise ArgumentError("scores must be finite")

    def oriented(self) -> tuple[np.ndarray, np.ndarray]:
        """Scores flipped so that lower always means watermarked."""
        if self.orientation == "lower":
            return self.positives, self.negatives
        return -self.positives, -self.negatives

    def swapped(self) -> "ScoreSet":
        return ScoreSet(self.negatives, self.positives, self.orientation)

    def flipped(self) -> "ScoreSet":
        return ScoreSet(self.positives, self.negatives, "higher" if self.orientation == "lower" else "lower")


def _as_scoreset(scores, negatives=None) -> ScoreSet:
    if isinstance(scores, ScoreSet):
        return scores
    return ScoreSet(scores, negatives)


def _check_nonempty(s: ScoreSet) -> None:
    if s.positives.size == 0 or s.negatives.size == 0:
        raise ArgumentError("both score classes must be non-empty")


def auc(scores: ScoreSet | Sequence[float], negatives: Sequence[float] | None = None) -> float:
    """Mann-Whitney AUC, ties credited one half."""
    s = _as_scoreset(scores, negatives)
    _check_nonempty(s)
    pos, neg = s.oriented()
    n_p, n_n = pos.size, neg.size
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks: half-integers, exact
    twice_u = 2.0 * ranks[n_p:].sum() - n_n * (n_n + 1)
    return float(twice_u / (2.0 * n_p * n_n))


def threshold_at_fpr(negatives: Sequence[float], fpr: float) -> float:
    """Midpoint threshold with empirical FPR ``#{neg < tau} / n <= fpr``.

    Takes the largest distinct benign value ``u`` with ``#{neg <= u}/n <= fpr``
    and returns the midpoint to the next distinct value.  If no value
    qualifies, the smallest benign score is returned (FPR 0); if all do,
    ``+inf``.
    """
    neg = np.asarray(negatives, dtype=float)
    if neg.size == 0:
        raise ArgumentError("need at least one benign score")
    u, counts = np.unique(neg, return_counts=True)
    cum = np.cumsum(counts)
    ok = np.nonzero(cum / neg.size <= fpr + _EPS)[0]
    if ok.size == 0:
        return float(u[0])
    j = ok[-1]
    if j == u.size - 1:
        return float("inf")
    return float((u[j] + u[j + 1]) / 2.0)


def tpr_at_fpr(scores: ScoreSet | Sequence[float], fpr: float = 0.01, negatives=None) -> float:
    s = _as_scoreset(scores, negatives)
    _check_nonempty(s)
    pos, neg = s.oriented()
    tau = threshold_at_fpr(neg, fpr)
    return float(np.mean(pos < tau))


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give ``inf``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_pair(a, b)
    return float(
        structural_similarity(
            a,
            b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
            channel_axis=-1 if a.ndim == 3 else None,
        )
    )
