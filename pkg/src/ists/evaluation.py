"""Attack/distortion matrices, the component ablation and the injection-step sweep."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .attacks import (
    ATTACK_KINDS,
    FORGERY_ATTACKS,
    REMOVAL_ATTACKS,
    AttackConfig,
    avg_forgery,
    avg_removal,
    avg_residual,
    imp_forgery,
    imp_removal,
    vae_forgery,
    vae_removal,
)
from .backend import DiffusionBackend, PromptContext, make_backend
from .codec import ToyCodec, quantize
from .distortions import DistortionSpec, distort
from .errors import ArgumentError, IstsError
from .freq import FreqMask, Offset, _shift, centred_spectrum, mask_union, ring_mask
from .metrics import auc, psnr, ssim, tpr_at_fpr
from .pipeline import ABLATION_SCHEMES, PatternKey, SchemeConfig, Watermarker, scheme_by_name
from .selector import MappingConfig, SelectorModel, train_selector

log = logging.getLogger(__name__)

CSV_FIELDS = (
    "run_id", "scheme", "attack", "distortion", "n", "auc", "tpr_at_1fpr",
    "psnr_median", "ssim_median", "seed", "status",
)
DEFAULT_SWEEP = tuple((lo, lo + 10) for lo in range(5, 40, 5))


def prompts_for(n: int, prefix: str = "prompt") -> list[str]:
    return [f"{prefix}-{i:04d}" for i in range(n)]


def pmap(fn: Callable, items: Sequence, workers: int = 1) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class Lab:
    """Everything needed to generate, attack and detect on the desk backend."""

    backend: DiffusionBackend
    codec: ToyCodec
    key: PatternKey
    selector: SelectorModel | None
    run_seed: int = 0
    workers: int = 1
    fpr: float = 0.01

    def watermarker(self, selector: SelectorModel | None = None) -> Watermarker:
        return Watermarker(self.backend, self.key, selector or self.selector, self.codec)

    def context(self, prompt: str) -> PromptContext:
        return PromptContext.from_prompt(prompt, self.run_seed)


def build_lab(
    backend_cfg,
    key: PatternKey,
    mapping: MappingConfig,
    permutation_key: str | None,
    train_prompts: Sequence[str],
    run_seed: int = 0,
    selector_mode: str = "nearest-centroid",
    workers: int = 1,
    codec_seed: int = 1,
) -> Lab:
    """Create the backend and codec, then train a selector on ``train_prompts``."""
    backend = make_backend(backend_cfg)
    codec = ToyCodec.for_backend(backend, codec_seed)
    lab = Lab(backend, codec, key, None, run_seed, workers)
    wm = lab.watermarker()
    plains = pmap(lambda p: quantize(wm.generate_plain(lab.context(p))), list(train_prompts), workers)
    feats = np.array([wm_feature(im) for im in plains])
    lab.selector = train_selector(feats, mapping, permutation_key, mode=selector_mode, seed=run_seed)
    return lab


def wm_feature(image):
    from .selector import BlockMeanEncoder

    return BlockMeanEncoder().encode(image)


@dataclass
class PairSet:
    prompts: list[str]
    plain: list[np.ndarray]
    watermarked: list[np.ndarray]
    params: list

    def __len__(self):
        return len(self.prompts)


def generate_pairs(lab: Lab, scheme: SchemeConfig, prompts: Sequence[str], selector=None) -> PairSet:
    wm = lab.watermarker(selector)

    def one(p):
        plain, marked, params = wm.generate_pair(lab.context(p), scheme)
        return quantize(plain), quantize(marked), params

    out = pmap(one, list(prompts), lab.workers)
    return PairSet(list(prompts), [o[0] for o in out], [o[1] for o in out], [o[2] for o in out])


@dataclass
class CellResult:
    scheme: str
    attack: str
    distortion: str
    n: int
    auc: float
    tpr: float
    psnr_median: float
    ssim_median: float
    positives: np.ndarray = field(repr=False, default=None)
    negatives: np.ndarray = field(repr=False, default=None)
    status: str = "ok"

    def row(self, run_id: str, seed: int) -> dict:
        return {
            "run_id": run_id, "scheme": self.scheme, "attack": self.attack,
            "distortion": self.distortion, "n": self.n, "auc": self.auc,
            "tpr_at_1fpr": self.tpr, "psnr_median": self.psnr_median,
            "ssim_median": self.ssim_median, "seed": seed, "status": self.status,
        }


def _quality(src: Sequence[np.ndarray], out: Sequence[np.ndarray]) -> tuple[float, float]:
    p = [psnr(a, b) for a, b in zip(src, out)]
    s = [ssim(a, b) for a, b in zip(src, out)]
    return float(np.median(p)), float(np.median(s))


def attack_images(
    lab: Lab,
    kind: str,
    pairs: PairSet,
    cfg: AttackConfig,
    reference: np.ndarray | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Apply ``kind`` to every pair; returns ``(sources, attacked)``."""
    b, codec = lab.backend, lab.codec
    removal = kind in REMOVAL_ATTACKS
    sources = pairs.watermarked if removal else pairs.plain
    ctxs = [lab.context(p) for p in pairs.prompts]
    if kind.startswith("avg"):
        n = min(cfg.n_pairs, len(pairs))
        delta = avg_residual(pairs.watermarked[:n], pairs.plain[:n])
        fn = avg_removal if removal else avg_forgery
        out = [fn(x, delta) for x in sources]
    elif kind == "imp-removal":
        out = pmap(lambda i: imp_removal(sources[i], ctxs[i], cfg, b, codec).attacked_image, range(len(sources)), lab.workers)
    elif kind == "imp-forgery":
        out = pmap(lambda i: imp_forgery(sources[i], reference, ctxs[i], cfg, b, codec).attacked_image, range(len(sources)), lab.workers)
    elif kind == "vae-removal":
        out = pmap(lambda x: vae_removal(x, cfg, codec).attacked_image, list(sources), lab.workers)
    elif kind == "vae-forgery":
        out = pmap(lambda x: vae_forgery(x, reference, cfg, codec).attacked_image, list(sources), lab.workers)
    else:
        raise ArgumentError(f"unknown attack {kind!r}")
    return list(sources), [quantize(x) for x in out]


def _cell(scheme_name, attack, distortion, pos, neg, fpr, quality) -> CellResult:
    return CellResult(
        scheme_name, attack, distortion, len(pos), auc(pos, neg), tpr_at_fpr(pos, fpr, neg),
        quality[0], quality[1], np.asarray(pos), np.asarray(neg),
    )


def _failed(scheme_name, attack, distortion, n, exc) -> CellResult:
    code = getattr(exc, "code", type(exc).__name__)
    log.warning("cell %s/%s/%s failed: %s", scheme_name, attack, distortion, exc)
    nan = float("nan")
    return CellResult(scheme_name, attack, distortion, n, nan, nan, nan, nan, status=f"failed:{code}")


def run_scheme(
    lab: Lab,
    scheme_name: str,
    prompts: Sequence[str],
    attacks: Iterable[str] = ATTACK_KINDS,
    distortions: Iterable[DistortionSpec] = (),
    attack_cfg: AttackConfig | None = None,
    reference_prompt: str = "reference",
    seed: int = 0,
    selector: SelectorModel | None = None,
    include_original: bool = True,
) -> list[CellResult]:
    scheme = scheme_by_name(scheme_name)
    attack_cfg = attack_cfg or AttackConfig()
    wm = lab.watermarker(selector)
    pairs = generate_pairs(lab, scheme, prompts, selector)
    score = lambda ims: np.array(pmap(lambda im: wm.detect(im, scheme).d, list(ims), lab.workers))
    neg = score(pairs.plain)
    cells: list[CellResult] = []
    if include_original:
        cells.append(_cell(scheme_name, "none", "none", score(pairs.watermarked), neg, lab.fpr,
                           _quality(pairs.plain, pairs.watermarked)))
    reference = None
    attacks = list(attacks)
    if any(k in ("imp-forgery", "vae-forgery") for k in attacks):
        _, reference, _ = wm.generate_pair(lab.context(reference_prompt), scheme)
        reference = quantize(reference)
    for kind in attacks:
        try:
            src, out = attack_images(lab, kind, pairs, replace(attack_cfg, kind=kind), reference)
            cells.append(_cell(scheme_name, kind, "none", score(out), neg, lab.fpr, _quality(src, out)))
        except IstsError as exc:
            cells.append(_failed(scheme_name, kind, "none", len(pairs), exc))
    for i, spec in enumerate(distortions):
        try:
            seeds = [seed * 1_000_003 + 7919 * i + j for j in range(len(pairs))]
            dw = [distort(x, spec, s) for x, s in zip(pairs.watermarked, seeds)]
            dp = [distort(x, spec, s + 104_729) for x, s in zip(pairs.plain, seeds)]
            dw, dp = [quantize(x) for x in dw], [quantize(x) for x in dp]
            cells.append(_cell(scheme_name, "none", spec.label, score(dw), score(dp), lab.fpr,
                               _quality(pairs.watermarked, dw)))
        except IstsError as exc:
            cells.append(_failed(scheme_name, "none", spec.label, len(pairs), exc))
    return cells


def run_matrix(
    lab: Lab,
    schemes: Sequence[str],
    attacks: Sequence[str],
    distortions: Sequence[DistortionSpec],
    prompts: Sequence[str],
    attack_cfg: AttackConfig | None = None,
    seed: int = 0,
) -> list[CellResult]:
    cells = []
    for name in schemes:
        cells.extend(run_scheme(lab, name, prompts, attacks, distortions, attack_cfg, seed=seed))
    return cells


@dataclass(frozen=True)
class Aggregate:
    scheme: str
    group: str  # "removal" or "forgery"
    stat: str  # "average", "worst-case" (min) or "highest" (max)
    auc: float
    tpr: float

    @property
    def attack(self) -> str:
        return f"{self.group}-{self.stat}"


def aggregate(cells: Sequence[CellResult]) -> list[Aggregate]:
    """Per scheme: mean and min (and, for forgery, max) over the attack cells."""
    out = []
    for scheme in dict.fromkeys(c.scheme for c in cells):
        for group, kinds in (("removal", REMOVAL_ATTACKS), ("forgery", FORGERY_ATTACKS)):
            sel = [c for c in cells if c.scheme == scheme and c.attack in kinds and c.distortion == "none"]
            if len(sel) != len(kinds):
                continue
            a = np.array([c.auc for c in sel])
            t = np.array([c.tpr for c in sel])
            out.append(Aggregate(scheme, group, "average", float(np.mean(a)), float(np.mean(t))))
            out.append(Aggregate(scheme, group, "worst-case", float(np.min(a)), float(np.min(t))))
            if group == "forgery":
                out.append(Aggregate(scheme, group, "highest", float(np.max(a)), float(np.max(t))))
    return out


def result_rows(cells: Sequence[CellResult], run_id: str, seed: int) -> list[dict]:
    rows = [c.row(run_id, seed) for c in cells]
    for agg in aggregate(cells):
        rows.append({
            "run_id": run_id, "scheme": agg.scheme, "attack": agg.attack, "distortion": "none",
            "n": "", "auc": agg.auc, "tpr_at_1fpr": agg.tpr, "psnr_median": "",
            "ssim_median": "", "seed": seed, "status": "aggregate",
        })
    return rows


def ablation(lab: Lab, prompts, attack_cfg=None, seed: int = 0) -> list[CellResult]:
    """The four component-ablation rows against all six attacks."""
    return run_matrix(lab, ABLATION_SCHEMES, ATTACK_KINDS, (), prompts, attack_cfg, seed)


def pivot(cells: Sequence[CellResult], metric: str = "auc", columns: Sequence[str] = ATTACK_KINDS) -> list[dict]:
    """Scheme x attack table (no-distortion cells only)."""
    rows = []
    for scheme in dict.fromkeys(c.scheme for c in cells):
        row = {"scheme": scheme}
        for col in columns:
            hit = [c for c in cells if c.scheme == scheme and c.attack == col and c.distortion == "none"]
            row[col] = getattr(hit[0], metric) if hit else float("nan")
        rows.append(row)
    return rows


@dataclass
class SweepResult:
    cells: list[CellResult]
    ranges: list[tuple[int, int]]
    trend: dict[str, float]  # attack -> Spearman rho of AUC vs range start

    def table(self) -> list[dict]:
        rows = []
        for (lo, hi), chunk in zip(self.ranges, _chunks(self.cells, len(self.cells) // len(self.ranges))):
            for c in chunk:
                rows.append({"t_lo": lo, "t_hi": hi, "attack": c.attack, "auc": c.auc, "tpr_at_1fpr": c.tpr})
        return rows


def _chunks(xs, n):
    return [xs[i : i + n] for i in range(0, len(xs), n)]


def step_sweep(
    lab: Lab,
    prompts,
    ranges: Sequence[tuple[int, int]] = DEFAULT_SWEEP,
    attacks: Sequence[str] = ("imp-removal", "imp-forgery"),
    attack_cfg: AttackConfig | None = None,
    seed: int = 0,
) -> SweepResult:
    if lab.selector is None:
        raise ArgumentError("the sweep needs a trained selector")
    cells: list[CellResult] = []
    for lo, hi in ranges:
        if not (1 <= lo < hi < lab.backend.T):
            raise ArgumentError(f"range [{lo}, {hi}] outside [1, {lab.backend.T})")
        sel = lab.selector.with_mapping(replace(lab.selector.mapping, T1=lo, T2=hi))
        cells.extend(run_scheme(lab, "ists", prompts, attacks, (), attack_cfg, seed=seed, selector=sel))
    trend = {}
    per_range = len(cells) // len(ranges)
    starts = [lo for lo, _ in ranges]
    for j, name in enumerate(["none", *attacks]):
        aucs = [cells[k * per_range + j].auc for k in range(len(ranges))]
        rho = spearmanr(starts, aucs).statistic if len(set(aucs)) > 1 else 0.0
        trend[name] = float(rho)
        log.info("sweep trend %s: spearman(range start, AUC) = %.3f", name, rho)
    return SweepResult(cells, list(ranges), trend)


def offset_mask_union(mapping: MappingConfig, key: PatternKey, plane_shape: tuple[int, int]) -> np.ndarray:
    """Support covered by the ring mask at any offset the mapping can emit."""
    masks = []
    base = ring_mask(key.radius, plane_shape, key.channel)
    # the modulo mapping never reaches the upper endpoints
    for lx in range(mapping.lx1, max(mapping.lx2, mapping.lx1 + 1)):
        for ly in range(mapping.ly1, max(mapping.ly2, mapping.ly1 + 1)):
            masks.append(FreqMask(_shift(base.support, Offset(lx, ly), False), key.channel))
    return mask_union(masks)


def residual_mask_energy(residual: np.ndarray, codec, support: np.ndarray, channel: int = 0) -> float:
    """Spectral energy of an image residual's latent on ``support`` (mean ``|.|^2``)."""
    z = codec.encode_linear(np.asarray(residual, dtype=float))
    spec = centred_spectrum(z[channel])
    return float(np.mean(np.abs(spec[support]) ** 2))
