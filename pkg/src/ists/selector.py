"""Instance-specific parameter selection.

Image -> feature -> cluster label (nearest centroid or a small trained
network) -> secret permutation -> modulo mapping to ``(t, l)``.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Any, Protocol, Sequence, runtime_checkable

import numpy as np

from .backend import derive_seed
from .errors import ArgumentError, ConfigError, KeyFileError
from .freq import Offset

SELECTOR_MAGIC = "ISTS-SELECTOR"
SELECTOR_VERSION = 1


@dataclass(frozen=True)
class MappingConfig:
    C: int = 1024
    T1: int = 10
    T2: int = 20
    lx1: int = -12
    lx2: int = 12
    ly1: int = -12
    ly2: int = 12
    # "ly" divides by the l_y range width as printed; "lx" uses the l_x width
    # (row-major unfolding of the offset grid).
    ly_divisor: str = "ly"

    def __post_init__(self):
        if self.C < 1:
            raise ConfigError("C must be >= 1")
        if not self.T1 < self.T2:
            raise ConfigError("need T1 < T2")
        if self.lx2 < self.lx1 or self.ly2 < self.ly1:
            raise ConfigError("offset ranges must satisfy lower <= upper")
        if self.ly_divisor not in ("ly", "lx"):
            raise ConfigError("ly_divisor must be 'ly' or 'lx'")

    def validate_for(self, T: int, plane_shape: tuple[int, int] | None = None, radius: int | None = None):
        if self.T2 > T:
            raise ConfigError(f"T2={self.T2} exceeds the backend's T={T}")
        if self.T1 < 1:
            raise ConfigError("T1 must be >= 1")
        if plane_shape is not None and radius is not None:
            h, w = plane_shape
            for lx in (self.lx1, self.lx2):
                if not (0 <= h // 2 - lx - radius + 1 and h // 2 - lx + radius - 1 < h):
                    raise ConfigError(f"l_x={lx} pushes a radius-{radius} mask off a height-{h} plane")
            for ly in (self.ly1, self.ly2):
                if not (0 <= w // 2 - ly - radius + 1 and w // 2 - ly + radius - 1 < w):
                    raise ConfigError(f"l_y={ly} pushes a radius-{radius} mask off a width-{w} plane")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MappingConfig":
        return cls(**d)


@dataclass(frozen=True)
class InjectionParams:
    t: int
    l: Offset = Offset()

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.t, self.l.lx, self.l.ly)


def map_params(y: int, cfg: MappingConfig) -> InjectionParams:
    if not 0 <= y < cfg.C:
        raise ArgumentError(f"label {y} outside [0, {cfg.C})")
    wx = cfg.lx2 - cfg.lx1
    wy = cfg.ly2 - cfg.ly1
    t = cfg.T1 + y % (cfg.T2 - cfg.T1)
    lx = cfg.lx1 + (y % wx if wx else 0)
    div = wy if cfg.ly_divisor == "ly" else wx
    ly = cfg.ly1 + ((y // div) % wy if wy and div else 0)
    return InjectionParams(t, Offset(lx, ly))


# -- features -----------------------------------------------------------------


@runtime_checkable
class FeatureEncoder(Protocol):
    def encode(self, image: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class BlockMeanEncoder:
    """Per-channel means over ``block x block`` tiles, flattened and L2-normalised."""

    block: int = 8

    def encode(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, dtype=float)
        if x.ndim == 2:
            x = x[..., None]
        H, W, C = x.shape
        b = self.block
        if H % b or W % b:
            raise ArgumentError(f"image {H}x{W} is not divisible into {b}x{b} blocks")
        feat = x.reshape(H // b, b, W // b, b, C).mean(axis=(1, 3)).ravel()
        n = np.linalg.norm(feat)
        if n == 0:
            return np.full(feat.shape, 1.0 / np.sqrt(feat.size))
        return feat / n

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "block-mean", "block": self.block}


def encoder_from_dict(d: dict[str, Any]) -> FeatureEncoder:
    if d.get("kind") != "block-mean":
        raise ConfigError(f"unsupported feature encoder {d.get('kind')!r}; attach an adapter")
    return BlockMeanEncoder(int(d["block"]))


# -- k-means ------------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list[float]
    n_iter: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X**2).sum(1)[:, None] - 2 * X @ C.T + (C**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx : idx + 1])[:, 0])
    return np.array(centers)


def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-4) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iter`` iterations or when the centroid shift relative
    to the centroid norm drops below ``tol``.  Empty clusters keep their
    previous centroid.
    """
    X = np.asarray(X, dtype=float)
    if len(X) < k:
        raise ArgumentError(f"{len(X)} samples cannot fill {k} clusters")
    rng = np.random.default_rng(seed)
    cent = kmeans_pp_init(X, k, rng)
    history: list[float] = []
    labels = np.zeros(len(X), dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, cent)
        labels = d.argmin(axis=1)
        inertia = float(d[np.arange(len(X)), labels].sum())
        if history and inertia > history[-1] * (1 + 1e-9) + 1e-12:
            raise RuntimeError(f"k-means objective increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        new = cent.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
        shift = np.linalg.norm(new - cent) / max(np.linalg.norm(cent), 1e-12)
        cent = new
        if shift < tol:
            break
    d = _sq_dists(X, cent)
    labels = d.argmin(axis=1)
    final = float(d[np.arange(len(X)), labels].sum())
    if final > history[-1] * (1 + 1e-9) + 1e-12:
        raise RuntimeError("k-means objective increased on the final assignment")
    history.append(final)
    return KMeansResult(cent, labels, history, it)


# -- classifier ---------------------------------------------------------------


class TwoLayerNet:
    """affine(d, d) -> ReLU -> batch-norm -> dropout -> affine(d, C)."""

    def __init__(self, d: int, n_classes: int, seed: int = 0, dropout: float = 0.5, eps: float = 1e-5):
        rng = np.random.default_rng(seed)
        self.W1 = rng.standard_normal((d, d)) * np.sqrt(2.0 / d)
        self.b1 = np.zeros(d)
        self.gamma = np.ones(d)
        self.beta = np.zeros(d)
        self.W2 = rng.standard_normal((d, n_classes)) * np.sqrt(1.0 / d)
        self.b2 = np.zeros(n_classes)
        self.run_mean = np.zeros(d)
        self.run_var = np.ones(d)
        self.dropout = dropout
        self.eps = eps
        self._rng = np.random.default_rng(derive_seed("dropout", seed))

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("W1", "b1", "gamma", "beta", "W2", "b2", "run_mean", "run_var")}

    def load_params(self, p: dict[str, np.ndarray]) -> None:
        for k, v in p.items():
            setattr(self, k, np.array(v, dtype=float))

    def forward(self, X: np.ndarray, train: bool = False, drop_mask: np.ndarray | None = None):
        h = X @ self.W1 + self.b1
        a = np.maximum(h, 0.0)
        if train:
            mu, var = a.mean(0), a.var(0)
        else:
            mu, var = self.run_mean, self.run_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (a - mu) * inv
        y = self.gamma * xhat + self.beta
        if train and self.dropout > 0:
            if drop_mask is None:
                drop_mask = (self._rng.random(y.shape) >= self.dropout) / (1.0 - self.dropout)
            y = y * drop_mask
        logits = y @ self.W2 + self.b2
        cache = (X, h, a, xhat, inv, y, drop_mask)
        return logits, cache

    def loss_and_grads(self, X, labels, drop_mask=None):
        logits, (X, h, a, xhat, inv, y, dm) = self.forward(X, train=True, drop_mask=drop_mask)
        n = len(X)
        z = logits - logits.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        loss = float(-np.log(p[np.arange(n), labels] + 1e-300).mean())
        g = p.copy()
        g[np.arange(n), labels] -= 1.0
        g /= n
        grads = {"W2": y.T @ g, "b2": g.sum(0)}
        gy = g @ self.W2.T
        if dm is not None:
            gy = gy * dm
        grads["gamma"] = (gy * xhat).sum(0)
        grads["beta"] = gy.sum(0)
        gx = gy * self.gamma
        ga = inv * (gx - gx.mean(0) - xhat * (gx * xhat).mean(0))
        gh = ga * (h > 0)
        grads["W1"] = X.T @ gh
        grads["b1"] = gh.sum(0)
        return loss, grads

    def fit(self, X, labels, epochs: int = 200, lr: float = 1e-2) -> list[float]:
        losses = []
        for _ in range(epochs):
            loss, grads = self.loss_and_grads(X, labels)
            for k, gk in grads.items():
                setattr(self, k, getattr(self, k) - lr * gk)
            losses.append(loss)
        a = np.maximum(X @ self.W1 + self.b1, 0.0)
        self.run_mean, self.run_var = a.mean(0), a.var(0)
        return losses

    def predict(self, X: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(np.atleast_2d(X), train=False)
        return logits.argmax(axis=1)


# -- keys ---------------------------------------------------------------------


def key_fingerprint(key: str) -> str:
    return hashlib.sha256(("ists-permutation-key:" + key).encode()).hexdigest()[:16]


def key_permutation(key: str | None, C: int) -> np.ndarray:
    """Secret bijection on ``[0, C)``; ``None`` gives the identity."""
    if key is None:
        return np.arange(C)
    return np.random.default_rng(derive_seed("perm", key, C)).permutation(C)


# -- model --------------------------------------------------------------------


@dataclass
class SelectorModel:
    centroids: np.ndarray
    mapping: MappingConfig
    permutation: np.ndarray
    key_fingerprint: str
    encoder: FeatureEncoder = field(default_factory=BlockMeanEncoder)
    classifier: TwoLayerNet | None = None
    cluster_sizes: np.ndarray | None = None

    def __post_init__(self):
        C = self.mapping.C
        if len(self.centroids) != C:
            raise ArgumentError(f"{len(self.centroids)} centroids for C={C}")
        if not np.array_equal(np.sort(self.permutation), np.arange(C)):
            raise ArgumentError("permutation is not a bijection on [0, C)")

    @property
    def mode(self) -> str:
        return "nearest-centroid" if self.classifier is None else "network"

    def raw_label(self, feat: np.ndarray) -> int:
        if self.classifier is not None:
            return int(self.classifier.predict(feat)[0])
        d = _sq_dists(np.atleast_2d(feat), self.centroids)[0]
        return int(np.argmin(d))  # first minimum: lowest index wins ties

    def assign_label(self, feat: np.ndarray) -> int:
        return int(self.permutation[self.raw_label(feat)])

    def select(self, image: np.ndarray) -> InjectionParams:
        return map_params(self.assign_label(self.encoder.encode(image)), self.mapping)

    def with_mapping(self, mapping: MappingConfig) -> "SelectorModel":
        if mapping.C != self.mapping.C:
            raise ArgumentError("mapping must keep the cluster count")
        return SelectorModel(
            self.centroids, mapping, self.permutation, self.key_fingerprint,
            self.encoder, self.classifier, self.cluster_sizes,
        )

    def with_key(self, key: str | None) -> "SelectorModel":
        return SelectorModel(
            self.centroids, self.mapping, key_permutation(key, self.mapping.C),
            key_fingerprint(key) if key is not None else "identity",
            self.encoder, self.classifier, self.cluster_sizes,
        )


def train_selector(
    features: Sequence[np.ndarray] | np.ndarray,
    cfg: MappingConfig,
    key: str | None,
    mode: str = "nearest-centroid",
    seed: int = 0,
    encoder: FeatureEncoder | None = None,
    epochs: int = 200,
    lr: float = 1e-2,
) -> SelectorModel:
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ArgumentError("features must be a 2-D array (n, d)")
    if len(X) < cfg.C:
        raise ArgumentError(f"{len(X)} feature vectors cannot populate C={cfg.C} clusters")
    km = kmeans(X, cfg.C, seed=seed)
    clf = None
    if mode == "network":
        clf = TwoLayerNet(X.shape[1], cfg.C, seed=seed)
        clf.fit(X, km.labels, epochs=epochs, lr=lr)
    elif mode != "nearest-centroid":
        raise ArgumentError(f"unknown selector mode {mode!r}")
    return SelectorModel(
        centroids=km.centroids,
        mapping=cfg,
        permutation=key_permutation(key, cfg.C),
        key_fingerprint=key_fingerprint(key) if key is not None else "identity",
        encoder=encoder or BlockMeanEncoder(),
        classifier=clf,
        cluster_sizes=np.bincount(km.labels, minlength=cfg.C),
    )


# -- selector file --------------------------------------------------------------


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_selector(path, model: SelectorModel) -> None:
    """Write centroids, classifier weights, mapping and the key fingerprint.

    The permutation itself is never stored; it is rebuilt from the key file.
    """
    header = {
        "magic": SELECTOR_MAGIC,
        "version": SELECTOR_VERSION,
        "mode": model.mode,
        "mapping": model.mapping.to_dict(),
        "key_fingerprint": model.key_fingerprint,
        "encoder": model.encoder.to_dict() if hasattr(model.encoder, "to_dict") else {"kind": "external"},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "header.json", json.dumps(header, sort_keys=True, indent=2).encode())
        _zip_write(zf, "centroids.npy", _npy_bytes(model.centroids))
        if model.cluster_sizes is not None:
            _zip_write(zf, "cluster_sizes.npy", _npy_bytes(model.cluster_sizes))
        if model.classifier is not None:
            for k, v in model.classifier.params().items():
                _zip_write(zf, f"classifier/{k}.npy", _npy_bytes(v))


def load_selector(path, key: str | None, encoder: FeatureEncoder | None = None) -> SelectorModel:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise KeyFileError(f"unreadable selector file {path}: {exc}") from exc
    with zf:
        header = json.loads(zf.read("header.json"))
        if header.get("magic") != SELECTOR_MAGIC:
            raise KeyFileError(f"{path} is not a selector file")
        if header.get("version") != SELECTOR_VERSION:
            raise KeyFileError(f"unsupported selector version {header.get('version')}")
        fp = key_fingerprint(key) if key is not None else "identity"
        if fp != header["key_fingerprint"]:
            raise KeyFileError("permutation key does not match the selector's fingerprint")
        cent = np.load(io.BytesIO(zf.read("centroids.npy")))
        names = zf.namelist()
        sizes = np.load(io.BytesIO(zf.read("cluster_sizes.npy"))) if "cluster_sizes.npy" in names else None
        clf = None
        if header["mode"] == "network":
            params = {
                n[len("classifier/") : -4]: np.load(io.BytesIO(zf.read(n)))
                for n in names
                if n.startswith("classifier/")
            }
            clf = TwoLayerNet(cent.shape[1], len(cent))
            clf.load_params(params)
    mapping = MappingConfig.from_dict(header["mapping"])
    return SelectorModel(
        centroids=cent,
        mapping=mapping,
        permutation=key_permutation(key, mapping.C),
        key_fingerprint=fp,
        encoder=encoder or encoder_from_dict(header["encoder"]),
        classifier=clf,
        cluster_sizes=sizes,
    )
