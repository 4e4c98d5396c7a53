"""Run configuration, key files, run manifests and PNG I/O."""
from __future__ import annotations

import hashlib
import json
import os
import secrets
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .attacks import AttackConfig
from .backend import BackendConfig, derive_seed
from .distortions import DISTORTION_KINDS, DistortionSpec
from .errors import ArgumentError, ConfigError, KeyFileError
from .freq import _check_radius
from .pipeline import SCHEMES, PatternKey, scheme_by_name
from .selector import MappingConfig

KEY_MAGIC = "ISTS-KEY"
KEY_VERSION = 1


def _strict(cls, d: dict[str, Any], where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class PatternConfig:
    # the pattern seed is a secret and lives in the key file
    radius: int = 20
    channel: int = 0
    conjugate_symmetric: bool = False


@dataclass(frozen=True)
class AttackDefaults:
    steps: int = 150
    lr: float | str = 0.01
    lam: float = 5e4
    n_pairs: int = 100

    def config(self, kind: str) -> AttackConfig:
        return AttackConfig(kind, self.steps, self.lr, self.lam, self.n_pairs)


@dataclass(frozen=True)
class EvalDefaults:
    n_images: int = 100
    fpr: float = 0.01
    schemes: tuple = ("ists", "no-dyn-pattern", "no-dyn-injection", "tree-ring")
    distortions: tuple = DISTORTION_KINDS
    crop_by_area: bool = True
    sweep: tuple = ((5, 15), (10, 20), (15, 25), (20, 30), (25, 35), (30, 40), (35, 45))
    selector_mode: str = "nearest-centroid"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(self.schemes))
        object.__setattr__(self, "distortions", tuple(self.distortions))
        object.__setattr__(self, "sweep", tuple(tuple(r) for r in self.sweep))

    def distortion_specs(self) -> list[DistortionSpec]:
        return [DistortionSpec(k, crop_by_area=self.crop_by_area) for k in self.distortions]


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs except secrets.  Defaults are the published settings."""

    backend: BackendConfig = field(default_factory=BackendConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    scheme: str = "ists"
    pattern: PatternConfig = field(default_factory=PatternConfig)
    attack: AttackDefaults = field(default_factory=AttackDefaults)
    evaluation: EvalDefaults = field(default_factory=EvalDefaults)
    seed: int = 0
    codec_seed: int = 1

    @classmethod
    def toy(cls) -> "RunConfig":
        """Desk-scale preset: 64 clusters and images, curvature-scaled attack steps."""
        return cls(
            mapping=MappingConfig(C=64),
            attack=AttackDefaults(lr="auto", n_pairs=64),
            evaluation=EvalDefaults(n_images=64),
        )

    def validate(self) -> "RunConfig":
        scheme_by_name(self.scheme)
        for s in self.evaluation.schemes:
            scheme_by_name(s)
        c, h, w = self.backend.latent_shape
        if not 0 <= self.pattern.channel < c:
            raise ConfigError(f"pattern channel {self.pattern.channel} outside [0, {c})")
        try:
            _check_radius(self.pattern.radius, (h, w))
            self.attack.config("imp-removal")
            self.evaluation.distortion_specs()
        except ArgumentError as exc:
            raise ConfigError(str(exc)) from exc
        self.mapping.validate_for(self.backend.T, (h, w), self.pattern.radius)
        if self.evaluation.n_images < 1:
            raise ConfigError("n_images must be >= 1")
        if not 0 < self.evaluation.fpr <= 1:
            raise ConfigError("fpr must lie in (0, 1]")
        if self.evaluation.workers < 1:
            raise ConfigError("workers must be >= 1")
        for lo, hi in self.evaluation.sweep:
            if not 1 <= lo < hi < self.backend.T:
                raise ConfigError(f"sweep range [{lo}, {hi}] outside [1, {self.backend.T})")
        return self

    def pattern_key(self, seed: int) -> PatternKey:
        p = self.pattern
        return PatternKey(seed, p.radius, p.channel, p.conjugate_symmetric)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["backend"] = self.backend.to_dict()
        return json.loads(json.dumps(d))  # tuples -> lists

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d)
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown key(s) in config: {sorted(extra)}")
        if "backend" in d:
            d["backend"] = _strict(BackendConfig, d["backend"], "backend")
        for name, sub in (("mapping", MappingConfig), ("pattern", PatternConfig),
                          ("attack", AttackDefaults), ("evaluation", EvalDefaults)):
            if name in d:
                d[name] = _strict(sub, d[name], name)
        return cls(**d).validate()

    def with_overrides(self, seed: int | None = None, workers: int | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "seed": seed})
        if workers is not None:
            ev = EvalDefaults(**{**asdict(cfg.evaluation), "workers": workers})
            cfg = RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "evaluation": ev})
        return cfg.validate()

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict())).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def env_overrides(environ=os.environ) -> dict[str, int]:
    out = {}
    for var, name in (("ISTS_SEED", "seed"), ("ISTS_WORKERS", "workers")):
        if var in environ:
            try:
                out[name] = int(environ[var])
            except ValueError:
                raise ConfigError(f"{var} must be an integer") from None
    return out


# -- keys ---------------------------------------------------------------------


@dataclass(frozen=True)
class KeyFile:
    pattern_seed: int
    permutation_key: str
    mapping: MappingConfig
    created: str = ""
    version: int = KEY_VERSION

    @property
    def fingerprint(self) -> str:
        body = canonical_json({"pattern_seed": self.pattern_seed, "permutation_key": self.permutation_key})
        return hashlib.sha256(b"ists-key:" + body).hexdigest()[:16]

    def __repr__(self):
        return f"KeyFile(fingerprint={self.fingerprint!r}, version={self.version})"

    @classmethod
    def generate(cls, mapping: MappingConfig, seed: int | None = None) -> "KeyFile":
        """Fresh random key, or a reproducible one derived from ``seed``."""
        if seed is None:
            pseed, pkey = secrets.randbits(63), secrets.token_hex(16)
        else:
            pseed = derive_seed("pattern-seed", seed) >> 1
            pkey = "%032x" % derive_seed("permutation-key", seed)
        created = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return cls(pseed, pkey, mapping, created)

    def to_dict(self) -> dict[str, Any]:
        return {
            "magic": KEY_MAGIC,
            "version": self.version,
            "created": self.created,
            "pattern_seed": self.pattern_seed,
            "permutation_key": self.permutation_key,
            "mapping": self.mapping.to_dict(),
            "fingerprint": self.fingerprint,
        }

    def save(self, path) -> None:
        p = Path(path)
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        try:
            p.chmod(0o600)
        except OSError:
            pass

    @classmethod
    def load(cls, path) -> "KeyFile":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise KeyFileError(f"cannot read key file {path}: {exc.strerror}") from exc
        except json.JSONDecodeError:
            raise KeyFileError(f"{path} is not a key file") from None
        if not isinstance(d, dict) or d.get("magic") != KEY_MAGIC:
            raise KeyFileError(f"{path} is not a key file")
        if d.get("version") != KEY_VERSION:
            raise KeyFileError(f"unsupported key file version {d.get('version')}")
        try:
            key = cls(int(d["pattern_seed"]), str(d["permutation_key"]),
                      MappingConfig.from_dict(d["mapping"]), d.get("created", ""), d["version"])
        except (KeyError, TypeError, ValueError) as exc:
            raise KeyFileError(f"malformed key file {path}") from exc
        if key.fingerprint != d.get("fingerprint"):
            raise KeyFileError(f"key file {path} fails its fingerprint check")
        return key


# -- manifests ----------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict[str, Any]
    seeds: dict[str, int] = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    key_fingerprint: str | None = None
    timing: dict[str, float] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    tool_version: str = __version__

    @property
    def run_id(self) -> str:
        body = canonical_json({"command": self.command, "argv": self.argv, "config": self.config})
        return hashlib.sha256(body).hexdigest()[:12]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["run_id"] = self.run_id
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        d.pop("run_id", None)
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in fields(cls)}})


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# -- images -------------------------------------------------------------------


def save_png(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(image, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=float) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise ArgumentError(f"cannot read image {path}: {exc}") from exc


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ArgumentError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
