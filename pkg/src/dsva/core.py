"""Shared domain types, configuration and seeded randomness."""

from __future__ import annotations

import dataclasses
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ATTRIBUTE_GROUPS = ("color", "object presence", "material", "texture", "shape", "functions")


class DSVAError(Exception):
    """Base class for all user-facing validation failures."""


class ConfigError(DSVAError):
    pass


class ValidationError(DSVAError):
    pass


class ShapeError(DSVAError, ValueError):
    pass


class InputError(DSVAError, ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Config:
    lambda_scale: float = 0.08
    gamma_calibration: float = 1e-4
    probe_count: int = 10
    temperature: float = 0.07
    embed_dim: int = 64
    batch_size: int = 32
    grad_accum: int = 1
    # encoder; defaults describe a ViT-B/32 sized backbone
    layers: int = 12
    heads: int = 12
    dim: int = 768
    head_dim: int = 0  # 0 means dim // heads
    grid: int = 7
    image_size: int = 224
    # optimisation
    beta1: float = 0.5
    beta2: float = 0.999
    warmup_epochs: int = 4
    warmup_lr: float = 1e-4
    main_epochs: int = 26
    main_lr: float = 1e-6
    freeze_backbone: bool = False
    class_norm: str = "l2"
    train_fraction: float = 0.8
    zsl_accuracy: str = "overall"
    gzsl_accuracy: str = "per-class-mean"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def qkv_dim(self) -> int:
        return self.head_dim or self.dim // self.heads

    @property
    def patch_side(self) -> int:
        return self.image_size // self.grid

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.main_epochs

    def validate(self) -> None:
        problems = []
        if not self.lambda_scale >= 0:
            problems.append("lambda_scale must be >= 0")
        if not self.gamma_calibration >= 0:
            problems.append("gamma_calibration must be >= 0")
        if self.probe_count < 1:
            problems.append("probe_count must be >= 1")
        if not self.temperature > 0:
            problems.append("temperature must be > 0")
        if self.layers < 0 or self.heads < 1 or self.dim < 1 or self.grid < 1:
            problems.append("encoder sizes must be positive")
        if self.head_dim == 0 and self.dim % max(self.heads, 1):
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_dim < 0:
            problems.append("head_dim must be >= 0")
        if self.image_size % max(self.grid, 1):
            problems.append(f"image_size {self.image_size} not divisible by grid {self.grid}")
        if self.batch_size < 1 or self.grad_accum < 1:
            problems.append("batch_size and grad_accum must be >= 1")
        if self.warmup_epochs < 0 or self.main_epochs < 0:
            problems.append("epoch counts must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("optimizer betas must lie in [0, 1)")
        if self.class_norm not in ("l2", "none", "zscore"):
            problems.append(f"unknown class_norm {self.class_norm!r}")
        if not 0 < self.train_fraction <= 1:
            problems.append("train_fraction must lie in (0, 1]")
        for key in ("zsl_accuracy", "gzsl_accuracy"):
            if getattr(self, key) not in ("overall", "per-class-mean"):
                problems.append(f"{key} must be 'overall' or 'per-class-mean'")
        if problems:
            raise ValidationError("; ".join(problems))

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


# desk-scale settings; learning rates are raised because the backbone starts
# from random weights instead of a pretrained checkpoint
PRESETS: dict[str, dict] = {
    "tiny": dict(
        layers=2,
        heads=4,
        dim=32,
        grid=4,
        image_size=64,
        warmup_lr=1e-2,
        main_lr=1e-4,
        # scores here are O(1) rather than the pretrained model's scale
        gamma_calibration=1.0,
    ),
}


def _coerce(name: str, raw: str, kind: type):
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw.strip()


_FIELD_TYPES = {f.name: type(f.default) for f in dataclasses.fields(Config)}


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines (``#`` starts a comment) on top of ``base``."""
    overrides: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            overrides[key] = _coerce(key, raw, _FIELD_TYPES[key])
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for key {key!r}") from None
    return (base or Config()).replace(**overrides)


def load_config(path: str | os.PathLike | None = None, preset: str | None = None, **overrides) -> Config:
    base = Config()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        base = base.replace(**PRESETS[preset])
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"configuration file {path} does not exist")
        base = parse_config(path.read_text(encoding="utf-8"), base)
    if overrides:
        base = base.replace(**{k: v for k, v in overrides.items() if v is not None})
    return base


def dump_config(config: Config) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def resolve_seed(flag: int | None, default: int = 0) -> int:
    """``--seed`` wins over ``DSVA_SEED`` which wins over ``default``."""
    if flag is not None:
        return int(flag)
    env = os.environ.get("DSVA_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DSVA_SEED must be an integer, got {env!r}") from None
    return default


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; children come from ``rng.spawn(n)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


def check_image(image: np.ndarray, grid: int | None = None) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got shape {image.shape}")
    if grid is not None and (image.shape[0] % grid or image.shape[1] % grid):
        raise ShapeError(f"image {image.shape[:2]} not divisible into a {grid}x{grid} grid")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ValidationError("image values must be finite and within [0, 1]")
    return image


@dataclass(frozen=True)
class AttributeVocabulary:
    names: tuple[str, ...]
    groups: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ValidationError("vocabulary needs at least one attribute")
        if len(self.names) != len(self.groups):
            raise ValidationError("names and groups differ in length")
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise ValidationError(f"duplicate attribute names: {dupes}")
        bad = sorted(set(self.groups) - set(ATTRIBUTE_GROUPS))
        if bad:
            raise ValidationError(f"unknown attribute groups {bad}; allowed: {ATTRIBUTE_GROUPS}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "AttributeVocabulary":
        pairs = list(pairs)
        return cls(tuple(n for _, n in pairs), tuple(g for g, _ in pairs))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def permuted(self, order: Sequence[int]) -> "AttributeVocabulary":
        return AttributeVocabulary(tuple(self.names[i] for i in order), tuple(self.groups[i] for i in order))

    @classmethod
    def read(cls, path: str | os.PathLike) -> "AttributeVocabulary":
        pairs = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 'group<TAB>attribute'")
            pairs.append((parts[0].strip(), parts[1].strip()))
        return cls.from_pairs(pairs)

    def dumps(self) -> str:
        return "".join(f"{g}\t{n}\n" for g, n in zip(self.groups, self.names))


@dataclass(frozen=True, eq=False)
class ClassAttributeMatrix:
    class_names: tuple[str, ...]
    attribute_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.class_names), len(self.attribute_names)):
            raise ShapeError(
                f"matrix shape {values.shape} does not match "
                f"{len(self.class_names)} classes x {len(self.attribute_names)} attributes"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("class-attribute matrix has non-finite entries")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("duplicate class names in matrix")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, ClassAttributeMatrix):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and self.attribute_names == other.attribute_names
            and np.array_equal(self.values, other.values)
        )

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    def row(self, name: str) -> np.ndarray:
        return self.values[self.class_names.index(name)]

    def rows(self, names: Sequence[str]) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.class_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise InputError(f"classes not in matrix: {missing}")
        return self.values[[index[n] for n in names]]

    def normalized(self, mode: str = "l2") -> "ClassAttributeMatrix":
        v = self.values
        if mode == "none":
            out = v.copy()
        elif mode == "l2":
            norms = np.linalg.norm(v, axis=1, keepdims=True)
            out = v / np.where(norms > 0, norms, 1.0)
        elif mode == "zscore":
            mu = v.mean(axis=1, keepdims=True)
            sd = v.std(axis=1, keepdims=True)
            out = (v - mu) / np.where(sd > 0, sd, 1.0)
        else:
            raise ConfigError(f"unknown class normalization {mode!r}")
        return ClassAttributeMatrix(self.class_names, self.attribute_names, out)

    def to_csv(self) -> str:
        lines = ["class," + ",".join(self.attribute_names)]
        for name, row in zip(self.class_names, self.values):
            lines.append(name + "," + ",".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ClassAttributeMatrix":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines:
            raise ValidationError("empty class-attribute matrix file")
        header = lines[0].split(",")
        names, rows = [], []
        for lineno, line in enumerate(lines[1:], 2):
            cells = line.split(",")
            if len(cells) != len(header):
                raise ValidationError(f"line {lineno}: expected {len(header)} cells, got {len(cells)}")
            names.append(cells[0])
            try:
                rows.append([float(c) for c in cells[1:]])
            except ValueError:
                raise ValidationError(f"line {lineno}: non-numeric attribute value") from None
        values = np.array(rows, dtype=np.float64).reshape(len(names), len(header) - 1)
        return cls(tuple(names), tuple(header[1:]), values)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "ClassAttributeMatrix":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class SplitSpec:
    seen: tuple[str, ...]
    unseen: tuple[str, ...]
    train: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    test: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    notes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise ValidationError(f"classes both seen and unseen: {sorted(overlap)}")
        stray = sorted(set(self.train) - set(self.seen))
        if stray:
            raise ValidationError(f"training images listed for non-seen classes: {stray}")
        bad_test = sorted(set(self.test) - set(self.seen) - set(self.unseen))
        if bad_test:
            raise ValidationError(f"test images for classes outside the split: {bad_test}")

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.seen) + tuple(self.unseen)

    def is_seen(self, name: str) -> bool:
        return name in self.seen


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------


def atomic_write(path: str | os.PathLike, data: bytes | str) -> Path:
    """Write via a temporary sibling and rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
