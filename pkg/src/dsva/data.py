"""Dataset ingestion, seen/unseen splits, synthetic shapes and weight import."""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from dsva.checkpoint import CheckpointError, load_checkpoint
from dsva.core import (
    ATTRIBUTE_GROUPS,
    AttributeVocabulary,
    ClassAttributeMatrix,
    Config,
    ConfigError,
    SplitSpec,
    ValidationError,
    atomic_write,
    parse_config,
    seeded_rng,
)

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp"}


def load_image(path: str | os.PathLike, size: int | None = None) -> np.ndarray:
    """Decode to an ``H x W x 3`` float64 array in ``[0, 1]``, optionally resized square (bilinear)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    from io import BytesIO

    buf = BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


# --------------------------------------------------------------------------
# class-folder datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    image_size: int
    classes: tuple[str, ...]
    # image id -> (class, path); ids are "<class>/<filename>"
    entries: Mapping[str, tuple[str, Path]]
    skipped: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def ids_for(self, name: str) -> list[str]:
        return [i for i, (c, _) in self.entries.items() if c == name]

    def by_class(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {c: [] for c in self.classes}
        for image_id, (c, _) in self.entries.items():
            out[c].append(image_id)
        return out

    def label(self, image_id: str) -> str:
        return self.entries[image_id][0]

    def path(self, image_id: str) -> Path:
        return self.entries[image_id][1]

    def load(self, image_id: str) -> np.ndarray:
        return load_image(self.path(image_id), self.image_size)

    def load_many(self, ids: Sequence[str]) -> np.ndarray:
        if not ids:
            return np.zeros((0, self.image_size, self.image_size, 3))
        return np.stack([self.load(i) for i in ids])


def load_dataset(root: str | os.PathLike, image_size: int = 224) -> DatasetIndex:
    """Index ``root/<class>/<image>``; classes and files in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset root {root} is not a directory")
    entries: dict[str, tuple[str, Path]] = {}
    skipped = []
    classes = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not classes:
        raise ValidationError(f"dataset root {root} has no class folders")
    for name in classes:
        count = 0
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_EXTENSIONS or not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im.verify()
            except Exception as exc:  # unreadable or corrupt file
                log.warning("skipping unreadable image %s: %s", f, exc)
                skipped.append(str(f))
                continue
            entries[f"{name}/{f.name}"] = (name, f)
            count += 1
        if count == 0:
            raise ValidationError(f"class {name!r} has no readable images")
    return DatasetIndex(root, image_size, tuple(classes), entries, tuple(skipped))


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------


def parse_ratio(ratio: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in ratio.split("/"))
    except ValueError:
        raise ValidationError(f"ratio must look like '60/10', got {ratio!r}") from None
    if a < 1 or b < 1:
        raise ValidationError(f"ratio {ratio!r} needs at least one seen and one unseen class")
    return a, b


def make_splits(
    class_names: Sequence[str],
    ratio: str | None = None,
    seed: int = 0,
    *,
    seen: Sequence[str] | None = None,
    unseen: Sequence[str] | None = None,
    index: DatasetIndex | None = None,
    train_fraction: float = 0.8,
) -> SplitSpec:
    """Partition classes into seen/unseen and, given an index, images into train/test.

    Seen classes keep ``train_fraction`` of their images (seeded, per class) for
    training; the rest and every unseen-class image go to test.
    """
    class_names = list(class_names)
    rng = seeded_rng(seed)
    if seen is not None or unseen is not None:
        seen, unseen = list(seen or []), list(unseen or [])
        overlap = set(seen) & set(unseen)
        if overlap:
            raise ValidationError(f"classes listed as both seen and unseen: {sorted(overlap)}")
        unknown = sorted(set(seen + unseen) - set(class_names))
        if unknown:
            raise ValidationError(f"split names unknown classes: {unknown}")
    elif ratio is not None:
        n_seen, n_unseen = parse_ratio(ratio)
        if n_seen + n_unseen != len(class_names):
            raise ValidationError(f"ratio {ratio} needs {n_seen + n_unseen} classes, have {len(class_names)}")
        order = rng.permutation(len(class_names))
        seen = sorted(class_names[i] for i in order[:n_seen])
        unseen = sorted(class_names[i] for i in order[n_seen:])
    else:
        raise ValidationError("give either a ratio or explicit seen/unseen lists")
    train: dict[str, tuple[str, ...]] = {}
    test: dict[str, tuple[str, ...]] = {}
    notes = {"train_fraction": repr(train_fraction), "seed": str(seed)}
    if index is not None:
        per_class = index.by_class()
        for name in seen:
            ids = per_class[name]
            perm = rng.permutation(len(ids))
            n_train = int(round(train_fraction * len(ids)))
            if train_fraction < 1 and len(ids) > 1:
                n_train = min(max(n_train, 1), len(ids) - 1)
            train[name] = tuple(sorted(ids[i] for i in perm[:n_train]))
            test[name] = tuple(sorted(ids[i] for i in perm[n_train:]))
        for name in unseen:
            test[name] = tuple(per_class[name])
    return SplitSpec(tuple(seen), tuple(unseen), train, test, notes)


def split_to_json(split: SplitSpec) -> str:
    doc = {
        "seen": list(split.seen),
        "unseen": list(split.unseen),
        "train": {k: list(v) for k, v in split.train.items()},
        "test": {k: list(v) for k, v in split.test.items()},
        "notes": dict(split.notes),
    }
    return json.dumps(doc, indent=2) + "\n"


def read_split(path: str | os.PathLike) -> SplitSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return SplitSpec(
            tuple(doc["seen"]),
            tuple(doc["unseen"]),
            {k: tuple(v) for k, v in doc.get("train", {}).items()},
            {k: tuple(v) for k, v in doc.get("test", {}).items()},
            dict(doc.get("notes", {})),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed split file {path}: {exc}") from None


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------

COLORS = {
    "red": (0.86, 0.16, 0.14),
    "green": (0.18, 0.72, 0.22),
    "blue": (0.16, 0.26, 0.88),
    "yellow": (0.92, 0.84, 0.16),
}
SHAPES = ("round", "rectangular", "triangular")
TEXTURES = ("striped", "checkered")
CLUSTER = "clustered"

DEFAULT_SPEC_TEXT = """\
# twelve classes over ten shared attributes
image_size = 64
images_per_class = 100
noise = 0.04
attributes = color:red, color:green, color:blue, shape:round, shape:rectangular, shape:triangular, texture:striped, texture:checkered, object presence:clustered, functions:residential
derived.residential = rectangular | triangular
class.red-round = red round
class.green-rect-striped = green rectangular striped
class.blue-tri-checkered = blue triangular checkered
class.red-rect-checkered-cluster = red rectangular checkered clustered
class.green-round-checkered-cluster = green round checkered clustered
class.blue-round-striped = blue round striped
class.green-tri-cluster = green triangular clustered
class.red-tri-striped = red triangular striped
class.blue-rect-cluster = blue rectangular clustered
class.red-tri-checkered = red triangular checkered
class.green-round-striped = green round striped
class.red-round-cluster = red round clustered
seen = red-round, green-rect-striped, blue-tri-checkered, red-rect-checkered-cluster, green-round-checkered-cluster, blue-round-striped, green-tri-cluster, red-tri-striped
unseen = blue-rect-cluster, red-tri-checkered, green-round-striped, red-round-cluster
"""


@dataclass(frozen=True)
class SyntheticSpec:
    vocabulary: AttributeVocabulary
    classes: Mapping[str, frozenset[str]]
    derived: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    seen: tuple[str, ...] = ()
    unseen: tuple[str, ...] = ()
    images_per_class: int = 100
    noise: float = 0.04
    image_size: int = 64

    def __post_init__(self):
        names = set(self.vocabulary.names)
        for attr, sources in self.derived.items():
            if attr not in names or not set(sources) <= names:
                raise ValidationError(f"derived attribute {attr!r} refers to unknown attributes")
        for cname, attrs in self.classes.items():
            if not attrs:
                raise ValidationError(f"class {cname!r} has no attributes")
            unknown = sorted(attrs - names)
            if unknown:
                raise ValidationError(f"class {cname!r} uses unknown attributes {unknown}")
            if attrs & set(self.derived):
                raise ValidationError(f"class {cname!r} lists derived attributes explicitly")
            colors = [a for a in attrs if a in COLORS]
            shapes = [a for a in attrs if a in SHAPES]
            textures = [a for a in attrs if a in TEXTURES]
            if len(colors) != 1 or len(shapes) != 1 or len(textures) > 1:
                raise ValidationError(
                    f"class {cname!r} must have exactly one color, one shape and at most one texture"
                )
        if self.images_per_class < 1 or self.noise < 0 or self.image_size < 8:
            raise ValidationError("images_per_class >= 1, noise >= 0 and image_size >= 8 required")
        split = set(self.seen) | set(self.unseen)
        if split and split != set(self.classes):
            raise ValidationError("seen/unseen lists must cover exactly the defined classes")

    def attribute_set(self, cname: str) -> set[str]:
        base = set(self.classes[cname])
        for attr, sources in self.derived.items():
            if base & set(sources):
                base.add(attr)
        return base

    def ground_truth(self) -> ClassAttributeMatrix:
        names = list(self.classes)
        values = np.zeros((len(names), len(self.vocabulary)))
        for ci, cname in enumerate(names):
            for attr in self.attribute_set(cname):
                values[ci, self.vocabulary.index(attr)] = 1.0
        return ClassAttributeMatrix(tuple(names), self.vocabulary.names, values)


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"synthetic spec line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        kv[key] = value

    def items(value: str) -> list[str]:
        return [v.strip() for v in value.split(",") if v.strip()]

    try:
        pairs = []
        for item in items(kv.pop("attributes")):
            group, _, name = item.rpartition(":")
            pairs.append((group.strip(), name.strip()))
        vocab = AttributeVocabulary.from_pairs(pairs)
        classes, derived = {}, {}
        for key in list(kv):
            if key.startswith("class."):
                classes[key[6:]] = frozenset(kv.pop(key).split())
            elif key.startswith("derived."):
                derived[key[8:]] = tuple(s.strip() for s in kv.pop(key).split("|"))
        spec = SyntheticSpec(
            vocabulary=vocab,
            classes=classes,
            derived=derived,
            seen=tuple(items(kv.pop("seen", ""))),
            unseen=tuple(items(kv.pop("unseen", ""))),
            images_per_class=int(kv.pop("images_per_class", 100)),
            noise=float(kv.pop("noise", 0.04)),
            image_size=int(kv.pop("image_size", 64)),
        )
    except KeyError as exc:
        raise ConfigError(f"synthetic spec is missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ConfigError(f"bad synthetic spec value: {exc}") from None
    if kv:
        raise ConfigError(f"unknown synthetic spec keys: {sorted(kv)}")
    return spec


def default_synthetic_spec(**changes) -> SyntheticSpec:
    spec = parse_synthetic_spec(DEFAULT_SPEC_TEXT)
    if changes:
        from dataclasses import replace

        spec = replace(spec, **changes)
    return spec


def coverage_audit(spec: SyntheticSpec) -> list[str]:
    """Problems preventing seen-to-unseen transfer; empty when the spec is usable."""
    truth = spec.ground_truth()
    problems = []
    rows = {}
    for cname, row in zip(truth.class_names, truth.values):
        key = tuple(row)
        if key in rows:
            problems.append(f"classes {rows[key]!r} and {cname!r} share one attribute vector")
        rows[key] = cname
    seen_attrs = set()
    for cname in spec.seen:
        seen_attrs |= spec.attribute_set(cname)
    for cname in spec.unseen:
        lacking = sorted(spec.attribute_set(cname) - seen_attrs)
        if lacking:
            problems.append(f"unseen class {cname!r} uses attributes never seen in training: {lacking}")
    return problems


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float, aspect: float) -> np.ndarray:
    if shape == "round":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "rectangular":
        return (np.abs(yy - cy) <= r * aspect) & (np.abs(xx - cx) <= r)
    # upward isosceles triangle with its apex at the top
    top, bottom = cy - r, cy + r
    half_width = r * (yy - top) / (2 * r)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half_width)


def render_image(spec: SyntheticSpec, cname: str, rng: np.random.Generator) -> np.ndarray:
    attrs = spec.classes[cname]
    S = spec.image_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    base = rng.uniform(0.35, 0.55)
    img = np.full((S, S, 3), base)
    period = max(S // 16, 2)
    if "striped" in attrs:
        img += np.where((yy // period) % 2 == 0, 0.15, -0.15)[..., None]
    elif "checkered" in attrs:
        img += np.where(((yy // period) + (xx // period)) % 2 == 0, 0.15, -0.15)[..., None]
    color = np.array(COLORS[next(a for a in attrs if a in COLORS)])
    shape = next(a for a in attrs if a in SHAPES)
    count = 2 if CLUSTER in attrs else 1
    placed: list[tuple[float, float, float]] = []
    for _ in range(count):
        r = rng.uniform(0.16, 0.24) * S if count == 1 else rng.uniform(0.11, 0.15) * S
        for _attempt in range(50):
            cy, cx = rng.uniform(r + 1, S - r - 1, size=2)
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 2) ** 2 for py, px, pr in placed):
                break
        placed.append((cy, cx, r))
        tint = np.clip(color + rng.uniform(-0.05, 0.05, size=3), 0, 1)
        mask = _shape_mask(shape, yy, xx, cy, cx, r, rng.uniform(0.7, 1.0))
        img[mask] = tint
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike, seed: int = 0) -> ClassAttributeMatrix:
    """Render the dataset as class folders and write ``class_matrix.csv`` and ``vocab.txt``.

    When the spec names seen/unseen classes a ``split.json`` is written too.
    """
    problems = coverage_audit(spec)
    if problems:
        raise ValidationError("synthetic spec fails the coverage audit:\n  " + "\n  ".join(problems))
    out = Path(out_dir)
    rng = seeded_rng(seed)
    children = rng.spawn(len(spec.classes))
    for child, cname in zip(children, spec.classes):
        for i in range(spec.images_per_class):
            save_image(out / "images" / cname / f"{i:04d}.png", render_image(spec, cname, child))
    truth = spec.ground_truth()
    atomic_write(out / "class_matrix.csv", truth.to_csv())
    atomic_write(out / "vocab.txt", spec.vocabulary.dumps())
    if spec.seen:
        index = load_dataset(out / "images", spec.image_size)
        split = make_splits(list(spec.classes), seed=seed, seen=spec.seen, unseen=spec.unseen, index=index)
        atomic_write(out / "split.json", split_to_json(split))
    return truth


# --------------------------------------------------------------------------
# pretrained weights
# --------------------------------------------------------------------------

_CLASS_TOKEN_KEYS = ("class_token", "cls_token", "encoder.class_token", "encoder.cls_token")


def import_pretrained(path: str | os.PathLike, config: Config | None = None, channels: int = 3, report=sys.stderr):
    """Load encoder weights from a shape-table container into an :class:`Encoder`.

    Entries may carry an ``encoder.`` prefix.  A class-token entry is ignored
    and a positional table with ``N + 1`` rows loses its first row.
    """
    from dsva.encoder import Encoder

    tensors, meta = load_checkpoint(path)
    if config is None:
        if "config" not in meta:
            raise CheckpointError(f"{path}: no configuration given and none in the sidecar")
        config = parse_config(meta["config"])
    encoder = Encoder.from_config(config, channels=channels)
    expected = {k: tuple(v.shape) for k, v in encoder.state_dict().items()}
    found = {}
    for key, arr in tensors.items():
        if key in _CLASS_TOKEN_KEYS or key == "prototypes":
            continue
        name = key[len("encoder."):] if key.startswith("encoder.") else key
        if name == "positional" and arr.shape[0] == config.num_patches + 1:
            arr = arr[1:]
        found[name] = arr
    problems = []
    for name, shape in expected.items():
        if name not in found:
            problems.append(f"{name}: expected {shape}, found missing")
        elif tuple(found[name].shape) != shape:
            problems.append(f"{name}: expected {shape}, found {tuple(found[name].shape)}")
    if problems:
        raise CheckpointError("pretrained weights do not match the encoder:\n  " + "\n  ".join(problems))
    encoder.load_state_dict({k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in found.items() if k in expected})
    if report is not None:
        for name, shape in expected.items():
            print(f"imported {name} {shape}", file=report)
        for name in sorted(set(found) - set(expected)):
            print(f"ignored {name} {tuple(found[name].shape)}", file=report)
    return encoder


__all__ = [
    "ATTRIBUTE_GROUPS",
    "DatasetIndex",
    "SyntheticSpec",
    "coverage_audit",
    "default_synthetic_spec",
    "generate_synthetic",
    "import_pretrained",
    "load_dataset",
    "load_image",
    "make_splits",
    "parse_synthetic_spec",
    "read_split",
    "split_to_json",
]
