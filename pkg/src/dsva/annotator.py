"""Automatic class-attribute annotation with a joint text/image embedder.

An attribute's value for a class is the summed dot product between the
embedded prompt ``"This photo contains <attribute>"`` and the embeddings of
``m`` probe images of that class.  Sums use :func:`math.fsum`, so the result
is the correctly rounded exact sum: independent of probe order and exactly
linear under probe-set duplication.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dsva.core import (
    AttributeVocabulary,
    ClassAttributeMatrix,
    InputError,
    ShapeError,
    ValidationError,
    atomic_write,
)


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str = "This photo contains {attribute}"

    def __post_init__(self):
        if self.pattern.count("{attribute}") != 1:
            raise ValidationError("prompt template needs exactly one {attribute} slot")

    def __call__(self, attribute: str) -> str:
        return self.pattern.replace("{attribute}", attribute)


class Embedder(Protocol):
    """Maps prompts and images into one ``dim``-dimensional space.

    ``concurrent_safe`` states whether the two embed methods may be called
    from several threads at once.
    """

    dim: int
    concurrent_safe: bool

    def embed_text(self, texts: Sequence[str]) -> np.ndarray: ...

    def embed_images(self, images: Sequence) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


class MockEmbedder:
    """Deterministic stand-in for a pretrained text/image model.

    Text goes through a seeded SHA-256 hash to a Gaussian unit vector.  Images
    are summarised by per-channel means over a 2x2 region grid plus the global
    channel means, then projected by a seeded matrix and normalised.
    """

    concurrent_safe = True

    def __init__(self, seed: int = 0, dim: int = 64):
        self.seed = seed
        self.dim = dim
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EED])))
        self._projection = rng.standard_normal((dim, 16))

    def _text_vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
        return _unit(rng.standard_normal(self.dim))

    def embed_text(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._text_vector(t) for t in texts]) if texts else np.zeros((0, self.dim))

    @staticmethod
    def summarize(image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        H, W = img.shape[:2]
        h2, w2 = H // 2, W // 2
        quads = [img[:h2, :w2], img[:h2, w2:], img[h2:, :w2], img[h2:, w2:]]
        parts = [q.reshape(-1, img.shape[2]).mean(axis=0)[:3] for q in quads]
        parts.append(img.reshape(-1, img.shape[2]).mean(axis=0)[:3])
        summary = np.concatenate(parts)
        return np.concatenate([summary, [1.0]])  # bias keeps black images off the origin

    def embed_images(self, images: Sequence) -> np.ndarray:
        from dsva.data import load_image

        rows = []
        for item in images:
            img = load_image(item) if isinstance(item, (str, os.PathLike)) else np.asarray(item)
            rows.append(_unit(self._projection @ self.summarize(img)))
        return np.stack(rows) if rows else np.zeros((0, self.dim))


class BridgeEmbedder:
    """Reads embeddings produced by an external backend.

    The bridge directory holds ``manifest.csv`` (``id,path``), ``prompts.txt``
    (one prompt per line) and the backend's output ``embeddings.csv`` whose
    rows are ``id,v1,...,vd``.  Image ids come from the manifest; prompt ids
    are ``prompt-<line index>``.  Lookups are read-only, so concurrent use is safe.
    """

    concurrent_safe = True

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        emb_path = self.directory / "embeddings.csv"
        if not emb_path.exists():
            raise ValidationError(f"{emb_path} missing; run the embedding backend on the bridge request first")
        self._vectors: dict[str, np.ndarray] = {}
        with open(emb_path, newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                try:
                    self._vectors[row[0]] = _unit(np.array([float(v) for v in row[1:]]))
                except ValueError:
                    raise ValidationError(f"non-numeric embedding for id {row[0]!r}") from None
        dims = {v.shape[0] for v in self._vectors.values()}
        if len(dims) != 1:
            raise ShapeError(f"embeddings.csv rows have inconsistent dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self._path_to_id = {}
        manifest = self.directory / "manifest.csv"
        if manifest.exists():
            with open(manifest, newline="", encoding="utf-8") as fh:
                for row in csv.reader(fh):
                    if row and row[0] != "id":
                        self._path_to_id[str(Path(row[1]))] = row[0]
        prompts = self.directory / "prompts.txt"
        self._prompt_to_id = {}
        if prompts.exists():
            for i, line in enumerate(prompts.read_text(encoding="utf-8").splitlines()):
                self._prompt_to_id.setdefault(line, f"prompt-{i}")

    def _lookup(self, key: str) -> np.ndarray:
        try:
            return self._vectors[key]
        except KeyError:
            raise InputError(f"no bridge embedding for {key!r}") from None

    def embed_text(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._lookup(self._prompt_to_id.get(t, t)) for t in texts])

    def embed_images(self, images: Sequence) -> np.ndarray:
        return np.stack([self._lookup(self._path_to_id.get(str(Path(p)), str(p))) for p in images])


def write_bridge_request(directory: str | os.PathLike, images: Mapping[str, str], prompts: Sequence[str]) -> None:
    """Write ``manifest.csv`` and ``prompts.txt`` for an external embedding backend."""
    directory = Path(directory)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "path"])
    for image_id, path in images.items():
        writer.writerow([image_id, path])
    atomic_write(directory / "manifest.csv", buf.getvalue())
    atomic_write(directory / "prompts.txt", "".join(p + "\n" for p in prompts))


def attribute_score(text_vector: np.ndarray, probe_vectors: np.ndarray) -> float:
    """``sum_i <text, probe_i>`` over the probe rows."""
    probe_vectors = np.atleast_2d(probe_vectors)
    if probe_vectors.shape[0] == 0:
        raise InputError("empty probe set")
    if probe_vectors.shape[1] != text_vector.shape[0]:
        raise ShapeError(f"probe dim {probe_vectors.shape[1]} != text dim {text_vector.shape[0]}")
    return math.fsum(float(np.dot(text_vector, v)) for v in probe_vectors)


def annotate_attribute(probes: Sequence, attribute: str, embedder: Embedder, template: PromptTemplate = PromptTemplate()) -> float:
    if len(probes) == 0:
        raise InputError("empty probe set")
    text = embedder.embed_text([template(attribute)])[0]
    return attribute_score(text, embedder.embed_images(list(probes)))


def build_class_matrix(
    vocabulary: AttributeVocabulary,
    probes: Mapping[str, Sequence],
    embedder: Embedder,
    template: PromptTemplate = PromptTemplate(),
    classes: Sequence[str] | None = None,
) -> ClassAttributeMatrix:
    """Annotate every (class, attribute) pair; rows follow ``classes`` (default: ``probes`` order)."""
    classes = list(probes) if classes is None else list(classes)
    missing = [c for c in classes if c not in probes]
    if missing:
        raise InputError(f"no probe images for class {missing[0]!r}")
    texts = embedder.embed_text([template(a) for a in vocabulary.names])
    values = np.empty((len(classes), len(vocabulary)))
    for ci, name in enumerate(classes):
        if len(probes[name]) == 0:
            raise InputError(f"empty probe set for class {name!r}")
        vis = embedder.embed_images(list(probes[name]))
        for ai in range(len(vocabulary)):
            values[ci, ai] = attribute_score(texts[ai], vis)
    return ClassAttributeMatrix(tuple(classes), vocabulary.names, values)


def select_probes(images: Mapping[str, Sequence], m: int, rng: np.random.Generator) -> dict[str, list]:
    """Draw ``m`` images per class uniformly without replacement (classes in mapping order)."""
    chosen = {}
    for name, items in images.items():
        items = list(items)
        if len(items) < m:
            raise InputError(f"class {name!r} has {len(items)} images, fewer than m={m}")
        picks = rng.choice(len(items), size=m, replace=False)
        chosen[name] = [items[i] for i in sorted(picks)]
    return chosen


class Temperature(nn.Module):
    """Learnable softmax temperature stored as ``log(tau)``."""

    def __init__(self, tau: float = 0.07):
        super().__init__()
        if not tau > 0:
            raise ValueError("temperature must be positive")
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau), dtype=torch.float64))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()


def contrastive_loss(image_emb: torch.Tensor, text_emb: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE summed over the batch.

    Row ``i`` of each input is a positive pair.  The temperature divides every
    logit, numerator and denominator alike, in both directions.
    """
    if image_emb.shape != text_emb.shape or image_emb.dim() != 2:
        raise ShapeError(f"embedding batches differ: {tuple(image_emb.shape)} vs {tuple(text_emb.shape)}")
    if image_emb.shape[0] < 1:
        raise InputError("empty batch")
    tau_t = torch.as_tensor(tau, dtype=image_emb.dtype)
    if not bool(tau_t > 0):
        raise ValueError(f"temperature must be positive, got {float(tau_t)}")
    logits = image_emb @ text_emb.T / tau_t
    target = torch.arange(logits.shape[0])
    return F.cross_entropy(logits, target, reduction="sum") + F.cross_entropy(logits.T, target, reduction="sum")
