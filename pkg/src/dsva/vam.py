"""Visual-attribute mapping: attribute prototypes, attention maps and class scores."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn

from dsva.core import ClassAttributeMatrix, InputError, ShapeError


class PrototypeBank(nn.Module):
    """One trainable ``D``-dimensional prototype per attribute."""

    def __init__(self, num_attributes: int, dim: int):
        super().__init__()
        self.prototypes = nn.Parameter(torch.zeros(num_attributes, dim))

    @classmethod
    def initialized(cls, num_attributes: int, dim: int, generator: torch.Generator | None = None) -> "PrototypeBank":
        bank = cls(num_attributes, dim)
        with torch.no_grad():
            bank.prototypes.normal_(0.0, 1.0 / math.sqrt(dim), generator=generator)
        return bank

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return attention_maps(grid, self.prototypes)


class AttributePrediction(NamedTuple):
    values: torch.Tensor  # (..., N_a)
    argmax_patch: torch.Tensor  # (..., N_a) int64


def attention_maps(grid: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """``maps[..., i, r, c] = <prototypes[i], grid[..., r*k + c]>``.

    ``grid`` is ``(..., N, D)`` with ``N = k*k``; result is ``(..., N_a, k, k)``.
    """
    if grid.shape[-1] != prototypes.shape[-1]:
        raise ShapeError(f"token dim {grid.shape[-1]} != prototype dim {prototypes.shape[-1]}")
    N = grid.shape[-2]
    k = math.isqrt(N)
    if k * k != N:
        raise ShapeError(f"{N} tokens do not form a square grid")
    sims = grid @ prototypes.transpose(-1, -2)  # (..., N, N_a)
    return sims.transpose(-1, -2).reshape(*grid.shape[:-2], prototypes.shape[0], k, k)


def predict_attributes(maps: torch.Tensor) -> AttributePrediction:
    """Max-pool every attribute map; ties go to the lowest patch index."""
    flat = maps.flatten(-2)
    if flat.shape[-1] == 0:
        raise ShapeError("empty attention maps")
    values = flat.amax(dim=-1)
    # first position attaining the max (torch.argmax does not promise this)
    hits = flat == values.unsqueeze(-1)
    idx = torch.arange(flat.shape[-1], device=flat.device).expand_as(flat)
    argmax = torch.where(hits, idx, flat.shape[-1]).amin(dim=-1)
    return AttributePrediction(values, argmax)


def compatibility_scores(values: torch.Tensor, classes: ClassAttributeMatrix, subset: Sequence[str] | None = None) -> torch.Tensor:
    """Dot product of predicted attributes with (already normalized) class rows."""
    names = list(classes.class_names if subset is None else subset)
    if not names:
        raise InputError("empty class subset")
    if values.shape[-1] != classes.num_attributes:
        raise ShapeError(f"{values.shape[-1]} predicted attributes vs {classes.num_attributes} in matrix")
    rows = torch.as_tensor(classes.rows(names), dtype=values.dtype)
    return values @ rows.T
