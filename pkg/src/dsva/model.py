"""The full network: patch transformer followed by the prototype layer."""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from dsva.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dsva.core import Config, dump_config, parse_config
from dsva.encoder import Encoder, encode
from dsva.vam import AttributePrediction, PrototypeBank, attention_maps, predict_attributes


class Forward(NamedTuple):
    grid: torch.Tensor  # (B, N, D)
    maps: torch.Tensor  # (B, N_a, k, k)
    prediction: AttributePrediction
    attention: list  # per layer (B, heads, N, N)


class DSVAModel(nn.Module):
    def __init__(self, encoder: Encoder, bank: PrototypeBank):
        super().__init__()
        self.encoder = encoder
        self.bank = bank

    @classmethod
    def from_config(cls, config: Config, num_attributes: int, channels: int = 3, seed: int | None = None) -> "DSVAModel":
        gen = torch.Generator().manual_seed(config.seed if seed is None else seed)
        encoder = Encoder.from_config(config, channels=channels, generator=gen)
        bank = PrototypeBank.initialized(num_attributes, config.dim, generator=gen)
        return cls(encoder, bank)

    @property
    def grid_side(self) -> int:
        return self.encoder.grid

    @property
    def image_size(self) -> int:
        return self.encoder.grid * self.encoder.patch_side

    def forward(self, images) -> Forward:
        grid, attention = encode(images, self.encoder, return_attention=True)
        maps = attention_maps(grid, self.bank.prototypes)
        return Forward(grid, maps, predict_attributes(maps), attention)

    def backbone_parameters(self):
        return list(self.encoder.parameters())

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v.detach().cpu().numpy() for k, v in self.encoder.state_dict().items()}
        out["prototypes"] = self.bank.prototypes.detach().cpu().numpy()
        return out

    def save(self, path: str | os.PathLike, config: Config, attributes, extra: dict | None = None):
        meta = {
            "config": dump_config(config),
            "channels": self.encoder.channels,
            "attributes": list(attributes),
        }
        meta.update(extra or {})
        return save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> tuple["DSVAModel", Config, dict]:
        tensors, meta = load_checkpoint(path)
        if "config" not in meta:
            raise CheckpointError(f"{path}: sidecar lacks the hyperparameter record")
        config = parse_config(meta["config"])
        if "prototypes" not in tensors:
            raise CheckpointError(f"{path}: no prototype bank entry")
        model = cls.from_config(config, tensors["prototypes"].shape[0], channels=int(meta.get("channels", 3)))
        model.load_tensors(tensors)
        return model, config, meta

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.tensors()
        problems = [
            f"{name}: expected {own[name].shape}, found {'missing' if name not in tensors else tensors[name].shape}"
            for name in own
            if name not in tensors or tensors[name].shape != own[name].shape
        ]
        if problems:
            raise CheckpointError("checkpoint does not fit the model:\n  " + "\n  ".join(problems))
        with torch.no_grad():
            state = {k[len("encoder."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("encoder.")}
            self.encoder.load_state_dict(state)
            self.bank.prototypes.copy_(torch.from_numpy(tensors["prototypes"]))
