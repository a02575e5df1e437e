"""Two-layer graph convolution over per-class semantic vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import InputDataError

LEAKY_SLOPE = 0.2


@dataclass
class SemanticTable:
    """Per-class side information, rows in ascending class-id order."""

    class_ids: list
    names: list
    seen: np.ndarray  # bool per class
    word: np.ndarray  # C x d_w
    attr: np.ndarray  # C x d_a

    def __post_init__(self):
        self.seen = np.asarray(self.seen, dtype=bool)
        self.word = np.asarray(self.word, dtype=float)
        self.attr = np.asarray(self.attr, dtype=float)
        C = len(self.class_ids)
        if len(set(self.class_ids)) != C:
            raise InputDataError("duplicate class id in semantic table")
        if self.word.ndim != 2 or self.word.shape[0] != C:
            raise InputDataError(f"word vectors must be {C} x d_w, got {self.word.shape}")
        if self.attr.ndim != 2 or self.attr.shape[0] != C:
            raise InputDataError(f"attribute vectors must be {C} x d_a, got {self.attr.shape}")
        if not (np.isfinite(self.word).all() and np.isfinite(self.attr).all()):
            raise InputDataError("semantic vectors contain non-finite values")

    @property
    def seen_ids(self) -> list:
        return [c for c, s in zip(self.class_ids, self.seen) if s]

    @property
    def unseen_ids(self) -> list:
        return [c for c, s in zip(self.class_ids, self.seen) if not s]

    def index(self, class_id) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise InputDataError(f"unknown class id {class_id!r}") from None

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SemanticTable":
        try:
            rows = sorted(doc["classes"], key=lambda r: r["id"])
            split = [r["split"] for r in rows]
            if any(s not in ("seen", "unseen") for s in split):
                raise InputDataError("class split must be 'seen' or 'unseen'")
            return cls(
                class_ids=[r["id"] for r in rows],
                names=[r.get("name", str(r["id"])) for r in rows],
                seen=[s == "seen" for s in split],
                word=[r["word_vec"] for r in rows],
                attr=[r["attr_vec"] for r in rows],
            )
        except KeyError as exc:
            raise InputDataError(f"semantic table entry missing key {exc}") from None
        except ValueError as exc:
            if isinstance(exc, InputDataError):
                raise
            raise InputDataError(f"ragged semantic vectors: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "classes": [
                {
                    "id": c,
                    "name": name,
                    "split": "seen" if s else "unseen",
                    "word_vec": w.tolist(),
                    "attr_vec": a.tolist(),
                }
                for c, name, s, w, a in zip(self.class_ids, self.names, self.seen, self.word, self.attr)
            ]
        }


def graph_convolve(V: torch.Tensor, A_hat: torch.Tensor, W1: torch.Tensor, W2: torch.Tensor) -> torch.Tensor:
    """``A_hat @ leaky_relu(A_hat @ V @ W1) @ W2``; no activation after the second layer."""
    n, d = V.shape
    if A_hat.shape != (n, n):
        raise InputDataError(f"adjacency is {tuple(A_hat.shape)}, expected ({n}, {n})")
    if W1.shape[0] != d or W2.shape[0] != W1.shape[1]:
        raise InputDataError(
            f"GCN weight shapes {tuple(W1.shape)}, {tuple(W2.shape)} do not chain from input dim {d}"
        )
    hidden = F.leaky_relu(A_hat @ V @ W1, LEAKY_SLOPE)
    return A_hat @ hidden @ W2


class GcnWeights(nn.Module):
    def __init__(self, in_dim: int, latent_dim: int, out_dim: int | None = None):
        super().__init__()
        out_dim = in_dim if out_dim is None else out_dim
        self.W1 = nn.Parameter(torch.empty(in_dim, latent_dim))
        self.W2 = nn.Parameter(torch.empty(latent_dim, out_dim))
        nn.init.xavier_uniform_(self.W1)
        nn.init.xavier_uniform_(self.W2)

    def forward(self, V: torch.Tensor, A_hat: torch.Tensor) -> torch.Tensor:
        return graph_convolve(V, A_hat, self.W1, self.W2)
