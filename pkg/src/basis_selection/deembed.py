"""De-embedding diagnostic: which vocabulary tokens each basis promotes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layer import FactorizedLinear
from .linalg import svd
from .model import ToyModel


@dataclass
class BasisTokens:
    basis_index: int
    weight: float
    tokens: list[int]


def _bases(block):
    if isinstance(block, FactorizedLinear):
        return block.base_u, block.weights, block.basis_index
    dec = svd(block.materialize())
    return dec.u, dec.s, np.arange(dec.rank)


def inspect_basis(model: ToyModel, layer: str, top_k: int = 10) -> list[BasisTokens]:
    """For each basis of ``layer`` by descending |weight|, the ``top_k`` tokens of head @ u_i."""
    prefix, _, idx = layer.partition(".")
    if prefix != "blocks" or not idx.isdigit() or int(idx) >= len(model.blocks):
        raise KeyError(f"unknown layer {layer!r}; expected blocks.0 .. blocks.{len(model.blocks) - 1}")
    block = model.blocks[int(idx)]
    if block.out_features != model.head.in_features:
        raise ValueError(f"{layer} outputs {block.out_features} features; head expects {model.head.in_features}")
    u, weights, index = _bases(block)
    order = np.argsort(-np.abs(weights), kind="stable")
    scores = model.head.weight @ u  # V x r
    out = []
    for i in order:
        ranked = np.argsort(-scores[:, i], kind="stable")[: max(top_k, 0)]
        out.append(BasisTokens(int(index[i]), float(weights[i]), [int(t) for t in ranked]))
    return out
