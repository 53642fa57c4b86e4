"""Feed-forward next-character model with swappable linear blocks."""

from __future__ import annotations

import copy

import numpy as np

from .layer import DenseLinear, FactorizedLinear, FinalizedLinear


class ToyModel:
    """Embeddings of a ``context``-char window, concatenated, then ReLU blocks and a vocab head.

    ``blocks`` holds dense, factorized or finalized linear layers; each is
    followed by a ReLU. Column-batch layout throughout: logits are ``(V, B)``.
    """

    def __init__(self, embedding, blocks, head: DenseLinear, context: int, meta=None):
        self.embedding = np.array(embedding, dtype=np.float64)
        self.blocks = list(blocks)
        self.head = head
        self.context = int(context)
        self.meta: dict[str, float] = dict(meta or {})
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    @classmethod
    def init(cls, vocab: int, width: int = 64, hidden: int = 256, depth: int = 3,
             context: int = 8, seed: int = 0) -> "ToyModel":
        if not 1 <= depth:
            raise ValueError("depth must be at least 1")
        rng = np.random.default_rng(seed)
        embedding = rng.normal(0.0, 1.0, size=(vocab, width))
        blocks = []
        fan_in = width * context
        for _ in range(depth):
            blocks.append(DenseLinear.init(fan_in, hidden, rng))
            fan_in = hidden
        head = DenseLinear.init(hidden, vocab, rng)
        head.weight *= 0.5
        return cls(embedding, blocks, head, context)

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def width(self) -> int:
        return self.embedding.shape[1]

    def copy(self) -> "ToyModel":
        clone = copy.deepcopy(self)
        clone._cache = None
        return clone

    def forward(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        b = tokens.shape[0]
        h = self.embedding[tokens].reshape(b, -1).T
        masks = []
        for blk in self.blocks:
            h = blk.forward(h)
            mask = h > 0
            h = h * mask
            masks.append(mask)
        self._cache = (tokens, masks)
        return self.head.forward(h)

    def backward(self, dlogits) -> None:
        tokens, masks = self._cache
        g = self.head.backward(dlogits)
        for blk, mask in zip(reversed(self.blocks), reversed(masks)):
            g = blk.backward(g * mask)
        onehot = np.zeros((tokens.size, self.vocab))
        onehot[np.arange(tokens.size), tokens.reshape(-1)] = 1.0
        d_emb = onehot.T @ g.T.reshape(-1, self.width)
        grads = {"embedding": d_emb}
        for i, blk in enumerate(self.blocks):
            grads.update({f"blocks.{i}.{k}": v for k, v in blk.grads.items()})
        grads.update({f"head.{k}": v for k, v in self.head.grads.items()})
        self.grads = grads

    def loss_and_grad(self, tokens, targets) -> float:
        logits = self.forward(tokens)
        loss, dlogits = cross_entropy(logits, targets)
        self.backward(dlogits)
        return loss

    def params(self) -> dict[str, np.ndarray]:
        p = {"embedding": self.embedding}
        for i, blk in enumerate(self.blocks):
            p.update({f"blocks.{i}.{k}": v for k, v in blk.params().items()})
        p.update({f"head.{k}": v for k, v in self.head.params().items()})
        return p

    def num_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def predict(self, tokens) -> np.ndarray:
        return np.argmax(self.forward(tokens), axis=0)

    def factorized(self) -> list[tuple[int, FactorizedLinear]]:
        return [(i, b) for i, b in enumerate(self.blocks) if isinstance(b, FactorizedLinear)]

    def ranks(self) -> list[int]:
        """Rank per block: full rank for dense layers."""
        out = []
        for blk in self.blocks:
            if isinstance(blk, (FactorizedLinear, FinalizedLinear)):
                out.append(blk.rank)
            else:
                out.append(min(blk.weight.shape))
        return out


def cross_entropy(logits, targets) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over columns and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(z)
    norm = p.sum(axis=0, keepdims=True)
    p /= norm
    b = logits.shape[1]
    cols = np.arange(b)
    loss = float(np.mean(np.log(norm[0]) - z[targets, cols]))
    p[targets, cols] -= 1.0
    return loss, p / b
