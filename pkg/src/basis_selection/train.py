"""Optimizer, minibatch stream, training loop and exact-match evaluation."""

from __future__ import annotations

import logging
import math

import numpy as np

from .data import CHAR_TO_ID, SEP, TaskSpec, decode, split_prompt, windows

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        if self.lr == 0.0:
            return
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None or m.shape != p.shape:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            denom = np.sqrt(v * (1.0 / c2))
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= self.lr / c1
            p -= denom

    def select(self, name: str, kept) -> None:
        """Keep only the moment entries of ``name`` at positions ``kept`` (last axis)."""
        if name in self.m:
            self.m[name] = self.m[name][..., kept]
            self.v[name] = self.v[name][..., kept]


class MinibatchStream:
    """Reshuffled-every-epoch minibatches over a fixed (X, Y) set."""

    def __init__(self, x, y, batch_size: int, seed: int):
        if len(y) == 0:
            raise ValueError("empty training data")
        self.x, self.y = x, y
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    @classmethod
    def from_lines(cls, lines, context: int, batch_size: int, seed: int) -> "MinibatchStream":
        x, y = windows(lines, context)
        return cls(x, y, batch_size, seed)

    @property
    def iterations_per_epoch(self) -> int:
        return math.ceil(len(self.y) / self.batch_size)

    def iterations(self, epochs: float) -> int:
        return int(math.floor(self.iterations_per_epoch * epochs + 0.5))

    def next(self):
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(len(self.y))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.x[idx], self.y[idx]


def cosine_lr(base: float, floor: float, iterations: int):
    """Cosine decay from ``base`` to ``floor`` over ``iterations`` steps (1-based)."""
    def schedule(it: int) -> float:
        if iterations <= 1:
            return base
        frac = (it - 1) / (iterations - 1)
        return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))
    return schedule


def train(model, stream: MinibatchStream, iterations: int, optimizer: Adam,
          on_step=None, schedule=None) -> list[float]:
    """Run ``iterations`` optimizer steps; ``on_step(i, loss)`` is called after each (1-based)."""
    losses = []
    for it in range(1, iterations + 1):
        if schedule is not None:
            optimizer.lr = schedule(it)
        xb, yb = stream.next()
        loss = model.loss_and_grad(xb, yb)
        if not math.isfinite(loss):
            raise TrainingDiverged(it, loss)
        optimizer.step(model.params(), model.grads)
        losses.append(loss)
        if on_step is not None:
            on_step(it, loss)
    return losses


def decode_answers(model, prompts: list[str], max_len: int) -> list[str]:
    """Greedy-decode ``max_len`` characters after each prompt, batched."""
    c = model.context
    seqs = [[CHAR_TO_ID[SEP]] * c + [CHAR_TO_ID[ch] for ch in p] for p in prompts]
    out = [[] for _ in prompts]
    for _ in range(max_len):
        ctx = np.array([s[-c:] for s in seqs], dtype=np.int64)
        nxt = model.predict(ctx)
        for s, o, t in zip(seqs, out, nxt):
            s.append(int(t))
            o.append(int(t))
    return [decode(o) for o in out]


def evaluate(model, task: TaskSpec, lines=None) -> float:
    """Fraction of eval lines whose answer span is reproduced exactly by greedy decoding."""
    lines = task.eval_lines if lines is None else lines
    if not lines:
        raise ValueError(f"task {task.name} has no eval lines")
    pairs = [split_prompt(line) for line in lines]
    max_len = max(len(a) for _, a in pairs)
    got = decode_answers(model, [p for p, _ in pairs], max_len)
    hits = sum(g[: len(a)] == a for g, (_, a) in zip(got, pairs))
    return hits / len(pairs)
