"""Synthetic character corpora: single-digit arithmetic and mirrored strings."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

VOCAB = "0123456789+=;|abcdef"
CHAR_TO_ID = {c: i for i, c in enumerate(VOCAB)}
SEP = ";"
LETTERS = "abcdef"

DOMAINS = ("arithmetic", "patterns")


def encode(text: str) -> np.ndarray:
    return np.array([CHAR_TO_ID[c] for c in text], dtype=np.int64)


def decode(ids) -> str:
    return "".join(VOCAB[int(i)] for i in ids)


def arithmetic_problems() -> list[tuple[int, ...]]:
    two = list(itertools.product(range(10), repeat=2))
    three = list(itertools.product(range(10), repeat=3))
    return two + three


def pattern_problems() -> list[str]:
    out = []
    for k in (3, 4):
        out.extend("".join(p) for p in itertools.product(LETTERS, repeat=k))
    return out


def arithmetic_line(operands) -> str:
    return "+".join(str(a) for a in operands) + "=" + str(sum(operands)) + SEP


def pattern_line(word: str) -> str:
    return word + "|" + word[::-1] + SEP


def split_prompt(line: str) -> tuple[str, str]:
    """Split a line into (prompt, answer); the answer includes the trailing separator."""
    cut = line.index("=") if "=" in line else line.index("|")
    return line[: cut + 1], line[cut + 1 :]


@dataclass
class TaskSpec:
    name: str
    train_lines: list[str]
    eval_lines: list[str]
    metric: str = "exact-match"

    def __post_init__(self):
        overlap = set(self.train_lines) & set(self.eval_lines)
        if overlap:
            raise ValueError(f"task {self.name}: {len(overlap)} eval lines also appear in train")


@dataclass
class Corpora:
    seed: int
    pretrain: list[str]
    tasks: dict[str, TaskSpec] = field(default_factory=dict)


def _split(items, rng, eval_fraction):
    order = rng.permutation(len(items))
    n_eval = int(round(eval_fraction * len(items)))
    held = [items[i] for i in order[:n_eval]]
    train = [items[i] for i in order[n_eval:]]
    return train, held


def make_corpora(seed: int = 0, pretrain_lines: int = 20000, target_lines: int = 8000,
                 eval_fraction: float = 0.2) -> Corpora:
    """Seeded mixed-domain pretraining corpus plus one target task per domain.

    Held-out problems are excluded from every training corpus, so each
    task's eval lines never occur in pretraining or finetuning text.
    """
    rng = np.random.default_rng(seed)
    arith_train, arith_eval = _split(arithmetic_problems(), rng, eval_fraction)
    pat_train, pat_eval = _split(pattern_problems(), rng, eval_fraction)
    pools = {
        "arithmetic": [arithmetic_line(p) for p in arith_train],
        "patterns": [pattern_line(w) for w in pat_train],
    }

    domain = rng.integers(0, 2, size=pretrain_lines)
    pick = rng.random(pretrain_lines)
    pretrain = []
    for d, u in zip(domain, pick):
        pool = pools[DOMAINS[d]]
        pretrain.append(pool[int(u * len(pool))])

    tasks = {}
    for name, held in (("arithmetic", [arithmetic_line(p) for p in arith_eval]),
                       ("patterns", [pattern_line(w) for w in pat_eval])):
        pool = pools[name]
        idx = rng.integers(0, len(pool), size=target_lines)
        tasks[name] = TaskSpec(name, [pool[i] for i in idx], sorted(held))
    return Corpora(seed, pretrain, tasks)


def line_domain(line: str) -> str:
    return "arithmetic" if "=" in line else "patterns"


def windows(lines, context: int) -> tuple[np.ndarray, np.ndarray]:
    """Every (context window, next char) pair inside each line, left-padded with separators."""
    pad = [CHAR_TO_ID[SEP]] * context
    xs, ys = [], []
    for line in lines:
        ids = pad + [CHAR_TO_ID[c] for c in line]
        for j in range(context, len(ids)):
            xs.append(ids[j - context : j])
            ys.append(ids[j])
    return np.array(xs, dtype=np.int64).reshape(-1, context), np.array(ys, dtype=np.int64)
