"""Basis Selection compression loop and the SVD / FWSVD truncation baselines."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .layer import DenseLinear, FactorizedLinear, finalize, low_rank_pair, select_by_mass
from .linalg import svd
from .model import ToyModel
from .train import Adam, MinibatchStream, cosine_lr, train

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class CompressionConfig:
    keep_ratio: float = 0.25
    pruning_times: int = 10
    keeping_epoch: float = 0.5
    pruning_epoch: float = 1.0
    post_finetune_epoch: float = 1.0
    additional_dim: int = 0
    lr: float = 1e-3
    post_lr: float = 1e-3
    lr_floor: float = 1e-5
    seed: int = 0
    layers: list[int] | None = None  # block indices to compress; None = every block

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if int(self.pruning_times) != self.pruning_times or self.pruning_times < 1:
            raise ConfigError(f"pruning_times must be a positive integer, got {self.pruning_times}")
        for name in ("keeping_epoch", "pruning_epoch", "post_finetune_epoch", "lr", "post_lr", "lr_floor"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a nonnegative number, got {value}")
        if int(self.additional_dim) != self.additional_dim or self.additional_dim < 0:
            raise ConfigError(f"additional_dim must be a nonnegative integer, got {self.additional_dim}")

    @property
    def keep_ratio_per_pruning(self) -> float:
        return self.keep_ratio ** (1.0 / self.pruning_times)

    def iterations_per_pruning(self, iterations_per_epoch: int) -> int:
        return int(math.floor(iterations_per_epoch * self.pruning_epoch / self.pruning_times + 0.5))

    def selected(self, model: ToyModel) -> list[int]:
        if self.layers is None:
            return list(range(len(model.blocks)))
        bad = [i for i in self.layers if not 0 <= i < len(model.blocks)]
        if bad:
            raise ConfigError(f"no such blocks: {bad}")
        return sorted(set(self.layers))


@dataclass
class CompressionEvent:
    iteration: int
    ranks: list[int]
    kept_mass: list[float]  # cumulative fraction of the converted layer's initial mass schedule
    loss: float
    elapsed: float
    layers: list[int] = field(default_factory=list)
    weights_before: list[np.ndarray] = field(default_factory=list, repr=False)
    kept: list[np.ndarray] = field(default_factory=list, repr=False)

    def numeric_key(self):
        """Everything except wall-clock time, for determinism checks."""
        return (self.iteration, tuple(self.ranks), tuple(self.kept_mass),
                self.loss, tuple(self.layers),
                tuple(w.tobytes() for w in self.weights_before),
                tuple(k.tobytes() for k in self.kept))


@dataclass
class CompressionResult:
    model: ToyModel
    events: list[CompressionEvent]
    keep_ratio_per_pruning: float
    iterations_per_pruning: int
    ranks: list[int]
    pre_finalize_ranks: list[int]


def convert(model: ToyModel, layers, additional_dim: int, seed: int) -> ToyModel:
    """Copy of ``model`` with the chosen dense blocks in basis-expanded form."""
    out = model.copy()
    for i in layers:
        blk = out.blocks[i]
        if not isinstance(blk, DenseLinear):
            raise ConfigError(f"block {i} is {blk.kind}, expected dense")
        out.blocks[i] = FactorizedLinear.from_dense(blk.weight, blk.bias, additional_dim,
                                                    seed=[seed, i])
    return out


def post_finetune(model: ToyModel, stream: MinibatchStream, config: CompressionConfig) -> list[float]:
    n = stream.iterations(config.post_finetune_epoch)
    if n == 0:
        return []
    opt = Adam(config.post_lr)
    return train(model, stream, n, opt, schedule=cosine_lr(config.post_lr, config.lr_floor, n))


def compress(model: ToyModel, stream: MinibatchStream, config: CompressionConfig) -> CompressionResult:
    """Convert, tune, prune gradually, finalize and post-finetune."""
    config.validate()
    layers = config.selected(model)
    ipe = stream.iterations_per_epoch
    per = config.iterations_per_pruning(ipe)
    ratio = config.keep_ratio_per_pruning
    log.info("keep_ratio_per_pruning=%.6g iterations_per_pruning=%d", ratio, per)

    work = convert(model, layers, config.additional_dim, config.seed)
    opt = Adam(config.lr)
    start = time.perf_counter()
    last_loss = [math.nan]

    def remember(_, loss):
        last_loss[0] = loss

    train(work, stream, stream.iterations(config.keeping_epoch), opt, on_step=remember)

    cumulative = {i: 1.0 for i in layers}
    events = []
    iteration = 0
    for _ in range(config.pruning_times):
        train(work, stream, per, opt, on_step=remember)
        iteration += per
        before, kept_idx = [], []
        for i in layers:
            blk = work.blocks[i]
            w = blk.weights.copy()
            total = np.abs(w).sum()
            kept = select_by_mass(w, ratio)
            blk.keep(kept)
            opt.select(f"blocks.{i}.weights", kept)
            cumulative[i] *= (np.abs(blk.weights).sum() / total) if total > 0 else 1.0
            before.append(w)
            kept_idx.append(blk.basis_index.copy())
        events.append(CompressionEvent(
            iteration=iteration,
            ranks=[work.blocks[i].rank for i in layers],
            kept_mass=[float(cumulative[i]) for i in layers],
            loss=float(last_loss[0]),
            elapsed=time.perf_counter() - start,
            layers=list(layers),
            weights_before=before,
            kept=kept_idx,
        ))

    pre_ranks = [work.blocks[i].rank for i in layers]
    for i in layers:
        work.blocks[i] = finalize(work.blocks[i])
    post_finetune(work, stream, config)
    return CompressionResult(work, events, ratio, per, [work.blocks[i].rank for i in layers], pre_ranks)


def _resolve_ranks(layers, ranks, mass_ratio, spectra):
    if (ranks is None) == (mass_ratio is None):
        raise ConfigError("give exactly one of ranks or mass_ratio")
    if mass_ratio is not None:
        return [int(select_by_mass(s, mass_ratio).size) for s in spectra]
    if isinstance(ranks, (int, np.integer)):
        ranks = [int(ranks)] * len(layers)
    ranks = [int(k) for k in ranks]
    if len(ranks) != len(layers):
        raise ConfigError(f"{len(ranks)} ranks given for {len(layers)} layers")
    if any(k <= 0 for k in ranks):
        raise ConfigError(f"ranks must be positive, got {ranks}")
    return ranks


def baseline_svd_truncate(model: ToyModel, ranks=None, mass_ratio=None, layers=None,
                          stream: MinibatchStream | None = None,
                          config: CompressionConfig | None = None) -> ToyModel:
    """Keep the top-k original singular triplets of each layer, then finalize.

    Give either ``ranks`` (an int or one per layer) or ``mass_ratio`` (the
    same prefix-mass rule used for pruning, applied to the original
    spectrum). With a ``stream`` and ``config`` the result is post-finetuned.
    """
    layers = list(range(len(model.blocks))) if layers is None else sorted(set(layers))
    decs = [svd(model.blocks[i].weight) for i in layers]
    ks = _resolve_ranks(layers, ranks, mass_ratio, [d.s for d in decs])
    out = model.copy()
    for i, dec, k in zip(layers, decs, ks):
        k = min(k, dec.rank)
        out.blocks[i] = low_rank_pair(dec.u[:, :k], dec.s[:k], dec.v[:, :k], model.blocks[i].bias)
    if stream is not None and config is not None:
        post_finetune(out, stream, config)
    return out


def row_importance(model: ToyModel, stream: MinibatchStream, layers, batches: int) -> dict[int, np.ndarray]:
    """Per output row, the sum over ``batches`` minibatches of squared loss gradients."""
    imp = {i: np.zeros(model.blocks[i].out_features) for i in layers}
    probe = model.copy()
    for _ in range(batches):
        xb, yb = stream.next()
        probe.loss_and_grad(xb, yb)
        for i in layers:
            imp[i] += np.sum(np.square(probe.grads[f"blocks.{i}.weight"]), axis=1)
    return imp


IMPORTANCE_FLOOR = 1e-6


def weighted_truncation(w, importance, k: int, floor: float = IMPORTANCE_FLOOR):
    """Rank-k factors of W minimizing the row-importance-weighted squared error.

    Zero rows take the smallest positive importance. Anything still below
    ``floor * max`` is raised to it: gradient energies of near-dead units
    reach 1e-40 and the inverse row scaling would otherwise blow rounding
    error up to the size of the weights. Returns (u, s, v) with
    W_hat = u diag(s) v^T; ``u`` already carries the inverse row scaling.
    """
    importance = np.array(importance, dtype=np.float64)
    positive = importance[importance > 0]
    if positive.size == 0:
        importance[:] = 1.0
    else:
        importance[importance <= 0] = positive.min()
        importance = np.maximum(importance, floor * positive.max())
    scale = np.sqrt(importance)
    dec = svd(scale[:, None] * np.asarray(w, dtype=np.float64))
    k = min(k, dec.rank)
    return dec.u[:, :k] / scale[:, None], dec.s[:k], dec.v[:, :k]


def baseline_fwsvd(model: ToyModel, stream: MinibatchStream, ranks, layers=None,
                   config: CompressionConfig | None = None, fisher_batches: int = 64) -> ToyModel:
    """Fisher-weighted SVD truncation with row-wise importance, then finalize (and post-finetune)."""
    layers = list(range(len(model.blocks))) if layers is None else sorted(set(layers))
    ks = _resolve_ranks(layers, ranks, None, None)
    imp = row_importance(model, stream, layers, fisher_batches)
    out = model.copy()
    for i, k in zip(layers, ks):
        u, s, v = weighted_truncation(model.blocks[i].weight, imp[i], k)
        out.blocks[i] = low_rank_pair(u, s, v, model.blocks[i].bias)
    if config is not None:
        post_finetune(out, stream, config)
    return out


def compression_ratio(original: ToyModel, compressed: ToyModel) -> float:
    denom = compressed.num_params()
    if denom == 0:
        raise ZeroDivisionError("compressed model has no parameters")
    return original.num_params() / denom
