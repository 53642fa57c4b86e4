"""Pretrain / finetune / compress / evaluate experiments on the toy corpora."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

from .data import VOCAB, Corpora, make_corpora
from .model import ToyModel
from .pipeline import (
    CompressionConfig,
    baseline_fwsvd,
    baseline_svd_truncate,
    compress,
    compression_ratio,
)
from .report import ReportRow
from .train import Adam, MinibatchStream, TrainingDiverged, cosine_lr, evaluate, train

log = logging.getLogger(__name__)

METHODS = ("basis-selection", "svd", "fwsvd")


class TrainingFailed(RuntimeError):
    pass


@dataclass
class HarnessConfig:
    width: int = 64
    hidden: int = 256
    depth: int = 3
    context: int = 8
    batch_size: int = 128
    data_seed: int = 0
    pretrain_lines: int = 20000
    target_lines: int = 8000
    pretrain_epochs: float = 4.0
    pretrain_lr: float = 1e-3
    pretrain_loss_threshold: float = 1.2
    finetune_epochs: float = 1.0
    finetune_lr: float = 5e-4
    lr_floor: float = 1e-5
    fisher_batches: int = 64
    target_task: str = "arithmetic"
    rank_source: str = "matched"  # baselines reuse basis-selection ranks, or "mass"

    def corpora(self) -> Corpora:
        return make_corpora(self.data_seed, self.pretrain_lines, self.target_lines)


@dataclass(frozen=True)
class GridPoint:
    method: str
    config: CompressionConfig = field(hash=False)
    target_task: str = "arithmetic"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")


def build_model(cfg: HarnessConfig, seed: int) -> ToyModel:
    model = ToyModel.init(len(VOCAB), cfg.width, cfg.hidden, cfg.depth, cfg.context, seed=seed)
    model.meta["data_seed"] = float(cfg.data_seed)
    return model


def _fit(model, lines, epochs, lr, floor, batch_size, seed):
    out = model.copy()
    stream = MinibatchStream.from_lines(lines, out.context, batch_size, seed)
    n = stream.iterations(epochs)
    losses = train(out, stream, n, Adam(lr), schedule=cosine_lr(lr, floor, n)) if n else []
    return out, losses


def pretrain(model: ToyModel, corpus: list[str], epochs: float, seed: int, lr: float = 1e-3,
             batch_size: int = 128, lr_floor: float = 1e-5, loss_threshold: float | None = None):
    """Train a copy on ``corpus``; returns ``(trained_model, per-iteration losses)``."""
    trained, losses = _fit(model, corpus, epochs, lr, lr_floor, batch_size, [seed, 0])
    if loss_threshold is not None and losses:
        tail = losses[-max(1, len(losses) // 20):]
        final = sum(tail) / len(tail)
        if final > loss_threshold:
            raise TrainingFailed(f"final train loss {final:.4f} above threshold {loss_threshold}")
    return trained, losses


def finetune(model: ToyModel, lines: list[str], epochs: float, seed: int, lr: float = 5e-4,
             batch_size: int = 128, lr_floor: float = 1e-5) -> ToyModel:
    return _fit(model, lines, epochs, lr, lr_floor, batch_size, [seed, 1])[0]


def pretrain_from_config(cfg: HarnessConfig, seed: int) -> tuple[ToyModel, list[float]]:
    corpora = cfg.corpora()
    model = build_model(cfg, seed)
    return pretrain(model, corpora.pretrain, cfg.pretrain_epochs, seed, cfg.pretrain_lr,
                    cfg.batch_size, cfg.lr_floor, cfg.pretrain_loss_threshold)


def presets(name: str, seeds=(0, 1, 2), base: CompressionConfig | None = None,
            target_task: str = "arithmetic") -> list[GridPoint]:
    """Named experiment grids.

    ``main`` runs all three methods over a keep-ratio sweep. The ablations
    vary only basis selection: additional dimension 0 vs 32 at shared keep
    ratios, and 2 vs 100 pruning rounds. Fewer rounds prune much deeper at a
    given keep ratio, so each round count gets keep ratios that land in the
    same 10x-20x compression band.
    """
    base = base or CompressionConfig()

    def pts(method, settings):
        return [GridPoint(method, replace(base, seed=s, **kw), target_task)
                for kw in settings for s in seeds]

    if name == "main":
        sweep = [dict(keep_ratio=k, pruning_times=20, additional_dim=0) for k in (0.3, 0.15, 0.04, 0.02)]
        return [p for m in METHODS for p in pts(m, sweep)]
    if name == "ablation-additional-dim":
        return pts("basis-selection", [dict(keep_ratio=k, pruning_times=20, additional_dim=d)
                                       for d in (0, 32) for k in (0.15, 0.04, 0.02)])
    if name == "ablation-pruning-times":
        return pts("basis-selection",
                   [dict(keep_ratio=k, pruning_times=2, additional_dim=0) for k in (0.1, 0.07, 0.04)]
                   + [dict(keep_ratio=k, pruning_times=100, additional_dim=0) for k in (1e-5, 1e-7, 1e-9)])
    if name == "smoke":
        cfg = dict(keep_ratio=0.15, pruning_times=4, keeping_epoch=0.1, pruning_epoch=0.2,
                   post_finetune_epoch=0.1)
        return [p for m in METHODS for p in pts(m, [cfg])]
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("main", "ablation-additional-dim", "ablation-pruning-times", "smoke")


class Experiment:
    """Runs grid points against one pretrained model, caching finetunes and matched ranks."""

    def __init__(self, pretrained: ToyModel, cfg: HarnessConfig | None = None):
        self.pretrained = pretrained
        self.cfg = cfg or HarnessConfig(data_seed=int(pretrained.meta.get("data_seed", 0)))
        self.corpora = self.cfg.corpora()
        self._finetuned: dict = {}
        self._bs: dict = {}

    def task(self, name):
        try:
            return self.corpora.tasks[name]
        except KeyError:
            raise ValueError(f"unknown task {name!r}") from None

    def finetuned(self, seed: int, task: str) -> ToyModel:
        key = (seed, task)
        if key not in self._finetuned:
            c = self.cfg
            self._finetuned[key] = finetune(self.pretrained, self.task(task).train_lines,
                                            c.finetune_epochs, seed, c.finetune_lr,
                                            c.batch_size, c.lr_floor)
        return self._finetuned[key]

    def stream(self, point: GridPoint) -> MinibatchStream:
        return MinibatchStream.from_lines(self.task(point.target_task).train_lines,
                                          self.pretrained.context, self.cfg.batch_size,
                                          [point.config.seed, 2])

    def basis_selection(self, point: GridPoint):
        key = (point.target_task, repr(sorted(asdict(point.config).items())))
        if key not in self._bs:
            model = self.finetuned(point.config.seed, point.target_task)
            self._bs[key] = compress(model, self.stream(point), point.config)
        return self._bs[key]

    def run_point(self, point: GridPoint) -> ReportRow:
        start = time.perf_counter()
        cfg = point.config
        base = self.finetuned(cfg.seed, point.target_task)
        layers = cfg.selected(base)
        if point.method == "basis-selection":
            model = self.basis_selection(point).model
        else:
            if self.cfg.rank_source == "matched":
                ranks = self.basis_selection(replace(point, method="basis-selection")).ranks
                mass = None
            else:
                ranks, mass = None, cfg.keep_ratio
            if point.method == "svd":
                model = baseline_svd_truncate(base, ranks=ranks, mass_ratio=mass, layers=layers,
                                              stream=self.stream(point), config=cfg)
            else:
                if ranks is None:
                    ranks = [b.rank for b in
                             (baseline_svd_truncate(base, mass_ratio=mass, layers=layers).blocks[i]
                              for i in layers)]
                model = baseline_fwsvd(base, self.stream(point), ranks, layers=layers, config=cfg,
                                       fisher_batches=self.cfg.fisher_batches)
        acc = evaluate(model, self.task(point.target_task))
        return ReportRow(
            method=point.method,
            seed=cfg.seed,
            keep_ratio=cfg.keep_ratio,
            pruning_times=cfg.pruning_times,
            additional_dim=cfg.additional_dim,
            compression_ratio=compression_ratio(self.pretrained, model),
            rank_per_layer=[model.blocks[i].rank for i in layers],
            target_task=point.target_task,
            accuracy=acc,
            wall_seconds=time.perf_counter() - start,
        )


def run_experiment(pretrained: ToyModel, grid: list[GridPoint], cfg: HarnessConfig | None = None,
                   on_row=None) -> list[ReportRow]:
    """One report row per grid point: finetune, compress with the method, post-finetune, evaluate."""
    exp = Experiment(pretrained, cfg)
    rows = []
    for point in grid:
        try:
            row = exp.run_point(point)
        except TrainingDiverged:
            log.error("grid point %s diverged", point)
            raise
        rows.append(row)
        log.info("%s seed=%d keep=%.3g T=%d r~=%d ratio=%.2f acc=%.4f", row.method, row.seed,
                 row.keep_ratio, row.pruning_times, row.additional_dim, row.compression_ratio,
                 row.accuracy)
        if on_row is not None:
            on_row(row)
    return rows
