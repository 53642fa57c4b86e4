"""RunReport CSV rows, merging, per-grid-point summaries and figures."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

FIELDS = ("method", "seed", "keep_ratio", "pruning_times", "additional_dim", "compression_ratio",
          "rank_per_layer", "target_task", "accuracy", "wall_seconds")
GROUP_KEYS = ("target_task", "method", "keep_ratio", "pruning_times", "additional_dim")


@dataclass
class ReportRow:
    method: str
    seed: int
    keep_ratio: float
    pruning_times: int
    additional_dim: int
    compression_ratio: float
    rank_per_layer: list[int] = field(default_factory=list)
    target_task: str = "arithmetic"
    accuracy: float = 0.0
    wall_seconds: float = 0.0

    def as_csv(self) -> dict[str, str]:
        d = asdict(self)
        d["rank_per_layer"] = ";".join(str(r) for r in self.rank_per_layer)
        for k in ("keep_ratio", "compression_ratio", "accuracy", "wall_seconds"):
            d[k] = repr(float(d[k]))
        return {k: str(d[k]) for k in FIELDS}

    @classmethod
    def from_csv(cls, rec: dict[str, str]) -> "ReportRow":
        missing = [k for k in FIELDS if k not in rec]
        if missing:
            raise ValueError(f"report row is missing columns {missing}")
        ranks = rec["rank_per_layer"]
        return cls(
            method=rec["method"],
            seed=int(rec["seed"]),
            keep_ratio=float(rec["keep_ratio"]),
            pruning_times=int(rec["pruning_times"]),
            additional_dim=int(rec["additional_dim"]),
            compression_ratio=float(rec["compression_ratio"]),
            rank_per_layer=[int(r) for r in ranks.split(";")] if ranks else [],
            target_task=rec["target_task"],
            accuracy=float(rec["accuracy"]),
            wall_seconds=float(rec["wall_seconds"]),
        )

    def numeric_key(self):
        """Every field except wall-clock time."""
        return (self.method, self.seed, self.keep_ratio, self.pruning_times, self.additional_dim,
                self.compression_ratio, tuple(self.rank_per_layer), self.target_task, self.accuracy)


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row.as_csv())


def read_report(path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != list(FIELDS):
            raise ValueError(f"{path}: header does not match RunReport schema")
        return [ReportRow.from_csv(rec) for rec in reader]


def sort_rows(rows):
    return sorted(rows, key=lambda r: (r.target_task, r.method, r.compression_ratio,
                                       r.keep_ratio, r.pruning_times, r.additional_dim, r.seed))


def merge_reports(paths) -> list[ReportRow]:
    rows = []
    for p in paths:
        rows.extend(read_report(p))
    return sort_rows(rows)


@dataclass
class SummaryRow:
    target_task: str
    method: str
    keep_ratio: float
    pruning_times: int
    additional_dim: int
    n: int
    ratio_mean: float
    accuracy_mean: float
    accuracy_std: float


def summarize(rows) -> list[SummaryRow]:
    """Mean and sample standard deviation of accuracy per grid point (seeds pooled)."""
    groups = defaultdict(list)
    for r in rows:
        groups[tuple(getattr(r, k) for k in GROUP_KEYS)].append(r)
    out = []
    for key, members in groups.items():
        accs = [m.accuracy for m in members]
        n = len(accs)
        mean = sum(accs) / n
        std = math.sqrt(sum((a - mean) ** 2 for a in accs) / (n - 1)) if n > 1 else 0.0
        ratio = sum(m.compression_ratio for m in members) / n
        out.append(SummaryRow(*key, n=n, ratio_mean=ratio, accuracy_mean=mean, accuracy_std=std))
    out.sort(key=lambda s: (s.target_task, s.method, s.ratio_mean, s.pruning_times, s.additional_dim))
    return out


def write_summary(summary, path) -> None:
    names = list(SummaryRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for s in summary:
            w.writerow([getattr(s, k) for k in names])


def format_table(summary) -> str:
    lines = [f"{'task':<11} {'method':<16} {'T':>4} {'r~':>3} {'keep':>8} {'ratio':>7} {'acc':>7} {'std':>6} {'n':>2}"]
    for s in summary:
        lines.append(f"{s.target_task:<11} {s.method:<16} {s.pruning_times:>4} {s.additional_dim:>3} "
                     f"{s.keep_ratio:>8.3g} {s.ratio_mean:>7.2f} {s.accuracy_mean:>7.4f} "
                     f"{s.accuracy_std:>6.4f} {s.n:>2}")
    return "\n".join(lines)


def series_label(s) -> str:
    label = s.method
    if s.method == "basis-selection":
        label += f" (T={s.pruning_times}, r~={s.additional_dim})"
    return label


def plot_summary(summary, out_dir) -> list[Path]:
    """Accuracy vs. compression ratio, one PNG per task, error bars = seed std."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    for task in sorted({s.target_task for s in summary}):
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        series = defaultdict(list)
        for s in summary:
            if s.target_task == task:
                series[series_label(s)].append(s)
        for label, pts in sorted(series.items()):
            pts.sort(key=lambda s: s.ratio_mean)
            ax.errorbar([p.ratio_mean for p in pts], [p.accuracy_mean for p in pts],
                        yerr=[p.accuracy_std for p in pts], marker="o", capsize=3, label=label)
        ax.set_xlabel("compression ratio")
        ax.set_ylabel("exact-match accuracy")
        ax.set_title(task)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"accuracy_vs_ratio_{task}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
