"""Multi-task metric aggregation and expert-activation telemetry."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import TaskMetric
from .moe import GatingDecision, Variant

HEATMAP_COLUMNS = ("task", "epoch", "layer", "expert_index", "is_shared", "frequency", "mean_weight")


def fmt(x: float) -> str:
    """17 significant digits: enough to round-trip any float64."""
    return format(float(x), ".17g")


def _by_task(metrics) -> dict[int, TaskMetric]:
    if isinstance(metrics, Mapping):
        return {int(k): v for k, v in metrics.items()}
    return {m.task_id: m for m in metrics}


def delta_m(mtl: Sequence[TaskMetric] | Mapping[int, TaskMetric], stl: Sequence[TaskMetric] | Mapping[int, TaskMetric]) -> float:
    """Average direction-signed relative change of ``mtl`` over ``stl``, in percent."""
    m, b = _by_task(mtl), _by_task(stl)
    if set(m) != set(b):
        raise ValueError(f"task sets differ: {sorted(m)} vs {sorted(b)}")
    if not m:
        raise ValueError("no tasks given")
    total = 0.0
    for t in sorted(m):
        base = b[t].value
        if base == 0:
            raise ZeroDivisionError(f"baseline metric for task {t} is zero")
        if m[t].lower_is_better != b[t].lower_is_better:
            raise ValueError(f"task {t}: metric directions disagree")
        sign = -1.0 if b[t].lower_is_better else 1.0
        total += sign * (m[t].value - base) / base
    return 100.0 * total / len(m)


@dataclass
class ActivationRecord:
    epoch: int
    layer: int
    task: int
    counts: np.ndarray
    weight_sums: np.ndarray
    tokens: int = 0


@dataclass
class ActivationSink:
    """Accumulates per (epoch, layer, task) activation tallies for one run."""

    n_experts: int
    n_shared: int
    variant: Variant = Variant.ASE
    records: dict[tuple[int, int, int], ActivationRecord] = field(default_factory=dict)

    def _record(self, epoch: int, layer: int, task: int) -> ActivationRecord:
        key = (epoch, layer, task)
        rec = self.records.get(key)
        if rec is None:
            rec = self.records[key] = ActivationRecord(
                epoch, layer, task, np.zeros(self.n_experts, dtype=np.int64), np.zeros(self.n_experts)
            )
        return rec

    def add_batch(self, epoch: int, layer: int, task: int, active: np.ndarray, weights: np.ndarray) -> None:
        """Tally a batch given (B, N) active mask and (B, N) gating weights."""
        active = np.asarray(active, dtype=bool)
        if active.shape[-1] != self.n_experts:
            raise IndexError(f"expected {self.n_experts} expert columns, got {active.shape[-1]}")
        rec = self._record(epoch, layer, task)
        rec.counts += active.sum(axis=0)
        rec.weight_sums += np.where(active, weights, 0.0).sum(axis=0)
        rec.tokens += active.shape[0]

    @property
    def epochs(self) -> list[int]:
        return sorted({k[0] for k in self.records})

    @property
    def tasks(self) -> list[int]:
        return sorted({k[2] for k in self.records})

    @property
    def layers(self) -> list[int]:
        return sorted({k[1] for k in self.records})

    def to_dict(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "n_shared": self.n_shared,
            "variant": self.variant.value,
            "records": [
                {"epoch": r.epoch, "layer": r.layer, "task": r.task, "tokens": r.tokens,
                 "counts": r.counts.tolist(), "weight_sums": r.weight_sums.tolist()}
                for r in self.records.values()
            ],
        }

    @classmethod
    def from_dict(cls, blob: dict) -> ActivationSink:
        sink = cls(blob["n_experts"], blob["n_shared"], Variant(blob["variant"]))
        for r in blob["records"]:
            sink.records[(r["epoch"], r["layer"], r["task"])] = ActivationRecord(
                r["epoch"], r["layer"], r["task"],
                np.array(r["counts"], dtype=np.int64), np.array(r["weight_sums"], dtype=np.float64), r["tokens"],
            )
        return sink


def record_activation(sink: ActivationSink, epoch: int, layer: int, task: int, decision: GatingDecision) -> None:
    """Tally one token's decision: every active expert (sparse and shared) gets a count."""
    idx = decision.expert_indices()
    if idx.size and (idx.min() < 0 or idx.max() >= sink.n_experts):
        raise IndexError(f"expert index out of range for {sink.n_experts} experts")
    active = np.zeros((1, sink.n_experts), dtype=bool)
    weights = np.zeros((1, sink.n_experts))
    active[0, idx] = True
    weights[0, idx] = decision.expert_weights()
    sink.add_batch(epoch, layer, task, active, weights)


def export_heatmap(sink: ActivationSink, epoch: int) -> dict[int, list[dict]]:
    """Per task, rows of (layer x expert) activation frequency for one epoch.

    Frequency is count / tokens for that layer; ``mean_weight`` is the mean
    gating weight over the tokens where the expert was active.
    """
    out: dict[int, list[dict]] = {}
    keys = sorted(k for k in sink.records if k[0] == epoch)
    if not keys:
        raise ValueError(f"no activation records for epoch {epoch}")
    for _, layer, task in sorted(keys, key=lambda k: (k[2], k[1])):
        rec = sink.records[(epoch, layer, task)]
        freq = rec.counts / max(rec.tokens, 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mw = np.where(rec.counts > 0, rec.weight_sums / np.maximum(rec.counts, 1), 0.0)
        rows = out.setdefault(task, [])
        for e in range(sink.n_experts):
            rows.append({
                "task": task, "epoch": epoch, "layer": layer, "expert_index": e,
                "is_shared": int(e < sink.n_shared), "frequency": float(freq[e]), "mean_weight": float(mw[e]),
            })
    return out


def heatmap_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEATMAP_COLUMNS)
    for r in rows:
        w.writerow([r["task"], r["epoch"], r["layer"], r["expert_index"], r["is_shared"],
                    fmt(r["frequency"]), fmt(r["mean_weight"])])
    return buf.getvalue()


def write_heatmaps(sink: ActivationSink, out_dir: str | Path, epochs: Sequence[int] | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for epoch in epochs if epochs is not None else sink.epochs:
        for task, rows in export_heatmap(sink, epoch).items():
            p = out_dir / f"heatmap_{task}_{epoch}.csv"
            p.write_text(heatmap_csv(rows))
            paths.append(p)
    return paths


@dataclass
class TrajectoryPoint:
    epoch: int
    per_layer: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_layer))


def shared_gate_trajectory(sink: ActivationSink) -> list[TrajectoryPoint]:
    """Mean weight of a shared expert, per epoch and layer, averaged over tasks and tokens."""
    if sink.variant is not Variant.ASE or sink.n_shared < 1:
        raise ValueError("shared gate trajectory needs adaptive-shared-expert records")
    if not sink.records:
        raise ValueError("no epochs recorded")
    points = []
    for epoch in sink.epochs:
        per_layer = []
        for layer in sink.layers:
            recs = [r for (e, l, _), r in sink.records.items() if e == epoch and l == layer]
            tokens = sum(r.tokens for r in recs)
            shared = sum(r.weight_sums[: sink.n_shared].sum() for r in recs)
            per_layer.append(float(shared / (tokens * sink.n_shared)))
        points.append(TrajectoryPoint(epoch, per_layer))
    return points


def trajectory_csv(points: list[TrajectoryPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_layers = len(points[0].per_layer) if points else 0
    w.writerow(["epoch", *[f"layer_{i}" for i in range(n_layers)], "mean"])
    for p in points:
        w.writerow([p.epoch, *map(fmt, p.per_layer), fmt(p.mean)])
    return buf.getvalue()
