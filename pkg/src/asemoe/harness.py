"""Experiment runner: STL pretraining and baselines, multi-task training, suites."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tt
from .config import ExperimentConfig
from .data import Dataset, TaskMetric, generate, task_metric
from .losses import mutual_information_loss, routing_stats, task_loss, total_loss
from .model import (
    ForwardTrace,
    MultiTaskModel,
    ParamBreakdown,
    build_model,
    count_model_params,
    forward_task,
    init_backbone_weights,
    save_checkpoint,
    trainable_parameters,
)
from .moe import ConfigError, Variant
from .telemetry import (
    ActivationSink,
    delta_m,
    fmt,
    shared_gate_trajectory,
    trajectory_csv,
    write_heatmaps,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

SUITES = ("naive-vs-ase", "topk-sweep", "finegrained-sweep")
FINE_GRAINED = ((16, 3, 1, 4), (32, 6, 2, 2), (64, 12, 4, 1))
TOPK_VALUES = (3, 4, 5, 6, 7)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, where: str = "multi-task"):
        super().__init__(f"{where} training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch


class FrozenBaseViolation(RuntimeError):
    pass


class SuiteAborted(RuntimeError):
    def __init__(self, message: str, partial: "SuiteReport"):
        super().__init__(message)
        self.partial = partial


def make_dataset(config: ExperimentConfig) -> Dataset:
    d = config.dataset
    return generate(
        seed=config.seed, n_samples=d.n_samples, d_in=config.model.d_in, d_h=d.d_h,
        n_tasks=d.n_tasks, sigma=d.sigma, d_out=d.d_out, val_fraction=d.val_fraction,
        perturbation=d.perturbation,
    )


def _batches(rng: np.random.Generator, idx: np.ndarray, batch_size: int):
    perm = idx[rng.permutation(idx.size)]
    for start in range(0, perm.size, batch_size):
        yield perm[start:start + batch_size]


def _sgd(params, lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
            p.grad = None


@dataclass
class StlResult:
    task: int
    w0s: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray
    metric: TaskMetric

    def predict(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for l, w0 in enumerate(self.w0s):
            h = h + h @ w0.T
            if l != len(self.w0s) - 1:
                h = np.maximum(h, 0.0)
        return h @ self.head_w.T + self.head_b


def train_stl(config: ExperimentConfig, ds: Dataset, task: int) -> StlResult:
    """Full-parameter single-task model: the plain backbone plus a linear head."""
    d, depth = config.model.d_in, config.model.depth
    # same backbone init for every task; only the data differ
    rng = np.random.default_rng([config.seed, 2])
    w0s = [Tensor(w, requires_grad=True) for w in init_backbone_weights(rng, d, depth)]
    head_w = Tensor(np.zeros((ds.d_out, d)), requires_grad=True)
    head_b = Tensor(np.zeros(ds.d_out), requires_grad=True)
    params = [*w0s, head_w, head_b]
    shuffle = np.random.default_rng([config.seed, 3, task])
    x_all, y_all = ds.inputs, ds.targets[task]
    for epoch in range(1, config.train.stl_epochs + 1):
        for idx in _batches(shuffle, ds.train_idx, config.train.batch_size):
            tt.reset_graph()
            h = Tensor(x_all[idx])
            for l, w0 in enumerate(w0s):
                h = tt.add(h, tt.matmul(h, w0.T))
                if l != depth - 1:
                    h = tt.relu(h)
            pred = tt.add(tt.matmul(h, head_w.T), head_b)
            loss = task_loss(pred, y_all[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, f"STL task {task}")
            tt.backward(loss)
            _sgd(params, config.train.stl_lr)
    result = StlResult(task, [w.data.copy() for w in w0s], head_w.data.copy(), head_b.data.copy(),
                       TaskMetric(task, 0.0))
    x_val, y_val = ds.split(task, "val")
    result.metric = task_metric(result.predict(x_val), y_val, task)
    return result


def run_stl_baselines(config: ExperimentConfig, ds: Dataset | None = None) -> list[StlResult]:
    """One full-parameter single-task model per task, same data and seed."""
    config.validate()
    ds = ds if ds is not None else make_dataset(config)
    return [train_stl(config, ds, t) for t in range(ds.n_tasks)]


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: dict[int, TaskMetric]
    stl_metrics: dict[int, TaskMetric]
    delta_m: float
    params: ParamBreakdown
    trajectory: list[float] | None
    files: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    frozen_ok: bool = True

    def metrics_json(self) -> dict:
        """Everything deterministic about the run (wall time excluded)."""
        return {
            "config": self.config.to_flat(),
            "expert_config": str(self.config.expert_config),
            "variant": self.config.variant.value,
            "metrics": {str(t): {"r2": m.value, "lower_is_better": m.lower_is_better} for t, m in sorted(self.metrics.items())},
            "stl_metrics": {str(t): {"r2": m.value, "lower_is_better": m.lower_is_better} for t, m in sorted(self.stl_metrics.items())},
            "delta_m": self.delta_m,
            "params": self.params.as_dict(),
            "shared_gate_trajectory": self.trajectory,
            "frozen_base_ok": self.frozen_ok,
        }


def _eval_pass(model: MultiTaskModel, x: np.ndarray, ys: list[np.ndarray] | None, sink: ActivationSink | None, epoch: int):
    metrics = {}
    with tt.no_grad():
        for t in range(model.n_tasks):
            trace = ForwardTrace()
            pred = forward_task(model, x, t, trace)
            if sink is not None:
                for l, g in enumerate(trace.gatings):
                    sink.add_batch(epoch, l, t, g.active, g.weights.data)
            if ys is not None:
                metrics[t] = task_metric(pred.data, ys[t], t)
    return metrics


def _mi_term(weights_per_layer: list[list[Tensor]], per_layer: bool) -> Tensor:
    if per_layer:
        terms = [mutual_information_loss(routing_stats(ws)) for ws in weights_per_layer]
        out = terms[0]
        for term in terms[1:]:
            out = tt.add(out, term)
        return out
    n_layers = len(weights_per_layer)
    pooled = []
    for t in range(len(weights_per_layer[0])):
        acc = weights_per_layer[0][t]
        for l in range(1, n_layers):
            acc = tt.add(acc, weights_per_layer[l][t])
        pooled.append(tt.scale(acc, 1.0 / n_layers))
    return mutual_information_loss(routing_stats(pooled))


def step_loss(model: MultiTaskModel, x: np.ndarray, ys: list[np.ndarray], config: ExperimentConfig) -> Tensor:
    """Training objective on one minibatch: mean task MSE plus the weighted MI term."""
    losses = []
    weights_per_layer: list[list[Tensor]] = [[] for _ in range(model.backbone.depth)]
    xb = Tensor(x)
    for t in range(model.n_tasks):
        trace = ForwardTrace()
        losses.append(task_loss(forward_task(model, xb, t, trace), ys[t]))
        for l, g in enumerate(trace.gatings):
            weights_per_layer[l].append(g.weights)
    mi_weight = config.loss.mi_weight
    mi = _mi_term(weights_per_layer, config.loss.mi_per_layer) if mi_weight > 0 else 0.0
    return total_loss(losses, mi, mi_weight)


def train_step(model: MultiTaskModel, params: list[Tensor], x: np.ndarray, ys: list[np.ndarray], config: ExperimentConfig) -> float:
    tt.reset_graph()
    loss = step_loss(model, x, ys, config)
    value = loss.item()
    if np.isfinite(value):
        tt.backward(loss)
        _sgd(params, config.train.lr)
    return value


def train(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    ds: Dataset | None = None,
    stl: list[StlResult] | None = None,
    write_checkpoint: bool = True,
) -> RunResult:
    """STL-pretrain on task 0, freeze W0, then train all tasks jointly."""
    t0 = time.perf_counter()
    config.validate()
    ds = ds if ds is not None else make_dataset(config)
    if stl is None:
        stl = run_stl_baselines(config, ds)
    model = build_model(config, w0s=stl[0].w0s)
    digest = model.frozen_digest()
    params = [p for _, p in trainable_parameters(model)]
    sink = ActivationSink(config.expert.n, config.expert.s if config.variant is not Variant.BASELINE else 0, config.variant)
    shuffle = np.random.default_rng([config.seed, 4])
    x_val = ds.inputs[ds.val_idx]
    for epoch in range(1, config.train.epochs + 1):
        for idx in _batches(shuffle, ds.train_idx, config.train.batch_size):
            value = train_step(model, params, ds.inputs[idx], [y[idx] for y in ds.targets], config)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch)
        _eval_pass(model, x_val, None, sink, epoch)
    metrics = _eval_pass(model, x_val, [y[ds.val_idx] for y in ds.targets], None, 0)

    frozen_ok = model.frozen_digest() == digest
    if not frozen_ok:
        raise FrozenBaseViolation("frozen base weights changed during training")

    stl_metrics = {r.task: r.metric for r in stl}
    trajectory = None
    if config.variant is Variant.ASE:
        trajectory = [p.mean for p in shared_gate_trajectory(sink)]
    result = RunResult(
        config=config, metrics=metrics, stl_metrics=stl_metrics,
        delta_m=delta_m(metrics, stl_metrics), params=count_model_params(config),
        trajectory=trajectory, frozen_ok=frozen_ok,
    )
    if out_dir is not None:
        result.files = write_run(result, model, sink, Path(out_dir), write_checkpoint)
    result.wall_time = time.perf_counter() - t0
    return result


def write_run(result: RunResult, model: MultiTaskModel, sink: ActivationSink, out: Path, checkpoint: bool = True) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    p = out / "metrics.json"
    p.write_text(json.dumps(result.metrics_json(), indent=2, sort_keys=True) + "\n")
    files["metrics"] = str(p)
    write_heatmaps(sink, out)
    files["heatmaps"] = str(out)
    p = out / "telemetry.json"
    p.write_text(json.dumps(sink.to_dict()))
    files["telemetry"] = str(p)
    if result.config.variant is Variant.ASE:
        p = out / "shared_gate_trajectory.csv"
        p.write_text(trajectory_csv(shared_gate_trajectory(sink)))
        files["trajectory"] = str(p)
    if checkpoint:
        p = out / "checkpoint.json"
        save_checkpoint(model, result.config, p)
        files["checkpoint"] = str(p)
    return files


# ---------------------------------------------------------------- suites

def _with_expert(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, expert=replace(cfg.expert, **kw))


def suite_configs(suite: str, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Expand a suite into labelled configs that differ only in the swept knob."""
    e = base.expert
    if suite == "naive-vs-ase":
        s = max(e.s, 1)
        return [
            ("baseline", _with_expert(base, variant="baseline", s=0)),
            ("naive", _with_expert(base, variant="naive", s=s)),
            ("ase", _with_expert(base, variant="ase", s=s)),
        ]
    if suite == "topk-sweep":
        s = 0 if base.variant is Variant.BASELINE else 1
        return [(f"k{k}", _with_expert(base, k=k, s=s)) for k in TOPK_VALUES]
    if suite == "finegrained-sweep":
        out = []
        for n, k, s, r in FINE_GRAINED:
            if base.variant is Variant.BASELINE:
                s = 0
            out.append((f"{n}-{k}-{s}-{r}", _with_expert(base, n=n, k=k, s=s, rank=r)))
        return out
    raise ConfigError(f"unknown suite {suite!r}; expected one of {SUITES}")


@dataclass
class SuiteRow:
    label: str
    seed: int
    result: RunResult


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    warnings: list[str] = field(default_factory=list)


@dataclass
class SuiteReport:
    suite: str
    rows: list[SuiteRow] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)

    def mean_delta(self, label: str) -> float:
        return float(np.mean([r.result.delta_m for r in self.rows if r.label == label]))

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def by_seed(self, label: str) -> dict[int, RunResult]:
        return {r.seed: r.result for r in self.rows if r.label == label}

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_tasks = max((len(r.result.metrics) for r in self.rows), default=0)
        w.writerow(["config", "expert_config", "variant", "seed", *[f"r2_task{t}" for t in range(n_tasks)], "delta_m"])
        for r in self.rows:
            res = r.result
            w.writerow([r.label, str(res.config.expert_config), res.config.variant.value, r.seed,
                        *[fmt(res.metrics[t].value) for t in sorted(res.metrics)], fmt(res.delta_m)])
        return buf.getvalue()

    def checks_json(self) -> dict:
        return {
            "suite": self.suite,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail, "warnings": c.warnings} for c in self.checks],
        }


def _ordering_check(report: SuiteReport, name: str, labels: list[str]) -> Check:
    """Seed-averaged means must be non-increasing along ``labels``; per-seed breaks are warnings."""
    means = [report.mean_delta(l) for l in labels]
    passed = all(a >= b for a, b in zip(means, means[1:]))
    warnings = []
    for seed in report.seeds():
        vals = [report.by_seed(l)[seed].delta_m for l in labels]
        if not all(a >= b for a, b in zip(vals, vals[1:])):
            warnings.append(f"seed {seed}: " + " vs ".join(f"{l}={v:+.4f}" for l, v in zip(labels, vals)))
    detail = " >= ".join(f"{l} ({m:+.4f}%)" for l, m in zip(labels, means))
    return Check(name, passed, detail, warnings)


def _trajectory_check(report: SuiteReport, label: str) -> Check:
    runs = report.by_seed(label)
    first = [r.trajectory[0] for r in runs.values()]
    last = [r.trajectory[-1] for r in runs.values()]
    warnings = [f"seed {s}: first {r.trajectory[0]:.4f} <= last {r.trajectory[-1]:.4f}"
                for s, r in runs.items() if r.trajectory[0] <= r.trajectory[-1]]
    passed = float(np.mean(first)) > float(np.mean(last))
    return Check("shared gate decreases", passed, f"first-epoch mean {np.mean(first):.4f} vs final-epoch mean {np.mean(last):.4f}", warnings)


def _parity_check(configs: list[tuple[str, ExperimentConfig]]) -> Check:
    budgets = {label: count_model_params(cfg).experts for label, cfg in configs}
    equal = len(set(budgets.values())) == 1
    return Check("expert parameter parity", equal, ", ".join(f"{l}={b}" for l, b in budgets.items()))


def run_suite(
    suite: str,
    base: ExperimentConfig,
    out_dir: str | Path | None = None,
    seeds: list[int] | None = None,
    progress: Callable[[str], None] | None = None,
) -> SuiteReport:
    base.validate()
    configs = suite_configs(suite, base)
    for _, cfg in configs:
        cfg.validate()
    report = SuiteReport(suite)
    if suite == "finegrained-sweep":
        parity = _parity_check(configs)
        report.checks.append(parity)
        if not parity.passed:
            raise ConfigError(f"fine-grained configs have unequal expert budgets: {parity.detail}")
    seeds = seeds if seeds is not None else [base.seed + i for i in range(base.suite.seeds)]
    out = Path(out_dir) if out_dir is not None else None

    try:
        for seed in seeds:
            seeded = replace(base, seed=seed)
            ds = make_dataset(seeded)
            stl = run_stl_baselines(seeded, ds)
            for label, cfg in configs:
                cfg = replace(cfg, seed=seed)
                run_out = out / label / f"seed{seed}" if out is not None else None
                if progress:
                    progress(f"{suite}: {label} seed {seed}")
                res = train(cfg, run_out, ds=ds, stl=stl)
                report.rows.append(SuiteRow(label, seed, res))
    except Exception as exc:
        if out is not None:
            _write_report(report, out)
        raise SuiteAborted(f"{suite} aborted: {exc}", report) from exc

    if suite == "naive-vs-ase":
        report.checks.append(_ordering_check(report, "ase >= baseline >= naive", ["ase", "baseline", "naive"]))
        report.checks.append(_trajectory_check(report, "ase"))
    elif suite == "finegrained-sweep":
        labels = [l for l, _ in configs]
        report.checks.append(_ordering_check(report, "finer experts do not hurt", labels[::-1]))
    if out is not None:
        _write_report(report, out)
    return report


def _write_report(report: SuiteReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "suite_report.csv").write_text(report.csv())
    (out / "suite_checks.json").write_text(json.dumps(report.checks_json(), indent=2) + "\n")
