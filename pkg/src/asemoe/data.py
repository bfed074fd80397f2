"""Seeded multi-task regression data drawn from a shared teacher network.

Every task sees the same inputs.  Targets for task t are

    y_t = Q_t tanh((G + P_t) x + c) + noise

with ``G`` and ``c`` shared by all tasks, ``P_t`` a rank-1 task-specific
perturbation and ``Q_t`` a task-specific readout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class TeacherModel:
    G: np.ndarray
    bias: np.ndarray
    heads: list[np.ndarray]
    perturbations: list[np.ndarray]
    sigma: float
    # per-task replacement for G; only set for the independent-teacher control
    task_maps: list[np.ndarray] | None = None

    def task_map(self, task: int) -> np.ndarray:
        base = self.G if self.task_maps is None else self.task_maps[task]
        return base + self.perturbations[task]

    def representation(self, x: np.ndarray, task: int) -> np.ndarray:
        return np.tanh(x @ self.task_map(task).T + self.bias)

    def targets(self, x: np.ndarray, task: int) -> np.ndarray:
        return self.representation(x, task) @ self.heads[task].T


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: list[np.ndarray]
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int
    sigma: float
    meta: dict = field(default_factory=dict)

    @property
    def n_tasks(self) -> int:
        return len(self.targets)

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_out(self) -> int:
        return self.targets[0].shape[1]

    def split(self, task: int, part: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.train_idx if part == "train" else self.val_idx
        return self.inputs[idx], self.targets[task][idx]

    def save(self, path: str | Path) -> None:
        header = {
            "format": "asemoe-dataset",
            "version": FORMAT_VERSION,
            "seed": self.seed,
            "sigma": self.sigma,
            "n_samples": int(self.inputs.shape[0]),
            "d_in": self.d_in,
            "d_out": self.d_out,
            "n_tasks": self.n_tasks,
            "meta": self.meta,
        }
        body = {
            "inputs": self.inputs.ravel().tolist(),
            "targets": [t.ravel().tolist() for t in self.targets],
            "train_idx": self.train_idx.tolist(),
            "val_idx": self.val_idx.tolist(),
        }
        Path(path).write_text(json.dumps({"header": header, "body": body}))

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        blob = json.loads(Path(path).read_text())
        h, b = blob["header"], blob["body"]
        if h.get("format") != "asemoe-dataset" or h.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a version-{FORMAT_VERSION} dataset file")
        n, d_in, d_out = h["n_samples"], h["d_in"], h["d_out"]
        return cls(
            inputs=np.array(b["inputs"], dtype=np.float64).reshape(n, d_in),
            targets=[np.array(t, dtype=np.float64).reshape(n, d_out) for t in b["targets"]],
            train_idx=np.array(b["train_idx"], dtype=int),
            val_idx=np.array(b["val_idx"], dtype=int),
            seed=h["seed"],
            sigma=h["sigma"],
            meta=h.get("meta", {}),
        )


def make_teacher(
    rng: np.random.Generator,
    d_in: int,
    d_h: int,
    n_tasks: int,
    d_out: int,
    sigma: float,
    perturbation: float = 0.1,
    shared: bool = True,
) -> TeacherModel:
    """Draw a teacher; ``shared=False`` gives each task its own ``G`` (control)."""

    def draw_g():
        return rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_h, d_in))

    G = draw_g()
    bias = rng.normal(0.0, 0.1, size=d_h)
    heads, perts, maps = [], [], []
    for _ in range(n_tasks):
        g_t = G if shared else draw_g()
        maps.append(g_t)
        p = np.outer(rng.normal(size=d_h), rng.normal(size=d_in))
        # rank-1 perturbation scaled to a fixed fraction of ||G||
        p *= perturbation * np.linalg.norm(g_t) / np.linalg.norm(p)
        perts.append(p)
        heads.append(rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_out, d_h)))
    return TeacherModel(G, bias, heads, perts, sigma, None if shared else maps)


def generate(
    seed: int,
    n_samples: int = 2048,
    d_in: int = 32,
    d_h: int = 48,
    n_tasks: int = 3,
    sigma: float = 0.05,
    d_out: int = 4,
    val_fraction: float = 0.25,
    perturbation: float = 0.1,
    shared: bool = True,
) -> Dataset:
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if n_tasks < 2:
        raise ValueError("need at least 2 tasks")
    if min(d_in, d_h, d_out) < 1 or sigma < 0:
        raise ValueError("dimensions must be positive and sigma nonnegative")
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    if not 0 <= perturbation <= 0.1:
        raise ValueError("perturbation must be in [0, 0.1] (fraction of ||G||)")

    rng = np.random.default_rng(seed)
    teacher = make_teacher(rng, d_in, d_h, n_tasks, d_out, sigma, perturbation, shared)
    x = rng.normal(size=(n_samples, d_in))
    targets = [teacher.targets(x, t) + rng.normal(0.0, sigma, size=(n_samples, d_out)) if sigma > 0
               else teacher.targets(x, t) for t in range(n_tasks)]
    perm = rng.permutation(n_samples)
    n_val = max(1, min(n_samples - 1, int(round(val_fraction * n_samples))))
    return Dataset(
        inputs=x,
        targets=targets,
        train_idx=np.sort(perm[n_val:]),
        val_idx=np.sort(perm[:n_val]),
        seed=seed,
        sigma=sigma,
        meta={"d_h": d_h, "perturbation": perturbation, "shared": shared, "val_fraction": val_fraction},
    )


@dataclass(frozen=True)
class TaskMetric:
    task_id: int
    value: float
    lower_is_better: bool = False

    @property
    def direction(self) -> int:
        return int(self.lower_is_better)


def r_squared(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    ss_tot = np.sum((y - y.mean(axis=0)) ** 2)
    if ss_tot == 0:
        raise ValueError("targets have zero variance")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def task_metric(predictions, targets, task_id: int = 0) -> TaskMetric:
    """R^2 against the per-column target mean (higher is better)."""
    return TaskMetric(task_id, r_squared(predictions, targets), lower_is_better=False)


def cross_task_correlation(ds: Dataset) -> float:
    """Mean absolute correlation between matching target columns of different tasks."""
    vals = []
    for a in range(ds.n_tasks):
        for b in range(a + 1, ds.n_tasks):
            for j in range(ds.d_out):
                vals.append(abs(np.corrcoef(ds.targets[a][:, j], ds.targets[b][:, j])[0, 1]))
    return float(np.mean(vals))
