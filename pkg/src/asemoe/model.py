"""Multi-task backbone of MoE blocks with per-task embeddings, routers and heads.

Block ``l`` for task ``t`` computes

    h_l = act(h_{l-1} + W0_l h_{l-1} + adapter_l(h_{l-1}) + sum_i g_i E_i(h_{l-1}))

with gating ``g`` from task t's own router at that layer and ``act`` a relu
between blocks (none after the last).  ``h_0 = x + e_t`` and the prediction
is ``H_t(h_L)``.  Every ``W0`` is frozen; everything else is trainable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .config import ExperimentConfig
from .moe import BatchGating, ExpertConfig, MoeLayer, Router, Variant, batch_gate, layer_forward
from .tensor import ShapeError, Tensor

CHECKPOINT_VERSION = 1


@dataclass
class TaskSpec:
    task_id: int
    embedding: Tensor
    routers: list[Router]
    head_w: Tensor
    head_b: Tensor

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"task{self.task_id}.embedding", self.embedding)]
        for l, r in enumerate(self.routers):
            out.append((f"task{self.task_id}.router{l}.w_sparse", r.w_sparse))
            if r.w_shared.size:
                out.append((f"task{self.task_id}.router{l}.w_shared", r.w_shared))
        out += [(f"task{self.task_id}.head.w", self.head_w), (f"task{self.task_id}.head.b", self.head_b)]
        return out


@dataclass
class Backbone:
    blocks: list[MoeLayer]
    adapters: list[tuple[Tensor, Tensor]] | None = None

    @property
    def depth(self) -> int:
        return len(self.blocks)


@dataclass
class ForwardTrace:
    """Per-layer gating collected during one forward pass."""

    gatings: list[BatchGating] = field(default_factory=list)


class MultiTaskModel:
    def __init__(self, backbone: Backbone, tasks: list[TaskSpec], config: ExpertConfig, variant: Variant):
        self.backbone = backbone
        self.tasks = tasks
        self.config = config
        self.variant = Variant(variant)
        for task_spec in tasks:
            if len(task_spec.routers) != backbone.depth:
                raise ShapeError(f"task {task_spec.task_id} has {len(task_spec.routers)} routers for depth {backbone.depth}")
            if task_spec.embedding.shape != (self.d_in,):
                raise ShapeError(f"task {task_spec.task_id} embedding must have width {self.d_in}")

    @property
    def d_in(self) -> int:
        return self.backbone.blocks[0].d_in

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def task(self, t: int) -> TaskSpec:
        if not 0 <= t < len(self.tasks):
            raise KeyError(f"unknown task {t}")
        return self.tasks[t]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for l, block in enumerate(self.backbone.blocks):
            out.append((f"block{l}.w0", block.w0))
            out.append((f"block{l}.experts.a", block.a))
            out.append((f"block{l}.experts.b", block.b))
            if self.backbone.adapters is not None:
                a, b = self.backbone.adapters[l]
                out += [(f"block{l}.adapter.a", a), (f"block{l}.adapter.b", b)]
        for task_spec in self.tasks:
            out += task_spec.parameters()
        return out

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for block in self.backbone.blocks:
            h.update(np.ascontiguousarray(block.w0.data).tobytes())
        return h.hexdigest()


def forward_task(model: MultiTaskModel, x, t: int, trace: ForwardTrace | None = None) -> Tensor:
    """Prediction for task ``t``; ``x`` is a vector (d_in,) or a batch (B, d_in)."""
    task_spec = model.task(t)
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.data.ndim == 1
    if single:
        x = tt.add(Tensor(np.zeros((1, x.shape[0]))), x)
    if x.shape[-1] != model.d_in:
        raise ShapeError(f"input width {x.shape[-1]} does not match model width {model.d_in}")
    h = tt.add(x, task_spec.embedding)
    adapters = model.backbone.adapters
    last = model.backbone.depth - 1
    for l, block in enumerate(model.backbone.blocks):
        gating = batch_gate(h, task_spec.routers[l], model.config, model.variant)
        if trace is not None:
            trace.gatings.append(gating)
        h = layer_forward(block, h, gating, adapters[l] if adapters is not None else None)
        if l != last:
            h = tt.relu(h)
    y = tt.add(tt.matmul(h, task_spec.head_w.T), task_spec.head_b)
    if single:
        y = tt.tsum(y, axis=0)
    return y


def backbone_forward(w0s: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Frozen-backbone features with no experts or adapters (reference path)."""
    h = np.asarray(x, dtype=np.float64)
    for l, w0 in enumerate(w0s):
        h = h + h @ w0.T
        if l != len(w0s) - 1:
            h = np.maximum(h, 0.0)
    return h


def init_backbone_weights(rng: np.random.Generator, d: int, depth: int, scale: float = 0.5) -> list[np.ndarray]:
    return [rng.normal(0.0, scale / np.sqrt(d), size=(d, d)) for _ in range(depth)]


def build_model(config: ExperimentConfig, w0s: list[np.ndarray] | None = None, rng: np.random.Generator | None = None) -> MultiTaskModel:
    """Fresh multi-task model; deterministic in ``config.seed`` unless ``rng`` is given.

    Expert and adapter A ~ N(0, init_scale^2), B = 0, routers and task
    embeddings zero, heads zero.  ``w0s`` are the frozen base weights (a
    random backbone is drawn when omitted).
    """
    config.validate()
    ec = config.expert_config
    variant = config.variant
    d, depth, r = config.model.d_in, config.model.depth, ec.rank
    d_out = config.dataset.d_out
    rng = rng if rng is not None else np.random.default_rng([config.seed, 1])
    if w0s is None:
        w0s = init_backbone_weights(rng, d, depth)
    if len(w0s) != depth:
        raise ShapeError(f"need {depth} base weights, got {len(w0s)}")
    std = config.model.init_scale
    blocks = []
    for w0 in w0s:
        a = Tensor(rng.normal(0.0, std, size=(ec.n_total * r, d)), requires_grad=True)
        b = Tensor(np.zeros((d, ec.n_total * r)), requires_grad=True)
        blocks.append(MoeLayer(Tensor(np.array(w0, dtype=np.float64)), a, b, ec, variant))
    adapters = None
    if config.model.backbone_lora:
        adapters = [
            (Tensor(rng.normal(0.0, std, size=(r, d)), requires_grad=True),
             Tensor(np.zeros((d, r)), requires_grad=True))
            for _ in range(depth)
        ]
    tasks = [
        TaskSpec(
            task_id=t,
            embedding=Tensor(np.zeros(d), requires_grad=True),
            routers=[Router.zeros(ec, d, variant) for _ in range(depth)],
            head_w=Tensor(np.zeros((d_out, d)), requires_grad=True),
            head_b=Tensor(np.zeros(d_out), requires_grad=True),
        )
        for t in range(config.dataset.n_tasks)
    ]
    return MultiTaskModel(Backbone(blocks, adapters), tasks, ec, variant)


def trainable_parameters(model: MultiTaskModel) -> list[tuple[str, Tensor]]:
    """Everything except the frozen base weights."""
    return [(name, p) for name, p in model.named_parameters() if not name.endswith(".w0")]


@dataclass(frozen=True)
class ParamBreakdown:
    experts_per_layer: int
    routers_per_layer_per_task: int
    experts: int
    routers: int
    heads: int
    embeddings: int
    backbone_lora: int

    @property
    def trainable(self) -> int:
        return self.experts + self.routers + self.heads + self.embeddings + self.backbone_lora

    def as_dict(self) -> dict[str, int]:
        return {
            "experts_per_layer": self.experts_per_layer,
            "routers_per_layer_per_task": self.routers_per_layer_per_task,
            "experts": self.experts,
            "routers": self.routers,
            "heads": self.heads,
            "embeddings": self.embeddings,
            "backbone_lora": self.backbone_lora,
            "trainable": self.trainable,
        }


def count_params(
    config: ExpertConfig,
    d_in: int,
    d_out: int,
    L: int,
    T: int,
    d_task_out: int = 4,
    variant: Variant | str = Variant.ASE,
    backbone_lora: bool = True,
) -> ParamBreakdown:
    """Closed-form trainable parameter counts.

    Experts cost ``N r (d_in + d_out)`` per layer.  Routers cost ``N d_in``
    per layer and task (``N - S`` sparse rows plus ``S`` shared rows); the
    naive variant has no shared rows.
    """
    n, s, r = config.n_total, config.n_shared, config.rank
    experts_layer = n * r * (d_in + d_out)
    router_rows = n if Variant(variant) is Variant.ASE else n - s
    routers_layer = router_rows * d_in
    return ParamBreakdown(
        experts_per_layer=experts_layer,
        routers_per_layer_per_task=routers_layer,
        experts=experts_layer * L,
        routers=routers_layer * L * T,
        heads=T * (d_task_out * d_out + d_task_out),
        embeddings=T * d_in,
        backbone_lora=L * r * (d_in + d_out) if backbone_lora else 0,
    )


def count_model_params(config: ExperimentConfig) -> ParamBreakdown:
    return count_params(
        config.expert_config, config.model.d_in, config.model.d_in, config.model.depth,
        config.dataset.n_tasks, config.dataset.d_out, config.variant, config.model.backbone_lora,
    )


def save_checkpoint(model: MultiTaskModel, config: ExperimentConfig, path: str | Path) -> None:
    params = {
        name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
        for name, p in model.named_parameters()
    }
    blob = {"format": "asemoe-checkpoint", "version": CHECKPOINT_VERSION, "config": config.to_flat(), "params": params}
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path: str | Path) -> tuple[MultiTaskModel, ExperimentConfig]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != "asemoe-checkpoint" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    config = ExperimentConfig().with_overrides(**blob["config"]).validate()
    model = build_model(config)
    stored = blob["params"]
    for name, p in model.named_parameters():
        entry = stored[name]
        p.data[...] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return model, config
