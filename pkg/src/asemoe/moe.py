"""LoRA experts, routers and the three gating rules.

Expert order inside a layer is fixed: the first ``S`` experts are shared,
the remaining ``N - S`` are sparse.  Sparse indices in a
:class:`GatingDecision` are positions within the sparse logits ``z``; add
``S`` to get the layer-wide expert index.

Two code paths exist:

* per-token functions (``gate_ase`` and friends, ``moe_layer_forward``)
  that operate on plain vectors and return a :class:`GatingDecision`;
* batched tensor functions (``batch_gate``, ``mixture``) used by the model,
  which build the same quantities for a whole batch through the autodiff ops.

Tests pin the two paths to each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as tt
from .tensor import ShapeError, Tensor


class Variant(str, Enum):
    PURE = "pure"  # y = x + sum g_i E_i(x), no base weight
    BASELINE = "baseline"  # LoRA-MoE: y = x + W0 x + sum g_i E_i(x)
    NAIVE = "naive"  # shared experts added with fixed weight 1
    ASE = "ase"  # shared weights normalized jointly with the sparse ones


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertConfig:
    """``(N/k/S/r)``: total experts, active experts, shared experts, LoRA rank.

    ``k`` counts every active expert: under ASE that is ``k - S`` sparse
    plus ``S`` shared.  Under the naive variant ``k`` sparse experts are
    chosen and the ``S`` shared ones are added on top.
    """

    n_total: int
    top_k: int
    n_shared: int
    rank: int

    @property
    def n_sparse(self) -> int:
        return self.n_total - self.n_shared

    def __str__(self) -> str:
        return f"{self.n_total}/{self.top_k}/{self.n_shared}/{self.rank}"

    def validate(self, variant: Variant | str | None = None) -> ExpertConfig:
        n, k, s, r = self.n_total, self.top_k, self.n_shared, self.rank
        if r < 1:
            raise ConfigError(f"rank must be >= 1, got {r}")
        if not n > s >= 0:
            raise ConfigError(f"need N > S >= 0, got N={n}, S={s}")
        variant = Variant(variant) if variant is not None else None
        if variant in (Variant.BASELINE, Variant.PURE):
            if s != 0:
                raise ConfigError(f"{variant.value} variant needs S = 0, got S={s}")
            if not 1 <= k <= n:
                raise ConfigError(f"need 1 <= k <= N, got k={k}, N={n}")
        elif variant is Variant.NAIVE:
            if s < 1:
                raise ConfigError("naive shared variant needs S >= 1")
            if not 1 <= k <= n - s:
                raise ConfigError(f"need 1 <= k <= N - S, got k={k}, N-S={n - s}")
        else:
            if not n - s >= k - s >= 1:
                raise ConfigError(f"need N - S >= k - S >= 1, got N={n}, k={k}, S={s}")
        return self


@dataclass
class LoraExpert:
    """Low-rank update ``delta W = B @ A`` with ``A: r x d_in``, ``B: d_out x r``."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        r, d_in = self.A.shape
        d_out, r_b = self.B.shape
        if r != r_b:
            raise ConfigError(f"A has rank {r} but B has rank {r_b}")
        if not 1 <= r < min(d_in, d_out):
            raise ConfigError(f"rank {r} must satisfy 1 <= r < min(d_in, d_out) = {min(d_in, d_out)}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        return self.B @ self.A


def lora_forward(expert: LoraExpert, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (expert.A.shape[1],):
        raise ShapeError(f"expert expects input of width {expert.A.shape[1]}, got shape {x.shape}")
    return expert.B @ (expert.A @ x)


def top_k_select(logits, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits, ties going to the lowest index.

    Returned in selection order (largest first).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError(f"top_k_select expects a vector, got shape {z.shape}")
    if not 1 <= k <= z.size:
        raise ValueError(f"k={k} out of range for {z.size} logits")
    # stable sort on -z keeps lower indices first among equal values
    return np.argsort(-z, kind="stable")[:k]


def top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Row-wise boolean mask of :func:`top_k_select` for a batch of logits."""
    z = np.asarray(logits, dtype=np.float64)
    if not 1 <= k <= z.shape[-1]:
        raise ValueError(f"k={k} out of range for {z.shape[-1]} logits")
    order = np.argsort(-z, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


@dataclass
class Router:
    """Per-task, per-layer router holding ``W_g`` (sparse) and ``W_s`` (shared)."""

    w_sparse: Tensor
    w_shared: Tensor

    @classmethod
    def zeros(cls, config: ExpertConfig, d_in: int, variant: Variant | str) -> Router:
        n_sparse = config.n_sparse
        # naive shared experts take a fixed weight, so they have no logits
        n_shared = config.n_shared if Variant(variant) is Variant.ASE else 0
        return cls(
            Tensor(np.zeros((n_sparse, d_in)), requires_grad=True),
            Tensor(np.zeros((n_shared, d_in)), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.w_sparse, self.w_shared] if self.w_shared.size else [self.w_sparse]

    def logits(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.w_sparse.shape[1],):
            raise ShapeError(f"router expects width {self.w_sparse.shape[1]}, got shape {x.shape}")
        return self.w_sparse.data @ x, self.w_shared.data @ x


@dataclass
class GatingDecision:
    sparse_indices: np.ndarray
    sparse_weights: np.ndarray
    shared_weights: np.ndarray
    variant: Variant

    @property
    def total_weight(self) -> float:
        return float(self.sparse_weights.sum() + self.shared_weights.sum())

    def expert_indices(self) -> np.ndarray:
        """Layer-wide indices of every active expert, shared first."""
        s = self.shared_weights.size
        return np.concatenate([np.arange(s), self.sparse_indices + s]).astype(int)

    def expert_weights(self) -> np.ndarray:
        return np.concatenate([self.shared_weights, self.sparse_weights])


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def gate_baseline(x, router: Router, config: ExpertConfig) -> GatingDecision:
    """Softmax over all N logits; keep the top-k entries without renormalizing."""
    if config.n_shared != 0:
        raise ConfigError(f"baseline gating needs S = 0, got S={config.n_shared}")
    z, _ = router.logits(x)
    g = _softmax(z)
    idx = top_k_select(g, config.top_k)
    return GatingDecision(idx, g[idx], np.zeros(0), Variant.BASELINE)


def gate_naive_shared(x, router: Router, config: ExpertConfig) -> GatingDecision:
    """Baseline gating over the sparse experts plus shared experts at weight 1."""
    if config.n_shared < 1:
        raise ConfigError("naive shared gating needs S >= 1")
    z, _ = router.logits(x)
    g = _softmax(z)
    idx = top_k_select(g, config.top_k)
    return GatingDecision(idx, g[idx], np.ones(config.n_shared), Variant.NAIVE)


def gate_ase(x, router: Router, config: ExpertConfig) -> GatingDecision:
    """Top-(k-S) sparse logits and all shared logits share a single softmax."""
    s = config.n_shared
    if s < 1:
        raise ConfigError("adaptive shared gating needs S >= 1")
    if config.top_k <= s:
        raise ConfigError(f"adaptive shared gating needs k > S, got k={config.top_k}, S={s}")
    z, zs = router.logits(x)
    idx = top_k_select(z, config.top_k - s)
    w = _softmax(np.concatenate([z[idx], zs]))
    n_sel = idx.size
    return GatingDecision(idx, w[:n_sel], w[n_sel:], Variant.ASE)


GATES = {
    Variant.PURE: gate_baseline,
    Variant.BASELINE: gate_baseline,
    Variant.NAIVE: gate_naive_shared,
    Variant.ASE: gate_ase,
}


def gate(x, router: Router, config: ExpertConfig, variant: Variant | str) -> GatingDecision:
    variant = Variant(variant)
    d = GATES[variant](x, router, config)
    d.variant = variant
    return d


class MoeLayer:
    """Frozen base weight ``W0`` with ``N`` parallel LoRA experts.

    Expert factors are stored stacked so the batched path is two matmuls:
    ``a`` is ``(N*r) x d_in`` (rows ``i*r:(i+1)*r`` are expert i's A) and
    ``b`` is ``d_out x (N*r)`` (matching column block of expert i's B).
    """

    def __init__(self, w0, a, b, config: ExpertConfig, variant: Variant | str = Variant.ASE):
        self.config = config
        self.variant = Variant(variant)
        config.validate(self.variant)
        self.w0 = w0 if isinstance(w0, Tensor) else Tensor(w0)
        self.w0.requires_grad = False
        d_out, d_in = self.w0.shape
        if d_in != d_out:
            raise ConfigError(f"residual form needs a square W0, got {self.w0.shape}")
        nr = config.n_total * config.rank
        self.a = a if isinstance(a, Tensor) else Tensor(a, requires_grad=True)
        self.b = b if isinstance(b, Tensor) else Tensor(b, requires_grad=True)
        if self.a.shape != (nr, d_in) or self.b.shape != (d_out, nr):
            raise ShapeError(
                f"expert factors must be {(nr, d_in)} and {(d_out, nr)}, got {self.a.shape} and {self.b.shape}"
            )
        # maps per-expert weights (.., N) onto per-rank-column weights (.., N*r)
        self._spread = np.kron(np.eye(config.n_total), np.ones((1, config.rank)))

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    def expert(self, i: int) -> LoraExpert:
        r = self.config.rank
        return LoraExpert(self.a.data[i * r:(i + 1) * r], self.b.data[:, i * r:(i + 1) * r])

    @property
    def experts(self) -> list[LoraExpert]:
        return [self.expert(i) for i in range(self.config.n_total)]

    def parameters(self) -> list[Tensor]:
        return [self.a, self.b]

    def mixture(self, h: Tensor, weights: Tensor) -> Tensor:
        """``sum_i weights[:, i] * E_i(h)`` for a batch ``h`` of shape (B, d_in)."""
        u = tt.matmul(h, self.a.T)
        spread = tt.matmul(weights, Tensor(self._spread))
        return tt.matmul(tt.multiply(u, spread), self.b.T)


def moe_layer_forward(layer: MoeLayer, x, decision: GatingDecision) -> np.ndarray:
    """Per-token layer output for an already computed gating decision."""
    x = np.asarray(x, dtype=np.float64)
    if decision.variant is not layer.variant:
        raise ConfigError(f"decision variant {decision.variant.value} does not match layer {layer.variant.value}")
    if decision.shared_weights.size != (0 if layer.variant in (Variant.BASELINE, Variant.PURE) else layer.config.n_shared):
        raise ConfigError("decision shared weights do not match layer config")
    if x.shape != (layer.d_in,):
        raise ShapeError(f"layer expects width {layer.d_in}, got shape {x.shape}")
    y = x.copy()
    if layer.variant is not Variant.PURE:
        y = y + layer.w0.data @ x
    s = layer.config.n_shared
    for i, g in zip(decision.sparse_indices, decision.sparse_weights):
        y = y + g * lora_forward(layer.expert(int(i) + s), x)
    for i, g in enumerate(decision.shared_weights):
        y = y + g * lora_forward(layer.expert(i), x)
    return y


NEG_INF = -np.inf


@dataclass
class BatchGating:
    """Batched gating output: layer-wide weights (B, N) and active mask (B, N)."""

    weights: Tensor
    active: np.ndarray
    variant: Variant


def batch_gate(h: Tensor, router: Router, config: ExpertConfig, variant: Variant | str) -> BatchGating:
    """Differentiable gating for a batch; columns ordered shared-first.

    Selection is treated as piecewise constant: only the softmax over the
    selected logits carries gradient.
    """
    variant = Variant(variant)
    s, n = config.n_shared, config.n_total
    z = tt.matmul(h, router.w_sparse.T)
    bsz = h.shape[0]
    if variant is Variant.ASE:
        mask = top_k_mask(z.data, config.top_k - s)
        zs = tt.matmul(h, router.w_shared.T)
        offset = Tensor(np.where(mask, 0.0, NEG_INF))
        weights = tt.softmax(tt.concat([zs, tt.add(z, offset)], axis=-1))
        active = np.concatenate([np.ones((bsz, s), dtype=bool), mask], axis=1)
        return BatchGating(weights, active, variant)
    g = tt.softmax(z)
    mask = top_k_mask(g.data, config.top_k)
    sparse = tt.multiply(g, Tensor(mask.astype(np.float64)))
    if variant is Variant.NAIVE:
        weights = tt.concat([Tensor(np.ones((bsz, s))), sparse], axis=-1)
        active = np.concatenate([np.ones((bsz, s), dtype=bool), mask], axis=1)
        return BatchGating(weights, active, variant)
    if s != 0:
        raise ConfigError(f"{variant.value} gating needs S = 0, got S={s}")
    return BatchGating(sparse, mask, variant)


def layer_forward(layer: MoeLayer, h: Tensor, gating: BatchGating, adapter: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Batched layer output; ``adapter`` is an optional always-on backbone LoRA (A, B)."""
    y = h
    if layer.variant is not Variant.PURE:
        y = tt.add(y, tt.matmul(h, layer.w0.T))
    if adapter is not None:
        a, b = adapter
        y = tt.add(y, tt.matmul(tt.matmul(h, a.T), b.T))
    return tt.add(y, layer.mixture(h, gating.weights))
