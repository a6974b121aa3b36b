"""Learning a rotation-parametrised metric from a sequence of measures.

Each consecutive pair of measures gets its own dual problem.  The metric
minimises the sum of the inner optimal values; its gradient is the partial
derivative of the path energies with every inner solution held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .bench import EmpiricalMeasure, bounding_box
from .geodesic import EnergyQuadrature, SplinePredictor, energy_grads
from .lagrangian import Lagrangian, MetricField
from .nlot import NlotConfig, NlotState, StepStats, c_transform_solve, draw_batch, train_step
from .nn import AdamState, adam_step

log = logging.getLogger(__name__)

TIE_TOL = 1e-9


@dataclass(frozen=True)
class MetricConfig:
    inner: NlotConfig = field(default_factory=NlotConfig)
    rotation_hidden: tuple[int, ...] = (64, 64, 64, 64)
    rotation_head: str = "angle"
    rate: float = 5e-3
    update_frequency: int = 10   # inner steps per metric step
    steps: int = 100             # metric steps
    grid: int = 20


@dataclass
class MetricLearnState:
    metric: MetricField
    pairs: list[NlotState]
    adam: AdamState
    config: MetricConfig
    step: int = 0
    seed: int = 0

    @classmethod
    def init(cls, n_measures: int, config: MetricConfig = MetricConfig(), seed: int = 0,
             d: int = 2) -> "MetricLearnState":
        if n_measures < 2:
            raise ValueError("metric learning needs at least two measures")
        rng = np.random.default_rng([seed, 54321])
        metric = MetricField.learned(rng, config.rotation_hidden, config.inner.slope,
                                     config.rotation_head)
        L = Lagrangian("metric", metric=metric)
        pairs = [NlotState.init(L, config.inner, pair_seed(seed, i), d) for i in range(n_measures - 1)]
        return cls(metric, pairs, AdamState.zeros(metric.net.n_params, config.rate), config, 0, seed)

    @property
    def lagrangian(self) -> Lagrangian:
        return self.pairs[0].lagrangian

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"metric.params": self.metric.net.params, "metric.adam_m": self.adam.m,
               "metric.adam_v": self.adam.v, "metric.adam_t": np.array(float(self.adam.t)),
               "step": np.array(float(self.step)), "seed": np.array(float(self.seed))}
        for i, p in enumerate(self.pairs):
            out.update(p.tensors(f"pair{i}."))
        return out

    def load_tensors(self, t: dict[str, np.ndarray]) -> None:
        self.metric.net.params = t["metric.params"].copy()
        self.adam = replace(self.adam, m=t["metric.adam_m"].copy(), v=t["metric.adam_v"].copy(),
                            t=int(t["metric.adam_t"]))
        self.step = int(t["step"])
        self.seed = int(t["seed"])
        for i, p in enumerate(self.pairs):
            p.load_tensors(t, f"pair{i}.")


def pair_seed(seed: int, i: int) -> int:
    return seed * 100_003 + i


# ---------------------------------------------------------------------------
# metric gradient
# ---------------------------------------------------------------------------

def frozen_path_metric_grad(L: Lagrangian, X: np.ndarray, Yhat: np.ndarray, predictor: SplinePredictor,
                            quad: EnergyQuadrature, params: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean energy of the predicted paths and its partial derivative in the
    metric parameters, with endpoints and knots held fixed."""
    phi = np.asarray(predictor.predict(X, Yhat))
    e, g = energy_grads(L, X, phi, Yhat, quad, "metric", params)
    return float(e.mean()), g / len(X)


def metric_grad(state: MetricLearnState, i: int, X: np.ndarray) -> tuple[float, np.ndarray]:
    """Contribution of pair ``i`` on the batch ``X`` drawn from its source."""
    inner = state.pairs[i]
    yhat = c_transform_solve(inner, X).y
    return frozen_path_metric_grad(state.lagrangian, X, yhat, inner.predictor, inner.config.quad,
                                   state.metric.net.params)


def metric_step(state: MetricLearnState, measures: list[np.ndarray]) -> float:
    """One averaged descent step on the metric; inner networks are untouched."""
    rng = np.random.default_rng([state.seed, state.step, 11])
    grads = []
    energies = []
    for i in range(len(state.pairs)):
        X = draw_batch(rng, measures[i], state.config.inner.batch)
        e, g = metric_grad(state, i, X)
        energies.append(e)
        grads.append(g)
    grad = np.mean(grads, axis=0)
    state.metric.net.params, state.adam = adam_step(state.adam, state.metric.net.params, grad)
    state.step += 1
    return float(np.mean(energies))


@dataclass
class OuterStats:
    step: int
    dual_losses: list[float]
    mean_path_energy: float

    def as_dict(self) -> dict:
        return {"step": self.step, "dual_losses": self.dual_losses,
                "mean_dual_loss": float(np.mean(self.dual_losses)),
                "mean_path_energy": self.mean_path_energy}


def outer_step(state: MetricLearnState, measures: list[np.ndarray]) -> OuterStats:
    """``update_frequency`` steps of every inner problem, then one metric step."""
    losses = []
    for i, inner in enumerate(state.pairs):
        last: StepStats | None = None
        for _ in range(state.config.update_frequency):
            last = train_step(inner, measures[i], measures[i + 1])
        losses.append(last.dual_loss if last is not None else float("nan"))
    energy = metric_step(state, measures)
    return OuterStats(state.step, losses, energy)


def train_metric(measures, config: MetricConfig = MetricConfig(), steps: int | None = None, seed: int = 0,
                 state: MetricLearnState | None = None,
                 callback: Callable[[MetricLearnState, OuterStats], None] | None = None) -> MetricLearnState:
    samples = [m.samples if isinstance(m, EmpiricalMeasure) else np.asarray(m, dtype=np.float64)
               for m in measures]
    state = state or MetricLearnState.init(len(samples), config, seed, samples[0].shape[1])
    total = config.steps if steps is None else steps
    while state.step < total:
        stats = outer_step(state, samples)
        if callback is not None:
            callback(state, stats)
    return state


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluation_grid(measures, size: int = 20, pad: float = 0.1) -> np.ndarray:
    """``size`` x ``size`` points spanning the padded bounding box of the data."""
    lo, hi = bounding_box([m if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(m) for m in measures], pad)
    g1 = np.linspace(lo[0], hi[0], size)
    g2 = np.linspace(lo[1], hi[1], size)
    a, b = np.meshgrid(g1, g2, indexing="xy")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def _as_matrices(A, grid: np.ndarray) -> np.ndarray:
    if isinstance(A, MetricField):
        return A.matrices(grid)
    if callable(A):
        return np.asarray(A(grid), dtype=np.float64)
    M = np.asarray(A, dtype=np.float64)
    return np.broadcast_to(M, (len(grid), *M.shape[-2:])) if M.ndim == 2 else M


def alignment_score(A, A_hat, grid: np.ndarray) -> float:
    """Mean absolute cosine between eigenvectors paired by ascending eigenvalue.

    ``A`` and ``A_hat`` are metric fields, callables mapping points to
    ``(m, d, d)`` arrays, or fixed matrices.  Points where either field has
    (numerically) repeated eigenvalues are skipped.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    M = _as_matrices(A, grid)
    Mh = _as_matrices(A_hat, grid)
    for name, arr in (("first", M), ("second", Mh)):
        asym = np.abs(arr - np.swapaxes(arr, -1, -2)).max()
        if asym > 1e-10 * max(1.0, np.abs(arr).max()):
            raise np.linalg.LinAlgError(f"{name} metric is not symmetric (max asymmetry {asym:.3g})")
    lam, U = np.linalg.eigh(M)
    lam_h, Uh = np.linalg.eigh(Mh)
    gap = np.minimum(np.diff(lam, axis=1).min(axis=1), np.diff(lam_h, axis=1).min(axis=1))
    keep = gap >= TIE_TOL
    if not keep.any():
        raise ValueError("every grid point has repeated eigenvalues")
    cos = np.abs(np.einsum("mki,mki->mi", U[keep], Uh[keep]))
    return float(cos.mean())


def metric_grid_rows(metric: MetricField, grid: np.ndarray) -> np.ndarray:
    """Rows ``x1, x2, a11, a12, a22`` for the learned-metric dump."""
    M = metric.matrices(grid)
    return np.column_stack([grid, M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]])


__all__ = [
    "MetricConfig", "MetricLearnState", "metric_grad", "frozen_path_metric_grad", "metric_step",
    "outer_step", "train_metric", "alignment_score", "evaluation_grid", "metric_grid_rows",
]
