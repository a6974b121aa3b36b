"""Dual training of a Kantorovich potential under a Lagrangian cost.

One training step samples batches from both measures, predicts the
c-transform minimisers with the amortisation network, refines them with
L-BFGS, then updates the potential (Danskin gradient), the c-transform
predictor and the spline predictor, in that order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .bench import EmpiricalMeasure
from .geodesic import (EnergyQuadrature, SplinePredictor, displacement_cost_batch, energy_batch,
                       predicted_cost_grad, predictor_loss_grad)
from .lagrangian import Lagrangian
from .nn import (AdamState, CosineSchedule, LbfgsConfig, Mlp, NonFiniteError, adam_step,
                 lbfgs_minimize_batch)

log = logging.getLogger(__name__)

RESIDUAL_GUARD = 1e-9


@dataclass(frozen=True)
class NlotConfig:
    knots: int = 30
    g_hidden: tuple[int, ...] = (64, 64, 64, 64)
    y_hidden: tuple[int, ...] = (64, 64, 64, 64)
    spline_hidden: tuple[int, ...] = (1024, 1024)
    slope: float = 0.01
    g_rate: tuple[float, float] = (1e-4, 1e-2)   # cosine schedule start, end
    y_rate: tuple[float, float] = (1e-4, 1e-2)
    spline_rate: float = 1e-4
    batch: int = 1024
    lbfgs_iters: int = 20
    quad_nodes: int = 100
    steps: int = 1000          # schedule horizon
    fine_tune_train: int = 0   # spline fine-tuning steps inside training
    fine_tune_eval: int = 0
    fine_tune_rate: float = 1e-2

    @property
    def quad(self) -> EnergyQuadrature:
        return EnergyQuadrature(self.quad_nodes)

    @property
    def lbfgs(self) -> LbfgsConfig:
        return LbfgsConfig(max_iters=self.lbfgs_iters)


@dataclass
class NlotState:
    g: Mlp
    y_zeta: Mlp
    predictor: SplinePredictor
    adam_g: AdamState
    adam_y: AdamState
    adam_eta: AdamState
    lagrangian: Lagrangian
    config: NlotConfig = field(default_factory=NlotConfig)
    step: int = 0
    seed: int = 0

    @classmethod
    def init(cls, lagrangian: Lagrangian, config: NlotConfig = NlotConfig(), seed: int = 0,
             d: int = 2) -> "NlotState":
        rng = np.random.default_rng([seed, 12345])
        g = Mlp.init((d, *config.g_hidden, 1), rng, config.slope)
        y_zeta = Mlp.init((d, *config.y_hidden, d), rng, config.slope, last_scale=0.1)
        pred = SplinePredictor.init(rng, config.knots, d, config.spline_hidden, config.slope)
        sched = lambda r: CosineSchedule(r[0], r[1], config.steps)  # noqa: E731
        return cls(g, y_zeta, pred,
                   AdamState.zeros(g.n_params, sched(config.g_rate)),
                   AdamState.zeros(y_zeta.n_params, sched(config.y_rate)),
                   AdamState.zeros(pred.net.n_params, config.spline_rate),
                   lagrangian, config, 0, seed)

    def copy(self) -> "NlotState":
        return replace(self, g=self.g.copy(), y_zeta=self.y_zeta.copy(), predictor=self.predictor.copy())

    # -- checkpoint tensors -------------------------------------------------
    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, net, st in (("g", self.g, self.adam_g), ("y", self.y_zeta, self.adam_y),
                              ("eta", self.predictor.net, self.adam_eta)):
            out[f"{prefix}{name}.params"] = net.params
            out[f"{prefix}{name}.adam_m"] = st.m
            out[f"{prefix}{name}.adam_v"] = st.v
            out[f"{prefix}{name}.adam_t"] = np.array(float(st.t))
        out[f"{prefix}step"] = np.array(float(self.step))
        out[f"{prefix}seed"] = np.array(float(self.seed))
        return out

    def load_tensors(self, t: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, net, attr in (("g", self.g, "adam_g"), ("y", self.y_zeta, "adam_y"),
                                ("eta", self.predictor.net, "adam_eta")):
            net.params = t[f"{prefix}{name}.params"].copy()
            st = getattr(self, attr)
            setattr(self, attr, replace(st, m=t[f"{prefix}{name}.adam_m"].copy(),
                                        v=t[f"{prefix}{name}.adam_v"].copy(),
                                        t=int(t[f"{prefix}{name}.adam_t"])))
        self.step = int(t[f"{prefix}step"])
        self.seed = int(t[f"{prefix}seed"])


# ---------------------------------------------------------------------------
# c-transform
# ---------------------------------------------------------------------------

def potential_and_grad(g: Mlp, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``g(y)`` per row and its gradient in ``y``."""
    tape = ad.Tape()
    y = tape.input(Y)
    out = g.apply(y)[:, 0]
    (gy,) = tape.gradient(ad.sum(out), [y])
    return out.value, gy


def amortized_map(state: NlotState, X: np.ndarray) -> np.ndarray:
    """Warm start ``y_zeta(x) = x + net(x)``."""
    X = np.asarray(X, dtype=np.float64)
    return X + state.y_zeta(X)


@dataclass
class ConjugateResult:
    y: np.ndarray        # minimisers
    value: np.ndarray    # J at the minimisers, i.e. g^c(x)
    warm: np.ndarray     # warm starts
    nit: np.ndarray
    failed: np.ndarray   # line search gave up; y is the best point reached


def conjugate_objective(state: NlotState, X: np.ndarray) -> Callable:
    """``J(y; x) = c(x, y) - g(y)`` with envelope gradients, batched by row."""
    cfg = state.config

    def f(Y, rows):
        if cfg.fine_tune_train > 0:
            # fine-tuned knots are (near) optimal, so the envelope partial applies
            c, _, dc = displacement_cost_batch(state.lagrangian, X[rows], Y, state.predictor,
                                               cfg.fine_tune_train, cfg.quad, cfg.fine_tune_rate, grad="y")
        else:
            c, dc = predicted_cost_grad(state.lagrangian, X[rows], Y, state.predictor, cfg.quad)
        gv, dg = potential_and_grad(state.g, Y)
        return c - gv, dc - dg

    return f


def c_transform_solve(state: NlotState, X: np.ndarray, lbfgs: LbfgsConfig | None = None) -> ConjugateResult:
    """Minimise ``J(y; x)`` from the amortised warm start, one problem per row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y0 = amortized_map(state, X)
    # only decreasing steps are accepted, so J(y) <= J(y0) row by row
    res = lbfgs_minimize_batch(conjugate_objective(state, X), y0, lbfgs or state.config.lbfgs)
    return ConjugateResult(res.x, res.fun, y0, res.nit, res.failed)


# ---------------------------------------------------------------------------
# dual objective
# ---------------------------------------------------------------------------

def potential_param_grad(g: Mlp, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient in the weights of ``sum_i weights_i g(points_i)``."""
    tape = ad.Tape()
    p = tape.input(g.params)
    out = g.apply(points, p)[:, 0]
    (gp,) = tape.gradient(ad.sum(out * weights), [p])
    return gp


@dataclass
class DualEstimate:
    loss: float              # Monte-Carlo estimate of the dual objective
    grad: np.ndarray         # its gradient in the potential's weights
    conj: ConjugateResult


def dual_loss_and_grads(state: NlotState, X: np.ndarray, Yb: np.ndarray,
                        conj: ConjugateResult | None = None) -> DualEstimate:
    """Estimate of ``mean g^c(x) + mean g(y)`` and its Danskin gradient.

    The minimisers are held fixed, so the first term contributes
    ``-grad g(y_hat)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Yb = np.atleast_2d(np.asarray(Yb, dtype=np.float64))
    conj = conj or c_transform_solve(state, X)
    gy = state.g(Yb)[:, 0]
    terms = np.concatenate([conj.value, gy])
    if not np.all(np.isfinite(terms)):
        bad = int(np.flatnonzero(~np.isfinite(terms))[0])
        raise NonFiniteError(f"dual objective is not finite (sample {bad})")
    loss = float(conj.value.mean() + gy.mean())
    pts = np.vstack([conj.y, Yb])
    w = np.concatenate([np.full(len(X), -1.0 / len(X)), np.full(len(Yb), 1.0 / len(Yb))])
    return DualEstimate(loss, potential_param_grad(state.g, pts, w), conj)


def amortization_loss_grad(y_zeta: Mlp, X: np.ndarray, Yhat: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean unsquared distance between the refined and predicted maps.

    Rows already matched to within ``RESIDUAL_GUARD`` are skipped since the
    norm is not differentiable there.
    """
    resid = Yhat - (X + y_zeta(X))
    norms = np.linalg.norm(resid, axis=1)
    keep = norms >= RESIDUAL_GUARD
    if not keep.any():
        return float(norms.mean()), np.zeros_like(y_zeta.params)
    tape = ad.Tape()
    p = tape.input(y_zeta.params)
    Xk = X[keep]
    r = ad.sub(Yhat[keep] - Xk, y_zeta.apply(Xk, p))
    loss = ad.scale(ad.sum(ad.sqrt(ad.sum(ad.square(r), axis=1))), 1.0 / len(X))
    (gp,) = tape.gradient(loss, [p])
    return float(norms.mean()), gp


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def draw_batch(rng: np.random.Generator, samples: np.ndarray, batch: int) -> np.ndarray:
    """``batch`` rows without replacement; the whole (shuffled) set if it is smaller."""
    n = len(samples)
    if batch >= n:
        return samples[rng.permutation(n)]
    return samples[rng.choice(n, size=batch, replace=False)]


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 7])


@dataclass
class StepStats:
    step: int
    dual_loss: float
    mean_conjugate_residual: float
    mean_path_energy: float
    lbfgs_failures: int

    def as_dict(self) -> dict:
        return {"step": self.step, "dual_loss": self.dual_loss,
                "mean_conjugate_residual": self.mean_conjugate_residual,
                "mean_path_energy": self.mean_path_energy}


def train_step(state: NlotState, mu: np.ndarray, nu: np.ndarray) -> StepStats:
    """One iteration of the dual training loop; updates ``state`` in place."""
    cfg = state.config
    rng = step_rng(state.seed, state.step)
    X = draw_batch(rng, mu, cfg.batch)
    Yb = draw_batch(rng, nu, cfg.batch)

    est = dual_loss_and_grads(state, X, Yb)
    yhat = est.conj.y
    # ascend the dual objective
    state.g.params, state.adam_g = adam_step(state.adam_g, state.g.params, -est.grad)

    resid, gz = amortization_loss_grad(state.y_zeta, X, yhat)
    state.y_zeta.params, state.adam_y = adam_step(state.adam_y, state.y_zeta.params, gz)

    energy, ge = predictor_loss_grad(state.predictor, state.lagrangian, X, yhat, cfg.quad)
    state.predictor.net.params, state.adam_eta = adam_step(state.adam_eta, state.predictor.net.params, ge)

    state.step += 1
    return StepStats(state.step, est.loss, resid, energy, int(est.conj.failed.sum()))


def push_forward(state: NlotState, samples, chunk: int = 1024, lbfgs: LbfgsConfig | None = None) -> np.ndarray:
    """Transport map applied to each sample (c-transform minimiser)."""
    samples = np.atleast_2d(np.asarray(samples.samples if isinstance(samples, EmpiricalMeasure) else samples,
                                       dtype=np.float64))
    out = [c_transform_solve(state, samples[i:i + chunk], lbfgs).y for i in range(0, len(samples), chunk)]
    return np.vstack(out)


def transport_paths(state: NlotState, X: np.ndarray, Y: np.ndarray | None = None,
                    fine_tune_steps: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Endpoints and interior knots of the transport paths from ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = push_forward(state, X) if Y is None else Y
    steps = state.config.fine_tune_eval if fine_tune_steps is None else fine_tune_steps
    cfg = state.config
    _, phi = displacement_cost_batch(state.lagrangian, X, Y, state.predictor, steps, cfg.quad,
                                     cfg.fine_tune_rate)
    return X, Y, phi


def train_nlot(mu, nu, lagrangian: Lagrangian, config: NlotConfig = NlotConfig(), steps: int | None = None,
               seed: int = 0, state: NlotState | None = None,
               callback: Callable[[NlotState, StepStats], None] | None = None) -> NlotState:
    """Run ``steps`` training iterations (default: ``config.steps``)."""
    mu = mu.samples if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, dtype=np.float64)
    nu = nu.samples if isinstance(nu, EmpiricalMeasure) else np.asarray(nu, dtype=np.float64)
    state = state or NlotState.init(lagrangian, config, seed, d=mu.shape[1])
    total = config.steps if steps is None else steps
    while state.step < total:
        stats = train_step(state, mu, nu)
        if callback is not None:
            callback(state, stats)
    return state


def append_jsonl(path: str | Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


__all__ = [
    "NlotConfig", "NlotState", "ConjugateResult", "DualEstimate", "StepStats",
    "c_transform_solve", "dual_loss_and_grads", "train_step", "train_nlot", "push_forward",
    "transport_paths", "amortized_map", "energy_batch",
]
