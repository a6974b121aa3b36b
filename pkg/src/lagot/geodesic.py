"""Path energies, direct spline optimisation and the amortised spline predictor."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .lagrangian import Lagrangian
from .nn import AdamState, Mlp, NonFiniteError, adam_step
from .spline import PathSpline, basis, build_spline, straight_phi

log = logging.getLogger(__name__)

DIVERGENCE = 1e12


@dataclass(frozen=True)
class EnergyQuadrature:
    """Composite midpoint rule with ``nodes`` equal subintervals of [0, 1]."""

    nodes: int = 100

    def __post_init__(self):
        if self.nodes < 2:
            raise ValueError("need at least 2 quadrature nodes")

    @property
    def times(self) -> np.ndarray:
        return (np.arange(self.nodes) + 0.5) / self.nodes

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.nodes, 1.0 / self.nodes)


@lru_cache(maxsize=32)
def _stacked_basis(n: int, nodes: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Maps flattened knots ``(batch, n*d)`` to flattened node positions and
    velocities ``(batch, nodes*d)``."""
    pos, vel = basis(n, EnergyQuadrature(nodes).times)
    eye = np.eye(d)
    return np.kron(pos.T, eye), np.kron(vel.T, eye)


def energy_batch(L: Lagrangian, X, Phi, Y, quad: EnergyQuadrature, metric_params=None):
    """Energies of a batch of splines.

    ``X``, ``Y`` are ``(batch, d)`` endpoints and ``Phi`` the flattened
    interior knots ``(batch, (n-2)*d)``; any of them may be tape variables.
    Returns ``(batch,)``.
    """
    xv = ad.value_of(X)
    b, d = xv.shape
    n = ad.value_of(Phi).shape[1] // d + 2
    K = ad.concat([X, Phi, Y], axis=1)
    P, V = _stacked_basis(n, quad.nodes, d)
    pts = ad.reshape(ad.matmul(K, P), (b * quad.nodes, d))
    vel = ad.reshape(ad.matmul(K, V), (b * quad.nodes, d))
    lag = ad.reshape(L(pts, vel, metric_params), (b, quad.nodes))
    return ad.scale(ad.sum(lag, axis=1), 1.0 / quad.nodes)


def _check_energy(e: np.ndarray, quad: EnergyQuadrature) -> None:
    if not np.all(np.isfinite(e)):
        raise NonFiniteError(f"non-finite path energy (rows {np.flatnonzero(~np.isfinite(e))[:5]})")


def path_energy(L: Lagrangian, s: PathSpline, quad: EnergyQuadrature = EnergyQuadrature()) -> float:
    X = s.x[None]
    Y = s.y[None]
    e = energy_batch(L, X, s.phi.reshape(1, -1), Y, quad)
    if not np.isfinite(e[0]):
        # locate the first offending node for the message
        pts = s.eval_path(quad.times)
        vel = s.eval_velocity(quad.times)
        lag = np.asarray(L(pts, vel))
        bad = quad.times[~np.isfinite(lag)]
        raise NonFiniteError(f"Lagrangian is not finite at t={bad[0] if bad.size else '?'}")
    return float(e[0])


def energy_grads(L: Lagrangian, X, Phi, Y, quad: EnergyQuadrature, wrt: str = "phi",
                 metric_params: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row energies and the gradient of each with respect to ``wrt``.

    ``wrt`` is one of ``phi``, ``x``, ``y`` or ``metric`` (the learned
    metric's parameters; the returned gradient is then that of the sum).
    """
    tape = ad.Tape()
    args = {"x": X, "phi": Phi, "y": Y}
    if wrt in args:
        args[wrt] = tape.input(args[wrt])
        mp = metric_params
    elif wrt == "metric":
        mp = tape.input(metric_params)
    else:
        raise ValueError(f"cannot differentiate with respect to {wrt!r}")
    e = energy_batch(L, args["x"], args["phi"], args["y"], quad, mp)
    total = ad.sum(e)
    target = args[wrt] if wrt in args else mp
    (g,) = tape.gradient(total, [target])
    return e.value, g


# ---------------------------------------------------------------------------
# direct optimisation
# ---------------------------------------------------------------------------

def solve_geodesic_batch(L: Lagrangian, X, Y, init, steps: int = 100, rate: float = 1e-2,
                         quad: EnergyQuadrature = EnergyQuadrature()) -> tuple[np.ndarray, np.ndarray]:
    """Adam on the interior knots of many independent paths at once.

    Returns the best knots seen per row and their energies.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    phi = np.array(init, dtype=np.float64).reshape(len(X), -1)
    state = AdamState.zeros(phi.size, rate)
    best = phi.copy()
    best_e = None
    for k in range(steps + 1):
        e, g = energy_grads(L, X, phi, Y, quad, "phi")
        _check_energy(e, quad)
        if np.any(e > DIVERGENCE):
            raise NonFiniteError(f"path energy diverged (max {e.max():.3g}) at step {k}")
        if best_e is None:
            best_e = e.copy()
        improved = e < best_e
        best[improved] = phi[improved]
        best_e = np.minimum(best_e, e)
        if k == steps:
            break
        flat, state = adam_step(state, phi.ravel(), g.ravel())
        phi = flat.reshape(phi.shape)
    return best, best_e


def solve_geodesic(L: Lagrangian, x, y, init=None, steps: int = 100, rate: float = 1e-2,
                   n: int = 30, quad: EnergyQuadrature = EnergyQuadrature()) -> tuple[PathSpline, float]:
    """Minimise the path energy over interior knots, starting from ``init``
    (default: the straight segment)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if init is None:
        init = straight_phi(x, y, n)
    phi, e = solve_geodesic_batch(L, x[None], y[None], np.reshape(init, (1, -1)), steps, rate, quad)
    return build_spline(x, y, phi[0]), float(e[0])


# ---------------------------------------------------------------------------
# amortised spline predictor
# ---------------------------------------------------------------------------

@dataclass
class SplinePredictor:
    """Predicts interior knots from the endpoints.

    The network output is an offset from the straight segment, so a zero
    output gives the chord.
    """

    net: Mlp
    n: int
    d: int = 2

    @classmethod
    def init(cls, rng: np.random.Generator, n: int = 30, d: int = 2, hidden=(1024, 1024),
             slope: float = 0.01) -> "SplinePredictor":
        return cls(Mlp.init((2 * d, *hidden, (n - 2) * d), rng, slope, last_scale=0.1), n, d)

    def copy(self) -> "SplinePredictor":
        return SplinePredictor(self.net.copy(), self.n, self.d)

    def chord(self, X, Y) -> np.ndarray:
        X = np.asarray(X)
        return straight_phi(X, np.asarray(Y), self.n).reshape(len(X), -1)

    def predict(self, X, Y, params=None):
        """Flattened interior knots ``(batch, (n-2)*d)``.

        Differentiable in ``params`` and in the endpoints, which may be tape
        variables.
        """
        if not isinstance(X, ad.Var):
            X = np.asarray(X, dtype=np.float64)
        if not isinstance(Y, ad.Var):
            Y = np.asarray(Y, dtype=np.float64)
        off = self.net.apply(ad.concat([X, Y], axis=1), params)
        Cx, Cy = _chord_maps(self.n, self.d)
        return ad.add(off, ad.add(ad.matmul(X, Cx), ad.matmul(Y, Cy)))


@lru_cache(maxsize=32)
def _chord_maps(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.linspace(0.0, 1.0, n)[1:-1]
    eye = np.eye(d)
    return np.kron((1.0 - t)[None], eye), np.kron(t[None], eye)


def predicted_cost_grad(L: Lagrangian, X, Y, predictor: SplinePredictor,
                        quad: EnergyQuadrature = EnergyQuadrature(), metric_params=None):
    """Costs of predicted splines and their total derivative in ``Y``.

    Unlike the envelope partial, this includes the dependence of the
    predicted knots on the endpoint, so it is the exact gradient of the
    predicted cost.  Returns ``(costs, gradient)``.
    """
    X = np.asarray(X, dtype=np.float64)
    tape = ad.Tape()
    y = tape.input(np.asarray(Y, dtype=np.float64))
    phi = predictor.predict(X, y)
    e = energy_batch(L, X, phi, y, quad, metric_params)
    (g,) = tape.gradient(ad.sum(e), [y])
    _check_energy(e.value, quad)
    return e.value, g


def displacement_cost_batch(L: Lagrangian, X, Y, predictor: SplinePredictor, fine_tune_steps: int = 0,
                            quad: EnergyQuadrature = EnergyQuadrature(), rate: float = 1e-2,
                            grad: str | None = None, metric_params=None):
    """Costs ``c(x, y)`` of predicted (optionally fine-tuned) splines.

    With ``grad`` set to ``x``, ``y`` or ``metric`` also returns the
    envelope gradient: the partial derivative of the energy with the
    interior knots held at the returned path.
    Returns ``(costs, phi)`` or ``(costs, phi, gradient)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    phi = np.asarray(predictor.predict(X, Y))
    if L.vanishes_at_rest:
        # staying put is optimal and free
        still = np.all(X == Y, axis=1)
        if still.any():
            phi = phi.copy()
            phi[still] = np.tile(X[still], predictor.n - 2)
    if fine_tune_steps > 0:
        phi, _ = solve_geodesic_batch(L, X, Y, phi, fine_tune_steps, rate, quad)
    if grad is None:
        if metric_params is not None:
            c = energy_batch(L, X, phi, Y, quad, metric_params)
        else:
            c = energy_batch(L, X, phi, Y, quad)
        c = np.asarray(c)
        _check_energy(c, quad)
        return c, phi
    c, g = energy_grads(L, X, phi, Y, quad, grad, metric_params)
    _check_energy(c, quad)
    return c, phi, g


def displacement_cost(L: Lagrangian, x, y, predictor: SplinePredictor, fine_tune_steps: int = 0,
                      quad: EnergyQuadrature = EnergyQuadrature()) -> tuple[float, PathSpline]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c, phi = displacement_cost_batch(L, x[None], y[None], predictor, fine_tune_steps, quad)
    return float(c[0]), build_spline(x, y, phi[0])


def predictor_loss_grad(predictor: SplinePredictor, L: Lagrangian, X, Y,
                        quad: EnergyQuadrature) -> tuple[float, np.ndarray]:
    """Mean energy of predicted paths and its gradient in the predictor weights.

    Endpoints are constants.
    """
    tape = ad.Tape()
    p = tape.input(predictor.net.params)
    phi = predictor.predict(X, Y, p)
    e = energy_batch(L, np.asarray(X), phi, np.asarray(Y), quad)
    loss = ad.scale(ad.sum(e), 1.0 / len(X))
    (g,) = tape.gradient(loss, [p])
    return float(loss.value), g


def train_spline_predictor(predictor: SplinePredictor, L: Lagrangian,
                           pairs: Callable[[int], tuple[np.ndarray, np.ndarray]] | Iterator,
                           steps: int, rate: float = 1e-4, quad: EnergyQuadrature = EnergyQuadrature(),
                           state: AdamState | None = None,
                           history: list | None = None) -> SplinePredictor:
    """Fit the predictor by Adam on the mean energy of its paths.

    ``pairs(k)`` (or an iterator) yields endpoint batches ``(X, Y)``.
    Returns a new predictor; the input is left untouched.
    """
    out = predictor.copy()
    if steps <= 0:
        return out
    state = state or AdamState.zeros(out.net.n_params, rate)
    draw = pairs if callable(pairs) else (lambda k, it=pairs: next(it))
    for k in range(steps):
        X, Y = draw(k)
        loss, g = predictor_loss_grad(out, L, X, Y, quad)
        if not np.isfinite(loss):
            raise NonFiniteError(f"predictor loss is not finite at step {k}")
        out.net.params, state = adam_step(state, out.net.params, g)
        if history is not None:
            history.append(loss)
    return out
