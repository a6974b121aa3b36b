"""Natural cubic splines through uniformly spaced knots on [0, 1].

A path between ``x`` and ``y`` is described by the positions of its
``n - 2`` interior knots.  Because natural-spline interpolation is linear
in the knot values, every quantity used downstream (positions, velocities
at arbitrary times) is a fixed matrix applied to the stacked knots; see
:func:`basis`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np


def knot_times(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


@lru_cache(maxsize=64)
def _second_derivative_map(n: int) -> np.ndarray:
    """Matrix taking the ``n`` knot values to the knot second derivatives."""
    if n < 2:
        raise ValueError("a spline needs at least 2 knots")
    out = np.zeros((n, n))
    if n == 2:
        return out
    h = 1.0 / (n - 1)
    k = n - 2
    T = np.zeros((k, k))
    idx = np.arange(k)
    T[idx, idx] = 4.0 * h
    T[idx[:-1], idx[:-1] + 1] = h
    T[idx[1:], idx[1:] - 1] = h
    R = np.zeros((k, n))
    R[idx, idx] = 6.0 / h
    R[idx, idx + 1] = -12.0 / h
    R[idx, idx + 2] = 6.0 / h
    out[1:-1] = np.linalg.solve(T, R)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=64)
def _coefficient_maps(n: int) -> np.ndarray:
    """Array ``(n-1, 4, n)``: per segment, maps knot values to the local
    polynomial coefficients ``a + b u + c u^2 + e u^3`` with ``u = t - t_j``."""
    h = 1.0 / (n - 1)
    M = _second_derivative_map(n)
    eye = np.eye(n)
    C = np.zeros((n - 1, 4, n))
    for j in range(n - 1):
        C[j, 0] = eye[j]
        C[j, 1] = (eye[j + 1] - eye[j]) / h - h * (2.0 * M[j] + M[j + 1]) / 6.0
        C[j, 2] = M[j] / 2.0
        C[j, 3] = (M[j + 1] - M[j]) / (6.0 * h)
    C.flags.writeable = False
    return C


def _segment(n: int, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = 1.0 / (n - 1)
    j = np.minimum(np.floor(t / h).astype(int), n - 2)
    return j, t - j * h


def basis(n: int, t) -> tuple[np.ndarray, np.ndarray]:
    """Matrices ``(len(t), n)`` giving position and velocity at times ``t``
    as linear combinations of the knot values."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    C = _coefficient_maps(n)
    j, u = _segment(n, t)
    cj = C[j]  # (T, 4, n)
    pos = cj[:, 0] + u[:, None] * cj[:, 1] + u[:, None] ** 2 * cj[:, 2] + u[:, None] ** 3 * cj[:, 3]
    vel = cj[:, 1] + 2.0 * u[:, None] * cj[:, 2] + 3.0 * u[:, None] ** 2 * cj[:, 3]
    pos[t == 0.0] = np.eye(n)[0]
    pos[t == 1.0] = np.eye(n)[-1]
    return pos, vel


def straight_phi(x, y, n: int) -> np.ndarray:
    """Interior knots of the straight segment from ``x`` to ``y``; shape ``(..., n-2, d)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    t = knot_times(n)[1:-1]
    return x[..., None, :] + t[:, None] * (y - x)[..., None, :]


@dataclass(frozen=True)
class PathSpline:
    """Natural cubic spline ``gamma: [0, 1] -> R^d`` with fixed endpoints."""

    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray  # (n-2, d) interior knot positions

    @property
    def n(self) -> int:
        return self.phi.shape[0] + 2

    @property
    def d(self) -> int:
        return self.x.shape[0]

    @property
    def knots(self) -> np.ndarray:
        return np.vstack([self.x[None], self.phi, self.y[None]])

    @property
    def coefficients(self) -> np.ndarray:
        """``(n-1, 4, d)`` local polynomial coefficients per segment."""
        return np.einsum("skn,nd->skd", _coefficient_maps(self.n), self.knots)

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
            raise ValueError("time must lie in [0, 1]")
        return t

    def eval_path(self, t) -> np.ndarray:
        t = self._check_t(t)
        pos, _ = basis(self.n, t)
        out = pos @ self.knots
        return out[0] if t.ndim == 0 else out

    def eval_velocity(self, t) -> np.ndarray:
        t = self._check_t(t)
        _, vel = basis(self.n, t)
        out = vel @ self.knots
        return out[0] if t.ndim == 0 else out

    def eval_segment(self, j: int, u: float, order: int = 0) -> np.ndarray:
        """Derivative of the given order of segment ``j`` at local offset ``u``.

        Lets callers compare one-sided limits at a knot.
        """
        a, b, c, e = self.coefficients[j]
        if order == 0:
            return a + b * u + c * u ** 2 + e * u ** 3
        if order == 1:
            return b + 2 * c * u + 3 * e * u ** 2
        if order == 2:
            return 2 * c + 6 * e * u
        raise ValueError("order must be 0, 1 or 2")


def build_spline(x, y, phi, n: int | None = None) -> PathSpline:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    d = x.shape[0]
    phi = np.asarray(phi, dtype=np.float64)
    if n is None:
        n = phi.size // d + 2
    if n < 2:
        raise ValueError("a spline needs at least 2 knots")
    if phi.size != (n - 2) * d:
        raise ValueError(f"expected {(n - 2) * d} free parameters, got {phi.size}")
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("spline parameters must be finite")
    return PathSpline(x, y, phi.reshape(n - 2, d))


def export_paths_csv(path: str | Path, splines: Iterable[PathSpline], resolution: int = 64) -> None:
    """Write ``pair_id,t,x1,...,xd`` rows, ``resolution`` samples per path."""
    splines = list(splines)
    d = splines[0].d if splines else 0
    t = np.linspace(0.0, 1.0, resolution)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "t"] + [f"x{k + 1}" for k in range(d)])
        for i, s in enumerate(splines):
            pts = s.eval_path(t)
            for tk, p in zip(t, pts):
                w.writerow([i, repr(float(tk))] + [repr(float(v)) for v in p])
