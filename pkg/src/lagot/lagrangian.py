"""Lagrangians L(x, v): kinetic, kinetic minus a potential, and metric forms.

All batched evaluators take positions ``X`` and velocities ``V`` of shape
``(m, 2)`` (plain arrays or tape variables) and return ``(m,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import Mlp

POTENTIAL_KINDS = ("box", "slit", "hill", "well", "gmm")
METRIC_KINDS = ("circle", "mass_splitting", "x_paths", "learned")
GMM_CENTERS = np.array([(6.0, 6.0), (6.0, -6.0), (-6.0, -6.0)])
GMM_RADIUS = 1.5
_R2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class Potential:
    """Obstacle and field potentials U(x) on the plane.

    Hard indicators are replaced by products of logistic functions with
    slope ``sharpness`` per unit length.
    """

    kind: str
    m1: float = 0.01
    m2: float = 1.0
    m3: float = 0.05
    m4: float = 0.01
    m5: float = 0.1
    sharpness: float = 40.0

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential {self.kind!r}; expected one of {POTENTIAL_KINDS}")

    def __call__(self, X):
        k = self.sharpness
        x1, x2 = X[:, 0], X[:, 1]
        if self.kind == "box":
            inside = (ad.sigmoid(k * (x1 + 0.5)) * ad.sigmoid(k * (0.5 - x1))
                      * ad.sigmoid(k * (x2 + 0.5)) * ad.sigmoid(k * (0.5 - x2)))
            return ad.scale(inside, -self.m1)
        if self.kind == "slit":
            band = ad.sigmoid(k * (x1 + 0.1)) * ad.sigmoid(k * (0.1 - x1))
            bars = ad.sigmoid(k * (-0.25 - x2)) + ad.sigmoid(k * (x2 - 0.25))
            return ad.scale(band * bars, -self.m2)
        sq = ad.square(x1) + ad.square(x2)
        if self.kind == "hill":
            return ad.scale(sq, -self.m3)
        if self.kind == "well":
            return ad.scale(ad.exp(-sq), -self.m4)
        total = 0.0
        for cx, cy in GMM_CENTERS:
            r = ad.sqrt(ad.square(x1 - cx) + ad.square(x2 - cy) + 1e-12)
            total = total + ad.sigmoid(k * (GMM_RADIUS - r))
        return ad.scale(total, -self.m5)

    def hard(self, X) -> np.ndarray:
        """The unsmoothed definition, for comparison and dataset checks."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        x1, x2 = X[:, 0], X[:, 1]
        if self.kind == "box":
            return -self.m1 * ((np.abs(x1) <= 0.5) & (np.abs(x2) <= 0.5))
        if self.kind == "slit":
            return -self.m2 * ((np.abs(x1) <= 0.1) & (np.abs(x2) >= 0.25))
        if self.kind == "hill":
            return -self.m3 * (x1 ** 2 + x2 ** 2)
        if self.kind == "well":
            return -self.m4 * np.exp(-(x1 ** 2 + x2 ** 2))
        d = np.linalg.norm(X[:, None, :] - GMM_CENTERS[None], axis=2)
        return -self.m5 * (d <= GMM_RADIUS).sum(axis=1)

    def obstacle_mask(self, X) -> np.ndarray:
        """True where a point lies inside a hard obstacle (box, slit bars, gmm balls)."""
        if self.kind in ("hill", "well"):
            return np.zeros(len(np.atleast_2d(X)), dtype=bool)
        return self.hard(X) != 0


def potential_value(p: Potential, x) -> float:
    return float(p(np.asarray(x, dtype=np.float64).reshape(1, 2))[0])


@dataclass
class MetricField:
    """Position-dependent metric A(x) on the plane.

    ``circle``: x^ x^T + eps I.  ``mass_splitting`` and ``x_paths``:
    (1 + delta) I - w w^T with the direction fields of the trajectory
    datasets.  ``learned``: R(theta(x)) diag(base) R(theta(x))^T with the
    angle predicted by ``net``.  With ``head="angle"`` the net outputs theta
    itself.  With ``head="doubled"`` it outputs a vector w and theta is half
    the polar angle of w + (1, 0); fields whose axis turns by pi around a
    loop then need no jump in the net's output.
    """

    kind: str
    eps: float = 0.1
    delta: float = 0.1
    net: Mlp | None = None
    base: tuple[float, float] = (1.0, 0.1)
    head: str = "angle"

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric {self.kind!r}; expected one of {METRIC_KINDS}")
        if self.kind == "learned" and self.net is None:
            raise ValueError("a learned metric needs a rotation network")
        if self.head not in ("angle", "doubled"):
            raise ValueError(f"unknown rotation head {self.head!r}; expected 'angle' or 'doubled'")

    @classmethod
    def learned(cls, rng: np.random.Generator, hidden=(64, 64, 64, 64), slope: float = 0.01,
                head: str = "angle") -> "MetricField":
        out = 2 if head == "doubled" else 1
        return cls("learned", net=Mlp.init((2, *hidden, out), rng, slope), head=head)

    def angle(self, X, params=None):
        out = self.net.apply(X, params)
        if self.head == "doubled":
            out = ad.value_of(out)
            return 0.5 * np.arctan2(out[:, 1], out[:, 0] + 1.0)
        return out[:, 0]

    def _doubled(self, X, params):
        """cos and sin of twice the angle, on the tape."""
        out = self.net.apply(X, params)
        w1, w2 = out[:, 0] + 1.0, out[:, 1]
        inv = ad.reciprocal(ad.sqrt(ad.square(w1) + ad.square(w2) + 1e-12))
        return w1 * inv, w2 * inv

    def _w_dot(self, X, V):
        """Returns ``(w . v, |w|^2)`` for the trajectory metrics."""
        x1, x2 = X[:, 0], X[:, 1]
        v1, v2 = V[:, 0], V[:, 1]
        along1 = ad.scale(v1 + v2, _R2)  # w1 . v
        along2 = ad.scale(v1 - v2, _R2)  # w2 . v
        if self.kind == "mass_splitting":
            up = ad.step(x2)
            return up * along1 + (1.0 - up) * along2, 1.0
        prod = x1 * x2
        # |w| <= 1 keeps A positive definite; directions are unchanged
        alpha = ad.tanh(ad.relu(prod))
        beta = ad.scale(ad.tanh(ad.relu(-prod)), -1.0)
        return alpha * along1 + beta * along2, ad.square(alpha) + ad.square(beta)

    def quad_form(self, X, V, params=None):
        """v^T A(x) v, batched."""
        v1, v2 = V[:, 0], V[:, 1]
        vv = ad.square(v1) + ad.square(v2)
        if self.kind == "circle":
            x1, x2 = X[:, 0], X[:, 1]
            xv = x1 * v1 + x2 * v2
            return ad.square(xv) * ad.reciprocal(ad.square(x1) + ad.square(x2)) + ad.scale(vv, self.eps)
        if self.kind == "learned" and self.head == "doubled":
            c2, s2 = self._doubled(X, params)
            b0, b1 = self.base
            twist = c2 * (ad.square(v1) - ad.square(v2)) + ad.scale(s2 * v1 * v2, 2.0)
            return ad.scale(vv, 0.5 * (b0 + b1)) + ad.scale(twist, 0.5 * (b0 - b1))
        if self.kind == "learned":
            th = self.angle(X, params)
            c, s = ad.cos(th), ad.sin(th)
            return (ad.scale(ad.square(c * v1 + s * v2), self.base[0])
                    + ad.scale(ad.square(c * v2 - s * v1), self.base[1]))
        wv, _ = self._w_dot(X, V)
        return ad.scale(vv, 1.0 + self.delta) - ad.square(wv)

    def matrices(self, X) -> np.ndarray:
        """Explicit ``(m, 2, 2)`` matrices at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        m = len(X)
        eye = np.broadcast_to(np.eye(2), (m, 2, 2))
        if self.kind == "circle":
            r2 = np.einsum("ij,ij->i", X, X)
            if np.any(r2 == 0):
                raise ValueError("the circle metric is undefined at the origin")
            return np.einsum("ij,ik->ijk", X, X) / r2[:, None, None] + self.eps * eye
        if self.kind == "learned":
            th = self.angle(X)
            c, s = np.cos(th), np.sin(th)
            R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
            B = np.diag(self.base)
            return R @ B @ np.transpose(R, (0, 2, 1))
        w = self.direction(X)
        return (1.0 + self.delta) * eye - np.einsum("ij,ik->ijk", w, w)

    def direction(self, X) -> np.ndarray:
        """w(x) for the trajectory metrics."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        w1 = np.array([_R2, _R2])
        w2 = np.array([_R2, -_R2])
        if self.kind == "mass_splitting":
            return np.where((X[:, 1] >= 0)[:, None], w1, w2)
        if self.kind == "x_paths":
            prod = X[:, 0] * X[:, 1]
            alpha = np.tanh(np.maximum(prod, 0.0))
            beta = -np.tanh(np.maximum(-prod, 0.0))
            return alpha[:, None] * w1 + beta[:, None] * w2
        raise ValueError(f"{self.kind} metric has no direction field")


def metric_value(m: MetricField, x) -> np.ndarray:
    return m.matrices(np.asarray(x, dtype=np.float64).reshape(1, 2))[0]


@dataclass
class Lagrangian:
    """One of: ``kinetic``; ``potential`` (1/2|v|^2 - U(x)); ``metric`` (1/2 v^T A(x) v)."""

    kind: str = "kinetic"
    potential: Potential | None = None
    metric: MetricField | None = None

    def __post_init__(self):
        if self.kind == "potential" and self.potential is None:
            raise ValueError("potential Lagrangian needs a Potential")
        if self.kind == "metric" and self.metric is None:
            raise ValueError("metric Lagrangian needs a MetricField")
        if self.kind not in ("kinetic", "potential", "metric"):
            raise ValueError(f"unknown Lagrangian kind {self.kind!r}")

    @classmethod
    def from_name(cls, name: str, **kw) -> "Lagrangian":
        """Parse names such as ``kinetic``, ``potential.slit`` or ``metric.circle``."""
        if name == "kinetic":
            return cls()
        head, _, tail = name.partition(".")
        if head == "potential":
            pkw = {k: v for k, v in kw.items() if k in ("m1", "m2", "m3", "m4", "m5", "sharpness")}
            return cls("potential", potential=Potential(tail, **pkw))
        if head == "metric":
            if tail == "learned":
                raise ValueError("learned metrics are built by the metric learner")
            mkw = {k: v for k, v in kw.items() if k in ("eps", "delta")}
            return cls("metric", metric=MetricField(tail, **mkw))
        raise ValueError(f"unknown Lagrangian {name!r}")

    @property
    def vanishes_at_rest(self) -> bool:
        """Whether L(x, 0) = 0 everywhere, so constant paths cost nothing."""
        return self.kind != "potential"

    def __call__(self, X, V, metric_params=None):
        if self.kind == "metric":
            return ad.scale(self.metric.quad_form(X, V, metric_params), 0.5)
        kin = ad.scale(ad.sum(ad.square(V), axis=1), 0.5)
        if self.kind == "kinetic":
            return kin
        return kin - self.potential(X)


def lagrangian_value(L: Lagrangian, x, v) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    return float(L(x, v)[0])
