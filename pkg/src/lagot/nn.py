"""MLPs, Adam with a cosine rate schedule, L-BFGS, and checkpoint files."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """Fully connected leaky-ReLU network with a flat parameter vector.

    Parameters are laid out layer by layer as ``W`` (``n_in x n_out``,
    row-major) followed by ``b``.  The last layer is linear.
    """

    layer_sizes: tuple[int, ...]
    params: np.ndarray
    slope: float = 0.01

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @staticmethod
    def count(layer_sizes) -> int:
        return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))

    @property
    def n_params(self) -> int:
        return self.count(self.layer_sizes)

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, slope: float = 0.01,
             last_scale: float = 1.0) -> "Mlp":
        """Weights uniform in +-1/sqrt(fan_in), biases zero.

        ``last_scale`` shrinks the output layer, e.g. to start a residual
        predictor close to its base map.
        """
        chunks = []
        pairs = list(zip(layer_sizes[:-1], layer_sizes[1:]))
        for k, (n_in, n_out) in enumerate(pairs):
            bound = 1.0 / math.sqrt(n_in)
            if k == len(pairs) - 1:
                bound *= last_scale
            chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
            chunks.append(np.zeros(n_out))
        return cls(tuple(layer_sizes), np.concatenate(chunks), slope)

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.params.copy(), self.slope)

    def apply(self, x, params=None):
        """Evaluate on ``x`` of shape ``(d_in,)`` or ``(batch, d_in)``.

        ``params`` may be a tape variable to differentiate with respect to
        the weights; it defaults to the stored parameter array.
        """
        p = self.params if params is None else params
        xv = ad.value_of(x)
        if xv.shape[-1] != self.d_in:
            raise ValueError(f"input dimension {xv.shape[-1]} != {self.d_in}")
        return ad.mlp(x, p, self.layer_sizes, self.slope)

    def __call__(self, x) -> np.ndarray:
        return ad.value_of(self.apply(np.asarray(x, dtype=np.float64)))


def mlp_eval(net: Mlp, x) -> np.ndarray:
    return net(x)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CosineSchedule:
    """Cosine interpolation from ``start`` (t=0) to ``end`` (t=total_steps)."""

    start: float
    end: float
    total_steps: int = 1

    def __call__(self, t: int) -> float:
        if self.start == self.end:
            return self.start
        frac = min(max(t, 0), self.total_steps) / max(self.total_steps, 1)
        return self.end + (self.start - self.end) * 0.5 * (1.0 + math.cos(math.pi * frac))

    @classmethod
    def constant(cls, rate: float) -> "CosineSchedule":
        return cls(rate, rate, 1)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    schedule: CosineSchedule = CosineSchedule(1e-3, 1e-3, 1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, schedule: CosineSchedule | float, **kw) -> "AdamState":
        if not isinstance(schedule, CosineSchedule):
            schedule = CosineSchedule.constant(float(schedule))
        return cls(np.zeros(n), np.zeros(n), 0, schedule, **kw)

    @property
    def rate(self) -> float:
        return self.schedule(self.t)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update at the scheduled rate for step ``state.t``."""
    if grad.shape != params.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NonFiniteError(f"non-finite gradient at {bad.size} entries (first index {bad[0]})")
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    t = state.t + 1
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    new = params - state.rate * mhat / (np.sqrt(vhat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# L-BFGS with backtracking Armijo line search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LbfgsConfig:
    max_iters: int = 20
    history: int = 10
    c1: float = 1e-4
    backtrack: float = 0.5
    grad_tol: float = 1e-8
    max_backtracks: int = 30

    def __post_init__(self):
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must lie in (0, 1)")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")


class LbfgsResult(NamedTuple):
    x: np.ndarray          # (batch, d)
    fun: np.ndarray        # (batch,)
    nit: np.ndarray        # accepted iterations per row
    failed: np.ndarray     # line search gave up on this row


BatchObjective = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def lbfgs_minimize_batch(f: BatchObjective, y0: np.ndarray, cfg: LbfgsConfig = LbfgsConfig()) -> LbfgsResult:
    """Minimise independent problems row by row, vectorised over the batch.

    ``f(Y, rows)`` returns the values ``(len(rows),)`` and gradients
    ``(len(rows), d)`` of the problems indexed by ``rows`` at points ``Y``.
    Each row keeps its own curvature history and line search.
    """
    y = np.array(y0, dtype=np.float64, copy=True)
    n, d = y.shape
    every = np.arange(n)
    fval, g = f(y, every)
    if not np.all(np.isfinite(fval)):
        bad = int(np.flatnonzero(~np.isfinite(fval))[0])
        raise NonFiniteError(f"objective is not finite at the starting point (sample {bad})")
    m = cfg.history
    S = np.zeros((n, m, d))
    Yh = np.zeros((n, m, d))
    rho = np.zeros((n, m))
    count = np.zeros(n, dtype=int)
    head = np.zeros(n, dtype=int)  # slot for the next pair
    nit = np.zeros(n, dtype=int)
    failed = np.zeros(n, dtype=bool)
    active = np.linalg.norm(g, axis=1) >= cfg.grad_tol

    for _ in range(cfg.max_iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        p = _two_loop(g[rows], S[rows], Yh[rows], rho[rows], count[rows], head[rows])
        slope = np.einsum("ij,ij->i", g[rows], p)
        bad = ~(slope < 0)
        if bad.any():
            p[bad] = -g[rows][bad]
            slope[bad] = -np.einsum("ij,ij->i", g[rows][bad], g[rows][bad])
            count[rows[bad]] = 0
        alpha = np.ones(rows.size)
        first = count[rows] == 0
        alpha[first] = np.minimum(1.0, 1.0 / np.maximum(np.abs(g[rows][first]).sum(axis=1), 1e-300))

        pending = np.arange(rows.size)
        new_f = np.empty(rows.size)
        new_g = np.empty((rows.size, d))
        tried = 0
        width = 1  # the full step first, then several halvings per call
        while pending.size and tried <= cfg.max_backtracks:
            width = min(width, cfg.max_backtracks + 1 - tried)
            shrink = cfg.backtrack ** np.arange(width)
            a = (alpha[pending, None] * shrink).ravel()
            idx = np.repeat(pending, width)
            ft, gt = f(y[rows[idx]] + a[:, None] * p[idx], rows[idx])
            ok = (np.isfinite(ft) & (ft <= fval[rows[idx]] + cfg.c1 * a * slope[idx])).reshape(-1, width)
            hit = ok.any(axis=1)
            # the largest step that passes, as sequential halving would pick
            k = np.argmax(ok, axis=1)[hit]
            src = np.flatnonzero(hit) * width + k
            won = pending[hit]
            alpha[won] = a[src]
            new_f[won] = ft[src]
            new_g[won] = gt[src]
            pending = pending[~hit]
            alpha[pending] *= cfg.backtrack ** width
            tried += width
            width = 6
        if pending.size:
            lost = rows[pending]
            failed[lost] = True
            active[lost] = False
            log.debug("line search failed on %d rows", lost.size)
        acc = np.setdiff1d(np.arange(rows.size), pending, assume_unique=True)
        r = rows[acc]
        s = alpha[acc, None] * p[acc]
        yv = new_g[acc] - g[r]
        sy = np.einsum("ij,ij->i", s, yv)
        keep = sy > 1e-12 * np.einsum("ij,ij->i", yv, yv)
        kr = r[keep]
        slot = head[kr]
        S[kr, slot] = s[keep]
        Yh[kr, slot] = yv[keep]
        rho[kr, slot] = 1.0 / sy[keep]
        head[kr] = (slot + 1) % m
        count[kr] = np.minimum(count[kr] + 1, m)
        y[r] += s
        fval[r] = new_f[acc]
        g[r] = new_g[acc]
        nit[r] += 1
        active[r] &= np.linalg.norm(g[r], axis=1) >= cfg.grad_tol
    return LbfgsResult(y, fval, nit, failed)


def _two_loop(g, S, Yh, rho, count, head):
    n, m, _ = S.shape
    q = g.copy()
    alphas = np.zeros((n, m))
    idx = np.arange(n)
    for j in range(m):  # newest to oldest
        slot = (head - 1 - j) % m
        valid = j < count
        a = rho[idx, slot] * np.einsum("ij,ij->i", S[idx, slot], q) * valid
        alphas[:, j] = a
        q -= a[:, None] * Yh[idx, slot]
    newest = (head - 1) % m
    yy = np.einsum("ij,ij->i", Yh[idx, newest], Yh[idx, newest])
    sy = np.einsum("ij,ij->i", S[idx, newest], Yh[idx, newest])
    gamma = np.where(count > 0, sy / np.where(yy > 0, yy, 1.0), 1.0)
    r = gamma[:, None] * q
    for j in range(m - 1, -1, -1):  # oldest to newest
        slot = (head - 1 - j) % m
        valid = j < count
        b = rho[idx, slot] * np.einsum("ij,ij->i", Yh[idx, slot], r) * valid
        r += (alphas[:, j] - b)[:, None] * S[idx, slot]
    return -r


def lbfgs_minimize(f: Callable[[np.ndarray], tuple[float, np.ndarray]], y0,
                   cfg: LbfgsConfig = LbfgsConfig()) -> tuple[np.ndarray, float]:
    """Minimise a single objective ``f(y) -> (value, gradient)``."""
    y0 = np.atleast_1d(np.asarray(y0, dtype=np.float64))

    def fb(Y, rows):
        val, grad = f(Y[0])
        return np.array([val], dtype=np.float64), np.asarray(grad, dtype=np.float64)[None]

    res = lbfgs_minimize_batch(fb, y0[None], cfg)
    if res.failed[0]:
        log.warning("L-BFGS line search failed after %d iterations; returning best point", res.nit[0])
    return res.x[0], float(res.fun[0])


# ---------------------------------------------------------------------------
# checkpoints: text manifest + little-endian float64 blob
# ---------------------------------------------------------------------------

def save_checkpoint(prefix: str | Path, tensors: dict[str, np.ndarray]) -> None:
    prefix = Path(prefix)
    lines = []
    blobs = []
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(s) for s in arr.shape) or "()"
        lines.append(f"{name} {shape}\n")
        blobs.append(arr.astype("<f8").tobytes())
    tmp_bin = prefix.with_name(prefix.name + ".bin.tmp")
    tmp_man = prefix.with_name(prefix.name + ".manifest.tmp")
    tmp_bin.write_bytes(b"".join(blobs))
    tmp_man.write_text("".join(lines))
    tmp_bin.replace(prefix.with_name(prefix.name + ".bin"))
    tmp_man.replace(prefix.with_name(prefix.name + ".manifest"))


def load_checkpoint(prefix: str | Path) -> dict[str, np.ndarray]:
    prefix = Path(prefix)
    raw = np.frombuffer(prefix.with_name(prefix.name + ".bin").read_bytes(), dtype="<f8")
    out: dict[str, np.ndarray] = {}
    off = 0
    for line in prefix.with_name(prefix.name + ".manifest").read_text().splitlines():
        if not line.strip():
            continue
        name, shape_s = line.split()
        shape = () if shape_s == "()" else tuple(int(s) for s in shape_s.split(","))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = raw[off:off + size].astype(np.float64).reshape(shape)
        off += size
    if off != raw.size:
        raise ValueError(f"checkpoint {prefix}: manifest covers {off} values, blob has {raw.size}")
    return out
