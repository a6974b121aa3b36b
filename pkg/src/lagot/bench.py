"""Synthetic measures and the exact marginal 2-Wasserstein evaluator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .lagrangian import GMM_CENTERS, MetricField, Potential

POTENTIAL_SETTINGS = ("box", "slit", "hill", "well", "gmm")
METRIC_SETTINGS = ("circle", "mass_splitting", "x_paths")
SANITY_SETTINGS = ("translation", "identity")
SETTINGS = POTENTIAL_SETTINGS + METRIC_SETTINGS + SANITY_SETTINGS

CIRCLE_STEPS = 24
TRAJECTORY_STEPS = 10


@dataclass
class EmpiricalMeasure:
    samples: np.ndarray
    index: int | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] == 0:
            raise ValueError("an empirical measure needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    n: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.name not in SETTINGS:
            raise ValueError(f"unknown setting {self.name!r}; valid settings: {', '.join(SETTINGS)}")
        if self.n is not None and self.n < 1:
            raise ValueError("sample count must be positive")

    @property
    def size(self) -> int:
        if self.n is not None:
            return self.n
        return 100 if self.name in METRIC_SETTINGS else 1024


def default_lagrangian(name: str) -> str:
    """Lagrangian a setting is meant to be trained with."""
    if name in POTENTIAL_SETTINGS:
        return f"potential.{name}"
    if name in METRIC_SETTINGS:
        return f"metric.{name}"
    return "kinetic"


def ground_truth_metric(name: str) -> MetricField:
    if name not in METRIC_SETTINGS:
        raise ValueError(f"{name!r} has no ground-truth metric")
    return MetricField(name)


def _gaussian_avoiding(rng, mean, std, n, potential: Potential | None) -> np.ndarray:
    out = np.empty((0, 2))
    while len(out) < n:
        draw = rng.normal(mean, std, size=(2 * (n - len(out)) + 8, 2))
        if potential is not None:
            draw = draw[~potential.obstacle_mask(draw)]
        out = np.vstack([out, draw])
    return out[:n]


def _mixture_avoiding(rng, means, std, n, potential: Potential | None) -> np.ndarray:
    out = np.empty((0, 2))
    while len(out) < n:
        m = 2 * (n - len(out)) + 8
        comp = rng.integers(len(means), size=m)
        draw = means[comp] + std * rng.normal(size=(m, 2))
        if potential is not None:
            draw = draw[~potential.obstacle_mask(draw)]
        out = np.vstack([out, draw])
    return out[:n]


def generate(spec: DatasetSpec, split: str = "train") -> list[EmpiricalMeasure]:
    """Sample the measures of a setting.

    ``split`` selects an independent stream (``train`` or ``test``) so
    held-out samples never coincide with training samples.
    """
    split_id = {"train": 0, "test": 1}[split]
    rng = np.random.default_rng([spec.seed, split_id])
    n = spec.size
    name = spec.name
    if name in POTENTIAL_SETTINGS:
        pot = Potential(name)
        if name == "gmm":
            mu = _gaussian_avoiding(rng, (0.0, 0.0), 0.5, n, pot)
            nu = _mixture_avoiding(rng, gmm_target_means(), 0.5, n, pot)
        else:
            mu = _gaussian_avoiding(rng, (-1.5, 0.0), 0.2, n, pot)
            nu = _gaussian_avoiding(rng, (1.5, 0.0), 0.2, n, pot)
        return [EmpiricalMeasure(mu, 0), EmpiricalMeasure(nu, 1)]
    if name == "translation":
        mu = rng.normal((0.0, 0.0), 0.1, size=(n, 2))
        nu = rng.normal((2.0, 0.0), 0.1, size=(n, 2))
        return [EmpiricalMeasure(mu, 0), EmpiricalMeasure(nu, 1)]
    if name == "identity":
        mu = rng.normal((0.0, 0.0), 0.1, size=(n, 2))
        nu = rng.normal((0.0, 0.0), 0.1, size=(n, 2))
        return [EmpiricalMeasure(mu, 0), EmpiricalMeasure(nu, 1)]
    if name == "circle":
        base = rng.normal((1.0, 0.0), 0.1, size=(n, 2))
        out = []
        for i in range(CIRCLE_STEPS):
            a = 2 * np.pi * i / CIRCLE_STEPS
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            out.append(EmpiricalMeasure(base @ rot.T, i))
        return out
    t = np.arange(TRAJECTORY_STEPS) / (TRAJECTORY_STEPS - 1)
    if name == "mass_splitting":
        base = rng.normal(0.0, 1.0, size=(n, 2))
        target = np.where((base[:, 1] >= 0)[:, None], [10.0, 10.0], [10.0, -10.0])
        return [EmpiricalMeasure(base + ti * target, i) for i, ti in enumerate(t)]
    # x_paths: two crossing diagonal streams
    n1 = (n + 1) // 2
    start = np.vstack([np.tile([-1.0, -1.0], (n1, 1)), np.tile([-1.0, 1.0], (n - n1, 1))])
    move = np.vstack([np.tile([2.0, 2.0], (n1, 1)), np.tile([2.0, -2.0], (n - n1, 1))])
    base = start + rng.normal(0.0, 0.1, size=(n, 2))
    return [EmpiricalMeasure(base + ti * move, i) for i, ti in enumerate(t)]


# ---------------------------------------------------------------------------
# data directory I/O
# ---------------------------------------------------------------------------

def write_dataset(out_dir: str | Path, spec: DatasetSpec, measures: list[EmpiricalMeasure]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(measures):
        with open(out / f"rho_{i}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k + 1}" for k in range(m.dim)])
            for row in m.samples:
                w.writerow([repr(float(v)) for v in row])
    manifest = {"name": spec.name, "N": spec.size, "seed": spec.seed,
                "K": len(measures), "d": measures[0].dim}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(data_dir: str | Path) -> tuple[dict, list[EmpiricalMeasure]]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    measures = []
    for i in range(manifest["K"]):
        arr = np.loadtxt(data_dir / f"rho_{i}.csv", delimiter=",", skiprows=1, ndmin=2)
        measures.append(EmpiricalMeasure(arr, i))
    return manifest, measures


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def w2_marginal_error(pushed, target) -> float:
    """Exact W2 between two equal-size point clouds via linear assignment."""
    a = pushed.samples if isinstance(pushed, EmpiricalMeasure) else np.atleast_2d(np.asarray(pushed, float))
    b = target.samples if isinstance(target, EmpiricalMeasure) else np.atleast_2d(np.asarray(target, float))
    if len(a) != len(b):
        raise ValueError(f"sample counts differ: {len(a)} vs {len(b)}")
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def bounding_box(measures: list[EmpiricalMeasure], pad: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    pts = np.vstack([m.samples for m in measures])
    lo, hi = pts.min(0), pts.max(0)
    span = hi - lo
    return lo - pad * span, hi + pad * span


def gmm_target_means() -> np.ndarray:
    ang = 2 * np.pi * np.arange(8) / 8
    return 12.0 * np.stack([np.cos(ang), np.sin(ang)], 1)


__all__ = [
    "SETTINGS", "DatasetSpec", "EmpiricalMeasure", "generate", "write_dataset", "read_dataset",
    "w2_marginal_error", "bounding_box", "default_lagrangian", "ground_truth_metric", "GMM_CENTERS",
]
