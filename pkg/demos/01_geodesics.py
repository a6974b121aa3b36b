"""Paths of least action under three Lagrangians.

A transport cost here is the action of the cheapest path between two
points.  Paths are natural cubic splines through a handful of free knots,
and the action is integrated with a midpoint rule.  This script
solves a few of these inner problems directly, then trains the network
that predicts the knots so the solve can be skipped.

Runs in about a minute.
"""

import numpy as np

from lagot.geodesic import (EnergyQuadrature, SplinePredictor, displacement_cost_batch, path_energy,
                            solve_geodesic, train_spline_predictor)
from lagot.lagrangian import Lagrangian
from lagot.spline import build_spline, straight_phi

# 1. Kinetic energy: the straight line is already optimal, cost |x - y|^2 / 2.
L = Lagrangian()
s, e = solve_geodesic(L, [0.0, 0.0], [2.0, 0.0], steps=50)
print(f"kinetic   (0,0)->(2,0): energy {e:.4f}, expected 2")

# 2. A circle metric makes radial motion expensive (weight 1.1) and tangential
#    motion cheap (0.1), so the path bends towards the arc.
L = Lagrangian.from_name("metric.circle")
x, y = np.array([1.0, 0.0]), np.array([0.0, 1.0])
chord = path_energy(L, build_spline(x, y, straight_phi(x, y, 30)))
s, e = solve_geodesic(L, x, y, steps=3000)
t = np.linspace(0, 1, 9)
radius = np.linalg.norm(s.eval_path(t), axis=1)
print(f"circle    (1,0)->(0,1): energy {e:.5f}, the chord costs {chord:.5f}")
print("          radius along the path:", np.round(radius, 3))

# 3. A potential well: paths through the trough are cheaper.
L = Lagrangian.from_name("potential.slit")
s, e = solve_geodesic(L, [-1.0, 0.3], [1.0, 0.3], steps=1500)
mid = s.eval_path(np.array([0.5]))[0]
print(f"slit      (-1,.3)->(1,.3): energy {e:.4f}, midpoint {np.round(mid, 3)} (bent towards the gap at y = 0)")

# Amortisation: a network maps endpoints to knots.  With the kinetic
# Lagrangian it should learn straight lines, so predicted costs match
# |x - y|^2 / 2.
L = Lagrangian()
pred = SplinePredictor.init(np.random.default_rng(0), 30, 2, (128, 128))


def batches(k):
    r = np.random.default_rng([1, k])
    return r.normal(size=(128, 2)), r.normal(size=(128, 2))


X, Y = batches(10**6)  # held out
exact = 0.5 * np.sum((X - Y) ** 2, axis=1)
for steps in (0, 500, 3000):
    trained = train_spline_predictor(pred, L, batches, steps, 1e-3, EnergyQuadrature(50))
    c, _ = displacement_cost_batch(L, X, Y, trained, quad=EnergyQuadrature(50))
    print(f"predictor after {steps:4d} steps: max relative cost error {np.max(np.abs(c - exact) / exact):.2e}")
