import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagot import autodiff as ad
from lagot.bench import DatasetSpec, bounding_box, generate
from lagot.lagrangian import (Lagrangian, MetricField, Potential, lagrangian_value, metric_value,
                              potential_value)
from lagot.nn import Mlp


def constant_angle_metric(angle: float) -> MetricField:
    # zero weights and a bias equal to the angle: theta(x) = angle everywhere
    net = Mlp((2, 3, 1), np.zeros(Mlp.count((2, 3, 1))))
    net.params[-1] = angle
    return MetricField("learned", net=net)


def test_hill_and_well_values():
    assert potential_value(Potential("hill"), (1.0, 1.0)) == pytest.approx(-0.1, abs=1e-15)
    assert potential_value(Potential("well"), (0.0, 0.0)) == pytest.approx(-0.01, abs=1e-15)


def test_slit_gap_and_bar():
    p = Potential("slit")
    assert abs(potential_value(p, (0.0, 0.0))) < 1e-3
    # 0.1 from the band edge, so the smoothed band factor is sigmoid(4)^2
    assert potential_value(p, (0.0, 0.5)) == pytest.approx(-1.0, abs=0.05)


def test_gmm_ball_centre():
    assert potential_value(Potential("gmm"), (6.0, 6.0)) == pytest.approx(-0.1, abs=1e-4)
    assert abs(potential_value(Potential("gmm"), (0.0, 0.0))) < 1e-6


@pytest.mark.parametrize("kind", ["box", "slit", "hill", "well", "gmm"])
def test_smoothed_matches_hard_away_from_boundaries(kind, rng):
    p = Potential(kind)
    X = rng.uniform(-8, 8, size=(4000, 2))
    # distance to the indicator boundaries
    if kind == "box":
        dist = np.minimum(np.abs(np.abs(X[:, 0]) - 0.5), np.abs(np.abs(X[:, 1]) - 0.5))
    elif kind == "slit":
        dist = np.minimum(np.abs(np.abs(X[:, 0]) - 0.1), np.abs(np.abs(X[:, 1]) - 0.25))
    elif kind == "gmm":
        from lagot.lagrangian import GMM_CENTERS
        dist = np.abs(np.linalg.norm(X[:, None] - GMM_CENTERS[None], axis=2) - 1.5).min(1)
    else:
        dist = np.full(len(X), np.inf)
    far = dist > 3.0 / 20.0
    scale = {"box": 0.01, "slit": 1.0, "gmm": 0.1}.get(kind, 1.0)
    assert np.max(np.abs(p(X[far]) - p.hard(X[far]))) < 0.05 * scale + 1e-12


def test_potential_gradient_is_finite_everywhere(rng):
    for kind in ("box", "slit", "gmm"):
        tape = ad.Tape()
        x = tape.input(rng.uniform(-8, 8, size=(500, 2)))
        (g,) = tape.gradient(ad.sum(Potential(kind)(x)), [x])
        assert np.all(np.isfinite(g))


def test_circle_metric_at_unit_x():
    assert np.allclose(metric_value(MetricField("circle"), (1.0, 0.0)), [[1.1, 0.0], [0.0, 0.1]], atol=1e-15)
    with pytest.raises(ValueError):
        metric_value(MetricField("circle"), (0.0, 0.0))


def test_learned_metric_zero_and_quarter_turn():
    assert np.allclose(metric_value(constant_angle_metric(0.0), (0.3, 2.0)), np.diag([1.0, 0.1]), atol=1e-15)
    m = metric_value(constant_angle_metric(math.pi / 4), (5.0, -1.0))
    assert np.allclose(m, [[0.55, 0.45], [0.45, 0.55]], atol=1e-12)


def test_mass_splitting_upper_branch():
    m = metric_value(MetricField("mass_splitting"), (0.0, 1.0))
    assert np.allclose(m, [[0.6, -0.5], [-0.5, 0.6]], atol=1e-12)


def test_lagrangian_examples():
    assert lagrangian_value(Lagrangian(), (0, 0), (2.0, 0.0)) == 2.0
    hill = Lagrangian.from_name("potential.hill")
    assert lagrangian_value(hill, (1.0, 1.0), (0.0, 0.0)) == pytest.approx(0.1, abs=1e-15)
    circle = Lagrangian.from_name("metric.circle")
    assert lagrangian_value(circle, (1.0, 0.0), (1.0, 0.0)) == pytest.approx(0.55, abs=1e-15)


@pytest.mark.parametrize("kind", ["circle", "mass_splitting", "x_paths"])
def test_metrics_symmetric_positive_definite_on_data_box(kind):
    measures = generate(DatasetSpec(kind, 100, 0))
    lo, hi = bounding_box(measures)
    g1, g2 = np.meshgrid(np.linspace(lo[0], hi[0], 50), np.linspace(lo[1], hi[1], 50))
    X = np.stack([g1.ravel(), g2.ravel()], 1)
    X = X[np.linalg.norm(X, axis=1) > 0]
    M = MetricField(kind).matrices(X)
    assert np.array_equal(M, np.swapaxes(M, 1, 2))
    assert np.linalg.eigvalsh(M).min() > 0


@pytest.mark.parametrize("kind", ["circle", "mass_splitting", "x_paths"])
def test_quadratic_form_matches_matrices(kind, rng):
    X = rng.normal(size=(200, 2)) * 3
    V = rng.normal(size=(200, 2))
    m = MetricField(kind)
    q = m.quad_form(X, V)
    M = m.matrices(X)
    assert np.allclose(q, np.einsum("mi,mij,mj->m", V, M, V), atol=1e-12)


def test_doubled_head_zero_net_is_the_base_matrix():
    m = MetricField.learned(np.random.default_rng(0), hidden=(4,), head="doubled")
    m.net.params[:] = 0.0
    assert np.allclose(metric_value(m, (0.3, 2.0)), np.diag([1.0, 0.1]), atol=1e-15)
    # w + (1, 0) = (0, 1): a quarter of a turn doubled, so theta = pi/4
    m.net.params[-1] = 1.0
    m.net.params[-2] = -1.0
    assert np.allclose(metric_value(m, (5.0, -1.0)), [[0.55, 0.45], [0.45, 0.55]], atol=1e-12)


def test_doubled_head_winds_without_a_jump():
    # w + (1, 0) = (x1^2 - x2^2, 2 x1 x2) / r^2 gives the circle's axes exactly
    grid = np.random.default_rng(1).normal(size=(30, 2))
    th = np.arctan2(grid[:, 1], grid[:, 0])

    class Field:
        def apply(self, X, params=None):
            r2 = X[:, 0] ** 2 + X[:, 1] ** 2
            return np.stack([(X[:, 0] ** 2 - X[:, 1] ** 2) / r2 - 1.0, 2 * X[:, 0] * X[:, 1] / r2], 1)

    m = MetricField("learned", net=Field(), head="doubled")
    assert np.allclose(np.cos(m.angle(grid) - th) ** 2, 1.0, atol=1e-12)


def test_unknown_head_rejected():
    with pytest.raises(ValueError):
        MetricField.learned(np.random.default_rng(0), hidden=(4,), head="quaternion")


def test_doubled_head_gradient_matches_finite_differences(rng):
    m = MetricField.learned(rng, hidden=(6,), head="doubled")
    X, V = rng.normal(size=(9, 2)), rng.normal(size=(9, 2))
    tape = ad.Tape()
    p = tape.input(m.net.params)
    (g,) = tape.gradient(ad.sum(m.quad_form(X, V, p)), [p])
    h = 1e-6
    for k in range(len(g)):
        e = np.zeros_like(g)
        e[k] = h
        fd = (np.sum(m.quad_form(X, V, m.net.params + e)) - np.sum(m.quad_form(X, V, m.net.params - e))) / (2 * h)
        assert g[k] == pytest.approx(fd, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), head=st.sampled_from(["angle", "doubled"]))
def test_learned_eigenvalues_are_pinned(seed, head):
    rng = np.random.default_rng(seed)
    m = MetricField.learned(rng, hidden=(16, 16), head=head)
    m.net.params *= 5
    X = rng.normal(size=(50, 2)) * 4
    lam = np.linalg.eigvalsh(m.matrices(X))
    assert np.allclose(lam, [0.1, 1.0], atol=1e-10)
    V = rng.normal(size=(50, 2))
    assert np.allclose(m.quad_form(X, V), np.einsum("mi,mij,mj->m", V, m.matrices(X), V), atol=1e-12)


def test_convex_in_velocity(rng):
    # the Hessian in v is A(x) (identity for kinetic) and must be positive definite
    X = rng.normal(size=(20, 2)) + 2.0
    for name in ("kinetic", "potential.slit", "metric.circle", "metric.x_paths"):
        L = Lagrangian.from_name(name)
        for x in X:
            h = 1e-4
            H = np.zeros((2, 2))
            for i in range(2):
                for j in range(2):
                    ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
                    f = lambda v: lagrangian_value(L, x, v)  # noqa: E731
                    H[i, j] = (f(ei + ej) - f(ei - ej) - f(-ei + ej) + f(-ei - ej)) / (4 * h * h)
            assert np.linalg.eigvalsh(0.5 * (H + H.T)).min() > 0


def test_unknown_names_rejected():
    with pytest.raises(ValueError):
        Lagrangian.from_name("potential.nope")
    with pytest.raises(ValueError):
        Lagrangian.from_name("friction")
    with pytest.raises(ValueError):
        MetricField("nope")
