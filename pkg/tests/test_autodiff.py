import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagot import autodiff as ad
from lagot.nn import Mlp

from conftest import central_diff


def _norm_rel(a, b):
    return np.linalg.norm(a - b) / (np.linalg.norm(a) + 1e-12)


def test_identity_tape_replays():
    tape = ad.Tape()
    x = tape.input([1.0, 2.0, 3.0])
    out = ad.scale(x, 1.0)
    assert np.array_equal(ad.forward(tape, [np.array([1.0, 2.0, 3.0])], out), [1.0, 2.0, 3.0])


def test_sum_of_squares_forward_and_gradient():
    tape = ad.Tape()
    x = tape.input([3.0, 4.0])
    out = ad.sum(x * x)
    assert float(ad.forward(tape, [np.array([3.0, 4.0])])) == 25.0
    (g,) = tape.gradient(out, [x])
    assert np.array_equal(g, [6.0, 8.0])


def test_dot_gradient_is_the_coefficient():
    tape = ad.Tape()
    x = tape.input([0.3, -7.0])
    out = ad.dot(np.array([1.0, -2.0]), x)
    (g,) = tape.gradient(out, [x])
    assert np.array_equal(g, [1.0, -2.0])


def test_zero_weight_network_outputs_zero(rng):
    net = Mlp((5, 7, 3), np.zeros(Mlp.count((5, 7, 3))))
    assert np.array_equal(net(rng.normal(size=(4, 5))), np.zeros((4, 3)))


def test_replay_on_new_inputs_matches_eager(rng):
    tape = ad.Tape()
    x = tape.input(rng.normal(size=3))
    out = ad.sum(ad.tanh(x) * ad.exp(x))
    new = rng.normal(size=3)
    assert float(ad.forward(tape, [new], out)) == float(np.sum(np.tanh(new) * np.exp(new)))
    assert float(out.value) != float(ad.forward(tape, [new], out))


def test_replay_shape_mismatch_names_the_node():
    tape = ad.Tape()
    x = tape.input(np.ones((2, 3)))
    ad.sum(ad.matmul(x, np.ones((3, 4))))
    with pytest.raises(ad.ShapeError) as err:
        ad.forward(tape, [np.ones((2, 5))])
    assert err.value.node == x.idx


def test_non_scalar_output_is_rejected():
    tape = ad.Tape()
    x = tape.input([1.0, 2.0])
    with pytest.raises(ad.TapeError):
        tape.gradient(x * 2.0, [x])


def test_foreign_node_is_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.input([1.0])
    y = t2.input([1.0])
    with pytest.raises(ad.TapeError):
        t1.gradient(ad.sum(x * x), [y])


UNARY = {
    "tanh": ad.tanh, "exp": ad.exp, "sin": ad.sin, "cos": ad.cos, "square": ad.square,
    "sigmoid": ad.sigmoid, "leaky_relu": lambda a: ad.leaky_relu(a, 0.1),
    "log": lambda a: ad.log(ad.square(a) + 1.0), "sqrt": lambda a: ad.sqrt(ad.square(a) + 0.5),
    "reciprocal": lambda a: ad.reciprocal(ad.square(a) + 0.5), "neg": ad.neg,
    "relu": ad.relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_matches_central_differences(name, rng):
    fn = UNARY[name]
    # keep clear of the kinks of the piecewise-linear ops
    x0 = rng.uniform(0.2, 1.5, size=6) * rng.choice([-1, 1], size=6)
    w = rng.normal(size=6)

    def f(v):
        return float(np.sum(w * ad.value_of(fn(v))))

    tape = ad.Tape()
    x = tape.input(x0)
    (g,) = tape.gradient(ad.sum(fn(x) * w), [x])
    fd = central_diff(f, x0)
    assert np.max(np.abs(g - fd) / (np.abs(g) + 1e-12)) < 1e-5 or _norm_rel(g, fd) < 1e-8


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul", "concat", "getitem", "transpose"])
def test_binary_and_structural_primitives(op, rng):
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(3, 4)) + 3.0
    w = rng.normal(size=(3, 4))

    def build(a, b):
        if op == "add":
            return ad.add(a, b) * w
        if op == "sub":
            return ad.sub(a, b) * w
        if op == "mul":
            return ad.mul(a, b) * w
        if op == "div":
            return ad.div(a, b) * w
        if op == "matmul":
            return ad.matmul(a, ad.transpose(b))
        if op == "concat":
            return ad.concat([a, b], axis=1) * np.hstack([w, w])
        if op == "getitem":
            return ad.getitem(a, (slice(None), [0, 2, 2])) * b[:, :3]
        return ad.transpose(a) * ad.transpose(b)

    tape = ad.Tape()
    a, b = tape.input(a0), tape.input(b0)
    ga, gb = tape.gradient(ad.sum(build(a, b)), [a, b])
    fa = central_diff(lambda v: float(np.sum(ad.value_of(build(v, b0)))), a0)
    fb = central_diff(lambda v: float(np.sum(ad.value_of(build(a0, v)))), b0)
    assert _norm_rel(ga, fa) < 1e-5
    assert _norm_rel(gb, fb) < 1e-5 or np.allclose(gb, 0) and np.allclose(fb, 0, atol=1e-8)


def test_broadcast_gradients_are_reduced(rng):
    a0 = rng.normal(size=(4, 3))
    b0 = rng.normal(size=3)
    tape = ad.Tape()
    a, b = tape.input(a0), tape.input(b0)
    ga, gb = tape.gradient(ad.sum(ad.square(a * b + 1.0)), [a, b])
    fb = central_diff(lambda v: float(np.sum((a0 * v + 1.0) ** 2)), b0)
    assert gb.shape == (3,)
    assert _norm_rel(gb, fb) < 1e-6


def test_two_layer_mlp_gradient_against_central_differences(rng):
    sizes = (5, 8, 1)
    net = Mlp.init(sizes, rng)
    x0 = rng.normal(size=(1, 5))
    tape = ad.Tape()
    x = tape.input(x0)
    (g,) = tape.gradient(ad.sum(net.apply(x)), [x])
    fd = central_diff(lambda v: float(net(v).sum()), x0)
    assert _norm_rel(g, fd) < 1e-6


def _layered(x, p, sizes, slope):
    """Reference perceptron built from elementary ops."""
    h, off = x, 0
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = ad.reshape(ad.getitem(p, slice(off, off + n_in * n_out)), (n_in, n_out))
        off += n_in * n_out
        h = ad.add(ad.matmul(h, w), ad.getitem(p, slice(off, off + n_out)))
        off += n_out
        if k < len(sizes) - 2:
            h = ad.leaky_relu(h, slope)
    return h


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), depth=st.integers(1, 4), batch=st.integers(0, 6),
       slope=st.sampled_from([0.0, 0.01, 0.3, 1.0, 1.5]))
def test_fused_mlp_matches_elementary_ops(seed, depth, batch, slope):
    rng = np.random.default_rng(seed)
    sizes = tuple(rng.integers(1, 6, size=depth + 1))
    p0 = rng.normal(size=Mlp.count(sizes))
    x0 = rng.normal(size=(batch, sizes[0]) if batch else sizes[0])
    w = rng.normal(size=(batch, sizes[-1]) if batch else sizes[-1])
    grads = []
    for f in (ad.mlp, _layered):
        tape = ad.Tape()
        x, p = tape.input(x0), tape.input(p0)
        out = f(x, p, sizes, slope)
        grads.append((out.value, *tape.gradient(ad.sum(out * w), [x, p])))
    for a, b in zip(*grads):
        assert a.shape == b.shape
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_fused_mlp_against_central_differences(rng):
    sizes = (3, 7, 7, 2)
    p0 = rng.normal(size=Mlp.count(sizes))
    x0 = rng.normal(size=(4, 3))
    tape = ad.Tape()
    x, p = tape.input(x0), tape.input(p0)
    gx, gp = tape.gradient(ad.sum(ad.square(ad.mlp(x, p, sizes))), [x, p])
    f = lambda xv, pv: float(np.sum(ad.mlp(xv, pv, sizes) ** 2))  # noqa: E731
    assert _norm_rel(gx, central_diff(lambda v: f(v, p0), x0)) < 1e-5
    assert _norm_rel(gp, central_diff(lambda v: f(x0, v), p0)) < 1e-5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), depth=st.integers(1, 4))
def test_random_composed_tapes(seed, depth):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=4)
    mats = [rng.normal(size=(4, 4)) / 2 for _ in range(depth)]
    acts = [ad.tanh, ad.sin, lambda a: ad.sigmoid(a) * a, lambda a: ad.leaky_relu(a, 0.2) + ad.square(a)]
    choice = rng.integers(len(acts), size=depth)

    def build(v):
        h = v
        for m, c in zip(mats, choice):
            h = acts[c](ad.matmul(m, h)) + h
        return ad.sum(ad.square(h))

    tape = ad.Tape()
    x = tape.input(x0)
    (g,) = tape.gradient(build(x), [x])
    fd = central_diff(lambda v: float(build(v)), x0)
    assert np.max(np.abs(g - fd) / (np.abs(g) + 1e-12)) < 1e-5 or _norm_rel(g, fd) < 1e-7


def test_gradient_is_linear_in_the_output(rng):
    x0 = rng.normal(size=5)
    tape = ad.Tape()
    x = tape.input(x0)
    f1 = ad.sum(ad.sin(x) * x)
    f2 = ad.sum(ad.exp(ad.scale(x, 0.3)))
    (g1,) = tape.gradient(f1, [x])
    (g2,) = tape.gradient(f2, [x])
    (g12,) = tape.gradient(ad.add(f1, f2), [x])
    assert np.allclose(g12, g1 + g2, rtol=0, atol=1e-12)


def test_replay_is_bit_for_bit_deterministic(rng):
    net = Mlp.init((3, 16, 16, 1), rng)
    x0 = rng.normal(size=(7, 3))
    results = []
    for _ in range(2):
        tape = ad.Tape()
        p = tape.input(net.params)
        out = ad.sum(net.apply(x0, p))
        (g,) = tape.gradient(out, [p])
        results.append((out.value.tobytes(), g.tobytes()))
    assert results[0] == results[1]


def test_untracked_inputs_just_compute():
    out = ad.add(np.array([1.0]), np.array([2.0]))
    assert isinstance(out, np.ndarray) and out[0] == 3.0
