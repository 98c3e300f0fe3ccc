import math

import numpy as np
import pytest

from flowtrack.cost import (PROB_EPS, MlpParams, assemble_cost, init_params, load_checkpoint,
                            mlp_forward, mlp_vjp, save_checkpoint, transition_cost,
                            transition_cost_grad)
from flowtrack.graph import build_graph

from conftest import det
from oracles import scalar_mlp


def test_zero_weights_give_half():
    w = MlpParams.zeros(8)
    assert mlp_forward(np.ones(6), w) == 0.5


def test_large_logit_saturates():
    w = MlpParams.zeros(4)
    w = MlpParams(w.W1, w.b1, w.W2, 20.0)
    assert abs(mlp_forward(np.zeros(6), w) - 1.0) < 1e-8


def test_forward_matches_scalar_oracle(rng):
    w = init_params(16, seed=3)
    E = rng.normal(size=(20, 6))
    p = mlp_forward(E, w)
    for k in range(20):
        q = scalar_mlp(E[k].tolist(), w.W1.tolist(), w.b1.tolist(), w.W2.tolist(), float(w.b2))
        assert p[k] == pytest.approx(q, rel=1e-12)


def test_init_bounds_and_determinism():
    a, b = init_params(64, 5), init_params(64, 5)
    np.testing.assert_array_equal(a.W1, b.W1)
    assert np.all(np.abs(a.W1) <= math.sqrt(1 / 6))
    assert np.all(np.abs(a.W2) <= math.sqrt(1 / 64))


def test_vjp_zero_upstream():
    w = init_params(8, 0)
    g, de = mlp_vjp(np.ones((3, 6)), w, np.zeros(3))
    for arr in g.arrays().values():
        assert not np.any(arr)
    assert not np.any(de)


def test_vjp_finite_differences(rng):
    w = init_params(8, 1)
    E = rng.normal(size=(5, 6))
    up = rng.normal(size=5)
    g, de = mlp_vjp(E, w, up)
    f = lambda ww: float(up @ mlp_forward(E, ww))
    h = 1e-5
    arrays = w.arrays()
    for name, arr in arrays.items():
        arr = np.atleast_1d(np.asarray(arr, dtype=float))
        ga = np.atleast_1d(np.asarray(g.arrays()[name]))
        for idx in np.ndindex(arr.shape):
            plus, minus = {k: np.array(v, dtype=float) for k, v in arrays.items()}, \
                {k: np.array(v, dtype=float) for k, v in arrays.items()}
            if plus[name].ndim == 0:
                plus[name] = plus[name] + h
                minus[name] = minus[name] - h
            else:
                plus[name][idx] += h
                minus[name][idx] -= h
            fd = (f(MlpParams.from_arrays(plus)) - f(MlpParams.from_arrays(minus))) / (2 * h)
            assert ga[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)
    for k in range(5):
        for j in range(6):
            ep, em = E.copy(), E.copy()
            ep[k, j] += h
            em[k, j] -= h
            fd = (float(up @ mlp_forward(ep, w)) - float(up @ mlp_forward(em, w))) / (2 * h)
            assert de[k, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_dead_relu_unit_has_zero_gradient():
    w = init_params(4, 0)
    W1, b1 = w.W1.copy(), w.b1.copy()
    W1[0] = 0.0
    b1[0] = -1.0
    w = MlpParams(W1, b1, w.W2, w.b2)
    g, _ = mlp_vjp(np.ones((2, 6)), w, np.ones(2))
    assert not np.any(g.W1[0]) and g.b1[0] == 0.0 and g.W2[0, 0] == 0.0


def test_assemble_cost_rules():
    dets = [det(0, score=0.9), det(1, 2, 0, score=0.4)]
    g = build_graph(dets, 1)
    F = np.zeros((1, 6))
    c = assemble_cost(g, F, MlpParams.zeros(4))
    np.testing.assert_allclose(c.c[:2], [-0.9, -0.4])
    np.testing.assert_array_equal(c.c[2:6], 1.0)
    assert c.c[6] == pytest.approx(math.log(2))
    np.testing.assert_array_equal(c.p, [0.5])
    with pytest.raises(ValueError):
        assemble_cost(g, np.zeros((2, 6)), MlpParams.zeros(4))


def test_clamp_and_monotonicity():
    assert transition_cost(1.0) == pytest.approx(-math.log(1 - PROB_EPS))
    assert np.isfinite(transition_cost(0.0))
    p = np.linspace(0.01, 0.99, 50)
    assert np.all(np.diff(transition_cost(p)) < 0)
    np.testing.assert_allclose(transition_cost_grad(p), -1 / p)
    assert transition_cost_grad(1.0) == 0.0


def test_checkpoint_round_trip_bit_exact(tmp_path):
    w = init_params(64, 11)
    save_checkpoint(tmp_path / "w.json", w, {"step": 3})
    w2, extra = load_checkpoint(tmp_path / "w.json")
    for k, v in w.arrays().items():
        assert np.array_equal(np.asarray(v), np.asarray(w2.arrays()[k]))
    assert extra == {"step": 3}
