from __future__ import annotations

import numpy as np
import pytest

from snnflex import numerics as nx
from snnflex.neuron import (
    NeuronParams,
    SurrogateSpec,
    lif_backward_analytic,
    lif_forward_seq,
    lif_sequence,
    lif_step,
    surrogate,
)
from snnflex.numerics import Tape

HARD = NeuronParams(v_th=1.0, tau=0.5, reset_mode="hard")
TRI = SurrogateSpec("triangular", h=1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        NeuronParams(v_th=0.0)
    with pytest.raises(ValueError):
        NeuronParams(tau=1.5)
    with pytest.raises(ValueError):
        NeuronParams(reset_mode="hard", multi_spike=True)
    assert NeuronParams(tau=1.0).is_if
    with pytest.raises(ValueError):
        SurrogateSpec("triangular", h=0.0)


def test_lif_step_examples():
    s, u = lif_step(np.array(0.0), np.array(1.0), HARD)
    assert (float(s), float(u)) == (1.0, 0.0)
    s, u = lif_step(np.array(0.5), np.array(0.3), HARD)
    assert float(s) == 0.0 and float(u) == pytest.approx(0.55)
    for p in (HARD, NeuronParams(tau=1.0, reset_mode="soft"), NeuronParams.if_multispike()):
        s, u = lif_step(np.array(0.0), np.array(0.0), p)
        assert (float(s), float(u)) == (0.0, 0.0)
    s, u = lif_step(np.array(0.0), np.array(2.3), NeuronParams.if_multispike())
    assert float(s) == 2.0 and float(u) == pytest.approx(0.3)


def test_lif_step_rejects_nonfinite():
    with pytest.raises(ValueError):
        lif_step(np.array(0.0), np.array(np.nan), HARD)


def test_if_equals_plain_integration(rng):
    p = NeuronParams(tau=1.0, reset_mode="soft")
    u = rng.normal(size=5)
    x = rng.normal(size=5)
    s, u2 = lif_step(u, x, p)
    v = u + x
    np.testing.assert_array_equal(s, (v >= 1.0).astype(float))
    np.testing.assert_array_equal(u2, v - s)


def test_lif_forward_seq_examples():
    x = np.full((5, 1), 0.6)
    s = lif_forward_seq(x, NeuronParams(tau=1.0, reset_mode="soft"))
    np.testing.assert_array_equal(s[:, 0], [0, 1, 0, 1, 0])
    s, v, _ = lif_forward_seq(np.array([[1.0], [0.0], [0.0]]), HARD, return_trace=True)
    np.testing.assert_array_equal(s[:, 0], [1, 0, 0])
    np.testing.assert_array_equal(v[:, 0], [1.0, 0.0, 0.0])
    one = lif_forward_seq(np.array([[0.7, 1.2]]), HARD)
    s1, _ = lif_step(np.array(0.0), np.array([0.7, 1.2]), HARD)
    np.testing.assert_array_equal(one[0], s1)
    with pytest.raises(ValueError):
        lif_forward_seq(np.zeros((0, 2)), HARD)


def test_surrogate_examples():
    assert surrogate(1.0, TRI, 1.0) == 1.0
    assert surrogate(2.0, TRI, 1.0) == 0.0
    assert surrogate(-0.5, TRI, 1.0) == 0.0
    assert surrogate(0.5, TRI, 1.0) == pytest.approx(0.5)
    exp = SurrogateSpec("single_exponential", alpha=1.0, beta=5.0)
    assert surrogate(1.0, exp, 1.0) == 1.0
    assert surrogate(1.2, exp, 1.0) == pytest.approx(np.exp(-1.0))


def test_triangular_shape():
    v = np.linspace(-2, 4, 601)
    g = surrogate(v, SurrogateSpec("triangular", h=0.5), 1.0)
    assert g.argmax() == np.argmin(np.abs(v - 1.0))
    assert np.all(g[np.abs(v - 1.0) >= 0.5] == 0)
    assert np.all(np.diff(g[(v > 0.5) & (v <= 1.0)]) > 0)
    assert np.all(np.diff(g[(v >= 1.0) & (v < 1.5)]) < 0)


def _tape_grad(x: np.ndarray, up: np.ndarray, p: NeuronParams, spec: SurrogateSpec) -> np.ndarray:
    tape = Tape(heaviside_grad=spec)
    xv = tape.watch(x, "x")
    s = lif_forward_seq(xv, p, spec)
    loss = nx.sum_all(nx.mul(s, up))
    return tape.backward(loss)["x"]


def test_analytic_small_examples():
    v = np.array([[1.2]])
    s = np.array([[1.0]])
    d = lif_backward_analytic(v, s, HARD, TRI, np.array([[2.0]]))
    assert d[0, 0] == pytest.approx(surrogate(1.2, TRI, 1.0) * 2.0)
    # no spike at step 1 and v(1) outside the support: bracket is 1
    v = np.array([[-0.5], [0.8]])
    s = np.array([[0.0], [0.0]])
    up = np.array([[1.5], [2.0]])
    d = lif_backward_analytic(v, s, HARD, TRI, up)
    assert d[0, 0] == pytest.approx(surrogate(0.8, TRI, 1.0) * 0.5 * 2.0 + 0.0 * 1.5)
    np.testing.assert_array_equal(lif_backward_analytic(v, s, HARD, TRI, np.zeros_like(up)), 0.0)
    with pytest.raises(ValueError):
        lif_backward_analytic(v, s, NeuronParams(reset_mode="soft"), TRI, up)


@pytest.mark.parametrize("spec", [TRI, SurrogateSpec("single_exponential")])
def test_analytic_matches_tape(spec):
    rng = nx.rng_stream(42, 0)
    for _ in range(50):
        T = int(rng.integers(1, 7))
        n = int(rng.integers(1, 9))
        p = NeuronParams(v_th=1.0, tau=float(rng.uniform(0.2, 1.0)), reset_mode="hard")
        x = rng.uniform(-0.5, 1.8, size=(T, n))
        up = rng.normal(size=(T, n))
        _, v, s = lif_forward_seq(x, p, return_trace=True)
        ana = lif_backward_analytic(v, s, p, spec, up)
        tap = _tape_grad(x, up, p, spec)
        np.testing.assert_allclose(ana, tap, rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize(
    "p",
    [HARD, NeuronParams(tau=0.8, reset_mode="soft"), NeuronParams.if_multispike(), NeuronParams(v_th=0.7, tau=0.5, reset_mode="soft", multi_spike=True)],
)
def test_fused_sequence_matches_composed(p):
    rng = nx.rng_stream(3, 1)
    for _ in range(20):
        x = rng.uniform(-1, 3, size=(5, 2, 3))
        up = rng.normal(size=x.shape)
        composed = _tape_grad(x, up, p, TRI)
        tape = Tape()
        xv = tape.watch(x, "x")
        s = lif_sequence(xv, p, TRI)
        np.testing.assert_array_equal(s.data, lif_forward_seq(x, p))
        fused = tape.backward(nx.sum_all(nx.mul(s, up)))["x"]
        np.testing.assert_allclose(fused, composed, rtol=1e-12, atol=1e-14)


def test_multispike_charge_conservation():
    rng = nx.rng_stream(5)
    for _ in range(100):
        v_th = float(rng.uniform(0.3, 2.0))
        p = NeuronParams.if_multispike(v_th)
        x = rng.uniform(0, 3, size=(int(rng.integers(1, 12)), 4))
        s = lif_forward_seq(x, p)
        Q = x.sum(axis=0)
        N = s.sum(axis=0)
        np.testing.assert_array_equal(N, np.floor(Q / v_th + 1e-12))
        final = Q - N * v_th
        assert np.all((final >= -1e-12) & (final < v_th))


def test_post_step_invariants(rng):
    x = rng.uniform(-1, 3, size=(8, 50))
    for p in (HARD, NeuronParams.if_multispike()):
        u = np.zeros(50)
        for t in range(8):
            s, u = lif_step(u, x[t], p)
            assert np.all(u < p.v_th)
            if p.reset_mode == "hard":
                assert np.all(u[s > 0] == 0)
