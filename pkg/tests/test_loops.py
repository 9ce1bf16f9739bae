import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magflow import loops as lp
from magflow.errors import AlignmentError, DomainError
from magflow.geometry import builtin_system

SYSTEM = builtin_system("flat_torus_sin_field")


def wavy_loop(seed, N=32, winding=(0, 1)):
    rng = np.random.default_rng(seed)
    s = np.arange(N) / N
    nodes = 0.3 + s[:, None] * np.asarray(winding, float)
    nodes = nodes + 0.05 * np.column_stack([np.sin(2 * np.pi * s + rng.random()),
                                            np.cos(4 * np.pi * s + rng.random())])
    return lp.DiscreteLoop(nodes, 1.0 + rng.random() * 10, winding)


def test_line_minimizer_closed_form():
    # the line x1 = 1/2 has theta(v) = A/(2 pi) per unit length along x2
    kappa = 0.002
    T = 1.0 / np.sqrt(2 * kappa)
    loop = lp.line_loop([0.5, 0.0], (0, 1), T, 32)
    assert lp.action(SYSTEM, kappa, loop) == pytest.approx(np.sqrt(2 * kappa) - 1 / (2 * np.pi),
                                                           abs=1e-12)
    assert lp.gradient(SYSTEM, kappa, loop).norm < 1e-12


def test_action_parts_add_up():
    loop = wavy_loop(0)
    p = lp.action_parts(SYSTEM, 0.01, loop)
    S = p["K"] / loop.T - p["F"] - loop.T * p["W"] + 0.01 * loop.T
    assert S == pytest.approx(lp.action(SYSTEM, 0.01, loop), rel=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5))
def test_iterate_scales_action(seed, n):
    loop = wavy_loop(seed, winding=(1, -1))
    assert lp.action(SYSTEM, 0.03, lp.iterate(loop, n)) == pytest.approx(
        n * lp.action(SYSTEM, 0.03, loop), rel=1e-12, abs=1e-13)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(-40, 40))
def test_shift_preserves_action(seed, k):
    loop = wavy_loop(seed)
    assert lp.action(SYSTEM, 0.01, lp.shift(loop, k)) == pytest.approx(
        lp.action(SYSTEM, 0.01, loop), rel=1e-12)


def test_iterate_rejects_order_zero():
    with pytest.raises(DomainError):
        lp.iterate(wavy_loop(1), 0)


def test_translate_needs_node_alignment():
    loop = wavy_loop(2)
    assert np.allclose(lp.translate(loop, 0.25).nodes, lp.shift(loop, 8).nodes)
    with pytest.raises(AlignmentError):
        lp.translate(loop, 0.1)
    with pytest.raises(AlignmentError):
        lp.translate(loop, 1.0)


def test_fractional_shift_matches_integer_shift():
    loop = wavy_loop(3, winding=(1, 2))
    assert np.allclose(lp.fractional_shift(loop, 5).nodes, lp.shift(loop, 5).nodes, atol=1e-12)


def test_circle_distance_sees_through_time_shifts():
    loop = lp.circle_loop([0.4, 0.4], 0.2, 3.0, 32)
    moved = lp.fractional_shift(loop, 7.3)
    assert lp.loop_distance(loop, moved) > 0.1
    assert lp.circle_distance(loop, moved) < 1e-8


def test_resample_roundtrip():
    loop = lp.circle_loop([0.1, 0.2], 0.3, 2.0, 32)
    back = lp.resample(lp.resample(loop, 128), 32)
    assert np.allclose(back.nodes, loop.nodes, atol=1e-12)


def test_loop_record_roundtrip_is_bit_exact():
    loop = wavy_loop(4, winding=(2, -1))
    text = json.dumps(lp.loop_to_record(loop))
    back = lp.loop_from_record(json.loads(text))
    assert np.array_equal(back.nodes, loop.nodes)
    assert back.period == loop.period and back.winding == loop.winding


def test_malformed_record():
    with pytest.raises(DomainError):
        lp.loop_from_record({"N": 3, "T": 1.0})


def test_loop_validation():
    with pytest.raises(DomainError):
        lp.DiscreteLoop(np.zeros((8, 2)), 1.0)
    with pytest.raises(DomainError):
        lp.DiscreteLoop(np.zeros((16, 2)), -1.0)


def test_hessian_matches_finite_differences_of_gradient():
    loop = wavy_loop(5, N=16)
    kappa = 0.02
    H = lp.hessian(SYSTEM, kappa, loop)
    rng = np.random.default_rng(0)
    xi = lp.LoopTangent(rng.normal(size=(16, 2)), rng.normal())
    eps = 1e-6
    rp, tp = lp.differential(SYSTEM, kappa, lp.displace(loop, xi, eps))
    rm, tm = lp.differential(SYSTEM, kappa, lp.displace(loop, xi, -eps))
    fd = np.concatenate([(rp - rm).ravel(), [tp - tm]]) / (2 * eps)
    exact = H @ np.concatenate([xi.u.ravel(), [xi.R]])
    assert np.allclose(fd, exact, rtol=1e-6, atol=1e-6)


def test_twisted_hessian_is_hermitian():
    loop = wavy_loop(6, N=16)
    H = lp.hessian(SYSTEM, 0.01, loop, twist=np.exp(0.7j))
    assert np.allclose(H, H.conj().T)


def test_orthogonal_complement_residual():
    loop = wavy_loop(7, N=16)
    u = np.random.default_rng(1).normal(size=(32, 2))
    u[16:] = -u[:16]
    assert lp.orthogonal_complement_residual(loop, 2, lp.LoopTangent(u)) == pytest.approx(0.0)
    with pytest.raises(DomainError):
        lp.orthogonal_complement_residual(loop, 3, lp.LoopTangent(u))
