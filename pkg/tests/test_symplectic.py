import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magflow import symplectic as sp
from magflow.errors import NotUnipotentError


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3))
def test_random_symplectic_is_symplectic(seed, n):
    P = sp.random_symplectic(np.random.default_rng(seed), n)
    assert sp.symplectic_residual(P) < 1e-9
    assert np.allclose(sp.symplectic_inverse(P) @ P, np.eye(2 * n), atol=1e-8)


def test_classify_examples():
    assert sp.is_hyperbolic(np.diag([2.0, 0.5]))
    assert sp.is_unipotent(np.array([[1.0, 3.0], [0.0, 1.0]]))
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    assert not sp.is_hyperbolic(rot) and not sp.is_unipotent(rot)


def test_shear_perturbation_is_hyperbolic():
    P = np.array([[1.0, 1.0], [0.0, 1.0]])
    for t in (0.2, 0.05, 0.01):
        Pt = sp.hyperbolic_perturbation(P, t)
        assert sp.symplectic_residual(Pt) < 1e-12
        assert sp.is_hyperbolic(Pt)


def test_identity_perturbation():
    Pt = sp.hyperbolic_perturbation(np.eye(4), 0.1)
    assert sp.is_hyperbolic(Pt)
    assert sp.symplectic_residual(Pt) < 1e-12


def test_perturbation_rejects_non_unipotent():
    with pytest.raises(NotUnipotentError):
        sp.hyperbolic_perturbation(np.diag([2.0, 0.5]), 0.1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 2))
def test_invariant_lagrangian(seed, n):
    P = sp.random_unipotent(np.random.default_rng(seed), n)
    L = sp.invariant_lagrangian(P)
    J = sp.standard_form(n)
    assert np.linalg.norm(L.T @ J @ L) < 1e-6
    # P L lies in the span of L
    coeff, *_ = np.linalg.lstsq(L, P @ L, rcond=None)
    assert np.linalg.norm(L @ coeff - P @ L) < 1e-6 * np.linalg.norm(P)


def test_block_split_of_mixed_spectrum():
    rng = np.random.default_rng(5)
    S = sp.random_symplectic(rng, 2)
    # shear in (q1, p1) and a hyperbolic pair in (q2, p2)
    normal = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 2.0, 0.0, 0.0],
                       [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.5]])
    P = S @ normal @ sp.symplectic_inverse(S)
    split = sp.unipotent_block_split(P)
    assert split.A.shape == (2, 2) and split.B.shape == (2, 2)
    assert not split.indeterminate
    assert np.allclose(np.linalg.eigvals(split.A), 1.0, atol=1e-6)
    assert np.allclose(sorted(np.linalg.eigvals(split.B).real), [0.5, 2.0])
