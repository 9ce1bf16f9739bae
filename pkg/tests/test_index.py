from fractions import Fraction

import numpy as np
import pytest

from magflow import index as ix
from magflow import loops as lp
from magflow.errors import PreconditionError


def rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def test_count_spectrum():
    s = ix.count_spectrum(np.diag([-2.0, -1.0, 0.0, 3.0]))
    assert s.negative == 2 and s.near_zero == 1


@pytest.mark.parametrize("q", [1, 2, 3, 5, 7, 12])
def test_partition_of_a_rotation(q):
    P = rotation(2 * np.pi / q)
    part = ix.iterated_nullity_partition(P, 12)
    for n in range(1, 13):
        expected = 2 if n % q == 0 else 0
        assert part.nu(n) == expected == ix.kernel_dimension_of_power(P, n)
    assert min(c.n_min for c in part.classes if c.nu) == q


def test_partition_of_a_shear():
    # a Jordan block: geometric multiplicity 1 for every power
    P = np.array([[1.0, 1.0], [0.0, 1.0]])
    part = ix.iterated_nullity_partition(P, 6)
    assert all(part.nu(n) == 1 for n in range(1, 7))


def test_snap_eigenvalue():
    snap = ix.snap_eigenvalue(np.exp(2j * np.pi * 3 / 5), 12)
    assert snap.root == Fraction(3, 5) and not snap.ambiguous
    near = ix.snap_eigenvalue(np.exp(2j * np.pi * (1 / 3 + 1e-5)), 12)
    assert near.root is None and near.ambiguous
    far = ix.snap_eigenvalue(np.exp(2j * np.pi * 0.123456), 6)
    assert far.root is None and not far.ambiguous


def test_indices_of_the_torus_minimizer(sin_torus, torus_minimizer):
    rep = ix.index_report(sin_torus, 0.002, torus_minimizer, grid=16)
    assert (rep.ind_free, rep.ind_fixed) == (0, 0)
    assert rep.nullity == 0 and not rep.degenerate
    assert all(v == 0 for v in rep.bott_samples.values())
    back = ix.IndexReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()


def test_indices_of_the_mountain_pass(sin_torus, torus_saddle):
    ind_fixed, _ = ix.fixed_period_index(sin_torus, 0.002, torus_saddle)
    ind_free, _ = ix.free_period_index(sin_torus, 0.002, torus_saddle)
    assert ind_fixed == 1 and ind_free - ind_fixed in (0, 1)


def test_plane_circle_is_a_free_period_saddle(plane, plane_circle):
    assert ix.fixed_period_index(plane, 0.5, plane_circle)[0] == 0
    assert ix.free_period_index(plane, 0.5, plane_circle)[0] == 1


def test_bott_function_is_even(sin_torus, torus_saddle):
    for a in (0.4, 1.3, 2.9):
        assert ix.bott_function(sin_torus, 0.002, torus_saddle, a) == ix.bott_function(
            sin_torus, 0.002, torus_saddle, 2 * np.pi - a)


def test_noncritical_loop_is_rejected(sin_torus):
    loop = lp.circle_loop([0.2, 0.2], 0.1, 1.0, 16)
    with pytest.raises(PreconditionError):
        ix.fixed_period_index(sin_torus, 0.002, loop)
    with pytest.raises(PreconditionError):
        ix.index_report(sin_torus, 0.002, loop)


def test_mean_index_of_constant_samples():
    assert ix.mean_index({0.0: 2, 1.0: 2}) == 2.0
    with pytest.raises(ValueError):
        ix.mean_index([])
