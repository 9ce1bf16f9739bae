import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magflow import dynamics as dy
from magflow.errors import ConstantOrbitError, DomainError, GeometryError, NotPeriodicError
from magflow.geometry import (
    BUILTIN_KINDS,
    builtin_system,
    chart_displacement,
    field_strength,
    lorentz,
    wrap,
)

points = st.tuples(st.floats(-2, 2), st.floats(-2, 2)).map(np.array)


@settings(max_examples=40, deadline=None)
@given(x=points, u=points, w=points)
def test_lorentz_operator_represents_the_field(x, u, w):
    # g(Y u, w) = b (u1 w2 - u2 w1) on every built-in system
    for kind in ("flat_torus_sin_field", "conformal_torus_sin_field", "plane_constant_field"):
        system = builtin_system(kind)
        g, _, _ = system.metric(x)
        Y = lorentz(system)(x)
        b, _ = field_strength(system, x)
        lhs = (Y @ u) @ g @ w
        assert lhs == pytest.approx(b * (u[0] * w[1] - u[1] * w[0]), abs=1e-10)


def test_sin_field_strength():
    system = builtin_system("flat_torus_sin_field", amplitude=2.0)
    x = np.array([[0.125, 0.3], [0.5, 0.9]])
    b, _ = field_strength(system, x)
    assert np.allclose(b, 2.0 * np.sin(2 * np.pi * x[:, 0]))


def test_lorentz_derivative_matches_finite_differences():
    system = builtin_system("conformal_torus_sin_field")
    Y = lorentz(system)
    x = np.array([0.17, 0.61])
    dY = Y.derivative(x)
    h = 1e-6
    for m in range(2):
        e = np.zeros(2)
        e[m] = h
        assert np.allclose((Y(x + e) - Y(x - e)) / (2 * h), dY[m], atol=1e-7)


def test_unknown_system_and_parameter():
    with pytest.raises(GeometryError):
        builtin_system("sphere")
    with pytest.raises(GeometryError):
        builtin_system("flat_torus", amplitude=1.0)


@pytest.mark.parametrize("kind", sorted(BUILTIN_KINDS))
def test_builtin_systems_pickle(kind):
    system = builtin_system(kind)
    clone = pickle.loads(pickle.dumps(system))
    x = np.array([0.3, 0.7])
    assert np.allclose(dy.acceleration(system, x, [0.2, -0.1]),
                       dy.acceleration(clone, x, [0.2, -0.1]))


def test_torus_wrapping():
    system = builtin_system("flat_torus")
    assert np.allclose(wrap([1.25, -0.25]), [0.25, 0.75])
    assert np.allclose(chart_displacement(system, [0.95, 0.1], [0.05, 0.9]), [0.1, -0.2])


def test_plane_circle_matches_closed_form():
    # b0 = 1: unit speed gives the unit circle of period 2 pi
    plane = builtin_system("plane_constant_field", b0=1.0)
    traj = dy.integrate_orbit(plane, dy.PhaseState([1.0, 0.0], [0.0, 1.0]), np.pi, 2048)
    assert np.allclose(traj.x[-1], [-1.0, 0.0], atol=1e-10)
    assert traj.max_energy_drift < 1e-12


@pytest.mark.parametrize("b0, speed", [(1.0, 1.0), (2.0, 1.0), (1.0, 0.5)])
def test_larmor_radius_and_period(b0, speed):
    plane = builtin_system("plane_constant_field", b0=b0)
    r, T = speed / b0, 2 * np.pi / b0
    traj = dy.integrate_orbit(plane, dy.PhaseState([r, 0.0], [0.0, speed]), T, 4096)
    pos, vel, _ = dy.closure_defect(plane, traj)
    assert pos < 1e-9 and vel < 1e-9
    assert np.allclose(np.linalg.norm(traj.x, axis=1), r, atol=1e-9)


def test_energy_is_conserved_on_the_torus():
    system = builtin_system("conformal_torus_sin_field")
    traj = dy.integrate_orbit(system, dy.PhaseState([0.1, 0.2], [0.05, 0.04]), 50.0, 4000)
    assert traj.max_energy_drift < 1e-9 * traj.energy[0] + 1e-14


def test_integration_validation():
    system = builtin_system("flat_torus")
    with pytest.raises(DomainError):
        dy.integrate_orbit(system, dy.PhaseState([0, 0], [1, 0]), -1.0, 100)
    with pytest.raises(DomainError):
        dy.integrate_orbit(system, dy.PhaseState([0, 0], [1, 0]), 1.0, 4)


def test_leaving_the_plane_box():
    plane = builtin_system("plane_flat")
    with pytest.raises(DomainError):
        dy.integrate_orbit(plane, dy.PhaseState([0, 0], [1e4, 0]), 1.0, 100)


def test_flat_torus_line_monodromy():
    # geodesic flow on the flat torus: the Poincare map is a unipotent shear
    system = builtin_system("flat_torus")
    mono = dy.monodromy(system, dy.PhaseState([0.0, 0.0], [0.0, 1.0]), 1.0, 256)
    assert mono.symplectic_residual < 1e-12
    assert np.allclose(mono.spectrum_P, 1.0, atol=1e-6)
    assert not np.allclose(mono.poincare, np.eye(2))


def test_monodromy_preconditions():
    system = builtin_system("flat_torus")
    with pytest.raises(ConstantOrbitError):
        dy.monodromy(system, dy.PhaseState([0, 0], [0, 0]), 1.0)
    with pytest.raises(NotPeriodicError):
        dy.monodromy(system, dy.PhaseState([0, 0], [0.3, 0.7]), 1.0)


def test_refine_periodic_finds_the_circle():
    plane = builtin_system("plane_constant_field", b0=1.0)
    state, T, res = dy.refine_periodic(plane, dy.PhaseState([1.01, 0.0], [0.0, 1.0]), 6.2, 0.5,
                                       steps=1024)
    assert res < 1e-9
    assert T == pytest.approx(2 * np.pi, abs=1e-8)
    assert state.energy(plane) == pytest.approx(0.5, abs=1e-12)
