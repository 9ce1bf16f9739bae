"""Acceptance criteria AC1 to AC11, each at its stated tolerance.

Each criterion is one test named ``test_acN_<title>``; the conftest hook
prints a PASS/FAIL line per criterion at the end of the run.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from magflow import index as ix
from magflow import loops as lp
from magflow import search
from magflow import symplectic as sp
from magflow.dynamics import PhaseState, integrate_orbit, spectrum_mismatch
from magflow.geometry import builtin_system

KAPPA = 0.002


def _random_torus_loop(rng, N, winding=None):
    if winding is None:
        winding = tuple(int(w) for w in rng.integers(-2, 3, size=2))
    s = np.arange(N) / N
    base = rng.random(2) + s[:, None] * np.asarray(winding, float)
    wiggle = sum(rng.normal(scale=0.08, size=2) * np.sin(2 * np.pi * k * s[:, None] + rng.random(2) * 6.3)
                 for k in range(1, 4))
    return lp.DiscreteLoop(base + wiggle, 0.3 + 5 * rng.random(), winding)


# AC1 ------------------------------------------------------------------------

def test_ac1_constant_field_oracle(plane):
    kappa = 0.5
    start = time.perf_counter()
    traj = integrate_orbit(plane, PhaseState([1.0, 0.0], [0.0, 1.0]), 2 * np.pi, 4096)
    closed_form = np.column_stack([np.cos(traj.t), np.sin(traj.t)])
    assert np.abs(traj.x - closed_form).max() < 1e-6
    assert np.linalg.norm(traj.x[-1] - traj.x[0]) < 1e-6

    seed = lp.circle_loop([0.02, -0.01], 1.05, 2 * np.pi * 1.03, 64)
    res = search.find_minimizer(plane, kappa, seed, with_index=False)
    elapsed = time.perf_counter() - start
    assert res.converged and res.gradient_norm < 1e-6, (
        f"descent stopped at gradient {res.gradient_norm:.2e}, period {res.loop.T:.4g}, "
        f"ps_failure={res.ps_failure}")
    radius = np.linalg.norm(res.loop.nodes - res.loop.nodes.mean(axis=0), axis=1)
    assert np.abs(radius - 1.0).max() < 1e-2
    assert elapsed < 5.0


# AC2 ------------------------------------------------------------------------

def test_ac2_action_equivariance(sin_torus):
    rng = np.random.default_rng(2)
    for _ in range(100):
        loop = _random_torus_loop(rng, int(rng.choice([16, 24, 32])))
        kappa = 10 ** rng.uniform(-3, 0)
        n = int(rng.integers(1, 6))
        S1 = lp.action(sin_torus, kappa, loop)
        Sn = lp.action(sin_torus, kappa, lp.iterate(loop, n))
        assert abs(Sn - n * S1) <= 1e-12 * max(1.0, abs(n * S1))

        a = lp.LoopTangent(rng.normal(size=(loop.N, 2)), rng.normal())
        b = lp.LoopTangent(rng.normal(size=(loop.N, 2)), rng.normal())
        base = lp.inner(loop, a, b)
        lifted = lp.inner(lp.iterate(loop, n), lp.iterate_tangent(a, n), lp.iterate_tangent(b, n))
        assert abs(lifted - n * base) <= 1e-6 * abs(n * base)

        # the differential is iteration-equivariant too: dS(psi^n)[d psi^n a] = n dS[a]
        p1 = lp.pairing(sin_torus, kappa, loop, a)
        pn = lp.pairing(sin_torus, kappa, lp.iterate(loop, n), lp.iterate_tangent(a, n))
        assert abs(pn - n * p1) <= 1e-9 * max(1.0, abs(n * p1))


# AC3 ------------------------------------------------------------------------

def test_ac3_gradient_correctness():
    rng = np.random.default_rng(3)
    systems = [builtin_system("flat_torus_sin_field"),
               builtin_system("conformal_torus_sin_field"),
               builtin_system("flat_torus_sin_field", potential_amplitude=0.01)]
    for j in range(50):
        system = systems[j % len(systems)]
        loop = _random_torus_loop(rng, 128)
        kappa = 10 ** rng.uniform(-3, -1)
        xi = lp.LoopTangent(rng.normal(size=(128, 2)) / 128, rng.normal() * 0.1)
        exact = lp.pairing(system, kappa, loop, xi)
        eps = 1e-5
        fd = (lp.action(system, kappa, lp.displace(loop, xi, eps))
              - lp.action(system, kappa, lp.displace(loop, xi, -eps))) / (2 * eps)
        assert abs(fd - exact) <= 1e-5 * max(1.0, abs(exact)), (j, fd, exact)


# AC4 ------------------------------------------------------------------------

@pytest.mark.parametrize("orbit", ["minimizer", "saddle", "plane_circle"])
def test_ac4_monodromy(orbit, request, sin_torus, plane):
    loop = request.getfixturevalue({"minimizer": "torus_minimizer", "saddle": "torus_saddle",
                                    "plane_circle": "plane_circle"}[orbit])
    system, kappa = (plane, 0.5) if orbit == "plane_circle" else (sin_torus, KAPPA)
    mono, residual = ix.poincare_of_loop(system, kappa, loop)
    assert residual < 1e-9
    assert mono.symplectic_residual < 1e-6
    expected = np.concatenate([[1.0, 1.0], mono.spectrum_P])
    assert spectrum_mismatch(mono.spectrum_full, expected) < 1e-5


# AC5 ------------------------------------------------------------------------

@pytest.mark.parametrize("orbit", ["minimizer", "saddle", "plane_circle"])
def test_ac5_bott_machinery(orbit, request, sin_torus, plane):
    loop = request.getfixturevalue({"minimizer": "torus_minimizer", "saddle": "torus_saddle",
                                    "plane_circle": "plane_circle"}[orbit])
    system, kappa = (plane, 0.5) if orbit == "plane_circle" else (sin_torus, KAPPA)
    tol = 1e-6

    ind_fixed, _ = ix.fixed_period_index(system, kappa, loop, tol)
    assert ix.bott_function(system, kappa, loop, 0.0, tol) == ind_fixed

    for n in (2, 3):
        direct, _ = ix.fixed_period_index(system, kappa, lp.iterate(loop, n), tol)
        bott = sum(ix.bott_function(system, kappa, loop, 2 * np.pi * k / n, None)
                   for k in range(n))
        assert direct == bott, (n, direct, bott)

    grid = 64
    samples = ix.bott_sweep(system, kappa, loop, grid, crit_tol=tol)
    grid_mean = ix.mean_index(samples)
    average = ix.refined_mean_index(system, kappa, loop, samples)
    assert abs(grid_mean - average) <= 2 * np.pi / grid

    ind8, _ = ix.fixed_period_index(system, kappa, lp.iterate(loop, 8), tol)
    assert abs(grid_mean - ind8 / 8) <= 0.3


# AC6 ------------------------------------------------------------------------

def _rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _embed(blocks):
    """Direct sum of 2x2 symplectic blocks in (q1..qk, p1..pk) coordinates."""
    k = len(blocks)
    M = np.zeros((2 * k, 2 * k))
    for i, B in enumerate(blocks):
        idx = [i, k + i]
        M[np.ix_(idx, idx)] = B
    return M


def _random_block(rng):
    kind = rng.integers(4)
    if kind == 0:  # root of unity of order <= 12
        q = int(rng.integers(1, 13))
        p = int(rng.integers(0, q))
        return _rotation(2 * np.pi * p / q)
    if kind == 1:  # elliptic, irrational angle
        return _rotation(2 * np.pi * rng.uniform(0.01, 0.49) * np.sqrt(2))
    if kind == 2:  # hyperbolic
        lam = rng.uniform(1.5, 3.0) * rng.choice([-1, 1])
        return np.diag([lam, 1 / lam])
    return np.eye(2) if rng.random() < 0.5 else -np.eye(2)


def test_ac6_iterated_nullity_partition():
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    cases = [(1, 50), (2, 20)]
    for n_dof, count in cases:
        for _ in range(count):
            S = sp.random_symplectic(rng, n_dof, scale=0.4)
            normal = _embed([_random_block(rng) for _ in range(n_dof)])
            P = S @ normal @ sp.symplectic_inverse(S)
            assert sp.symplectic_residual(P) < 1e-9
            part = ix.iterated_nullity_partition(P, 12)
            for n in range(1, 13):
                assert part.nu(n) == ix.kernel_dimension_of_power(P, n), (n, np.linalg.eigvals(P))
    assert time.perf_counter() - start < 10.0


# AC7 ------------------------------------------------------------------------

def test_ac7_hyperbolic_perturbation():
    rng = np.random.default_rng(7)
    for n_dof in (1, 2):
        for _ in range(100):
            P = sp.random_unipotent(rng, n_dof)
            for t in (0.05, 0.2):
                Pt = sp.hyperbolic_perturbation(P, t)
                assert sp.symplectic_residual(Pt) < 1e-8
                assert sp.is_hyperbolic(Pt)
            ts = 0.2 / 2.0 ** np.arange(8)
            dist = [np.linalg.norm(sp.hyperbolic_perturbation(P, t) - P) for t in ts]
            assert all(b < a for a, b in zip(dist[:-1], dist[1:]))
            assert dist[-1] < dist[0] / 50


# AC8, AC9 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def torus_sweep(sin_torus):
    kappas = np.linspace(0.001, 0.0028, 8).tolist()
    target = search.detour_target(sin_torus, kappas[-1], 32)
    start = time.perf_counter()
    result = search.sweep_kappa(sin_torus, kappas, [1, 2, 3],
                                lambda k: [search.line_seed(k, 32)], target,
                                jobs=max(1, os.cpu_count() or 1))
    return result, time.perf_counter() - start


def test_ac8_minimax_structure(torus_sweep):
    result, elapsed = torus_sweep
    assert elapsed < 600.0
    for n in result.ns:
        c = result.values(n)
        assert np.all(np.diff(c) >= -1e-4), (n, c)
        assert np.all(c > n * np.asarray(result.target_actions)), (n, c)
    for a, b in zip(result.ns[:-1], result.ns[1:]):
        assert np.all(result.values(b) < result.values(a)), (a, b)


def test_ac9_index_sanity(torus_sweep, sin_torus):
    result, _ = torus_sweep
    reports = []
    for rec in result.minimizers:
        for loop in rec.loops:
            rep = ix.index_report(sin_torus, rec.kappa, loop, grid=0, with_monodromy=False)
            assert rep.ind_free == 0
            reports.append(rep)
    checked = 0
    for cell in result.cells.values():
        if not cell.argmax_gradient_norm < 1e-3:
            continue
        rep = ix.index_report(sin_torus, cell.kappa, cell.argmax, grid=0, crit_tol=1e-3)
        assert rep.ind_free >= 1 or (rep.nullity or 0) >= 1 or rep.degenerate
        reports.append(rep)
        checked += 1
    assert checked > 0
    for rep in reports:
        assert 0 <= rep.ind_free - rep.ind_fixed <= 1


# AC10 -----------------------------------------------------------------------

def test_ac10_cu_estimation():
    flat = search.estimate_cu(builtin_system("flat_torus"), 0.0, 0.01, steps=5)
    assert flat.lo <= 0.0 <= flat.hi
    assert flat.width < 1e-3

    one = search.estimate_cu(builtin_system("flat_torus_sin_field", amplitude=1.0),
                             0.006, 0.02, steps=6)
    two = search.estimate_cu(builtin_system("flat_torus_sin_field", amplitude=2.0),
                             0.024, 0.08, steps=6)
    assert abs(two.estimate - 4 * one.estimate) <= two.width


# AC11 -----------------------------------------------------------------------

_CONFIG = """\
seed = 11

[system]
kind = "flat_torus_sin_field"

[discretization]
N = 32
max_iter = 3000

[parameters]
kappa = 0.002
seeds = [{ type = "line", x1 = 0.4, winding = [0, 1] }, { type = "random_circle", count = 2 }]
"""


def test_ac11_determinism(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(_CONFIG)
    outputs = []
    for j, jobs in enumerate(["1", "1", "2"]):
        out = tmp_path / f"run{j}"
        env = dict(os.environ, MAGFLOW_JOBS=jobs)
        proc = subprocess.run([sys.executable, "-m", "magflow.cli", "find-min", "--config",
                               str(cfg), "--out", str(out)], env=env, capture_output=True)
        assert proc.returncode in (0, 3), proc.stderr
        outputs.append(out)
    first = (outputs[0] / "run.json").read_bytes()
    for out in outputs[1:]:
        assert (out / "run.json").read_bytes() == first
        for f in sorted((outputs[0] / "loops").iterdir()):
            assert (out / "loops" / f.name).read_bytes() == f.read_bytes()
