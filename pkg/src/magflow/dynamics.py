"""
Magnetic geodesic flow, its linearization, and linearized Poincare maps.

The flow solves ``x' = v``, ``v'^k = -G^k_ij v^i v^j + (Y v)^k - (grad V)^k``.
On the cotangent side we use ``p = g v - theta`` and
``H(q, p) = |p + theta|^2_{g^-1} / 2 + V``; this is the Legendre transform of
the Lagrangian whose Euler-Lagrange equation is the flow above (see
:mod:`magflow.loops` for the sign of the magnetic term).  Phase vectors are
ordered ``(q1, q2, p1, p2)`` with symplectic form ``omega(a, b) = a^T OMEGA b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConstantOrbitError, DomainError, GeometryError, NotPeriodicError
from .geometry import (
    MagneticSystem,
    christoffel,
    inverse2,
    lorentz,
    metric_checked,
)

OMEGA = np.block([[np.zeros((2, 2)), np.eye(2)], [-np.eye(2), np.zeros((2, 2))]])
# form matrix in an adapted basis ordered (e1, f1, e2, f2)
J_ADAPTED = np.kron(np.eye(2), np.array([[0.0, 1.0], [-1.0, 0.0]]))

CLOSURE_POS_TOL = 1e-6
CLOSURE_VEL_TOL = 1e-5


@dataclass(frozen=True)
class PhaseState:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(2))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(2))

    def energy(self, system: MagneticSystem) -> float:
        return float(energy(system, self.x, self.v))


def energy(system: MagneticSystem, x, v):
    g, _, _ = metric_checked(system, x)
    V, _, _ = system.potential(x)
    return 0.5 * np.einsum("...i,...ij,...j->...", v, g, v) + V


def acceleration(system: MagneticSystem, x, v):
    """Acceleration from Christoffel symbols and the Lorentz operator (batched)."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    G = christoffel(system, x)
    Y = lorentz(system)(x)
    g, _, _ = metric_checked(system, x)
    _, dV, _ = system.potential(x)
    grad_v = np.einsum("...kl,...l->...k", inverse2(g), dV)
    return -np.einsum("...kij,...i,...j->...k", G, v, v) + np.einsum("...kj,...j->...k", Y, v) - grad_v


def magnetic_rhs(system: MagneticSystem, state: PhaseState):
    """Phase-space derivative ``(x', v')`` at ``state``."""
    return state.v.copy(), acceleration(system, state.x, state.v)


def _inv2(g):
    det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    if not (g[0, 0] > 0 and det > 0):
        raise GeometryError("metric is not positive definite")
    return np.array([[g[1, 1], -g[0, 1]], [-g[1, 0], g[0, 0]]]) / det


def _point_force(system, x, v):
    # a = g^-1 F with F_l = -w_l / 2 + b (R v)_l - dV_l and
    # w_l = 2 v_i v_j d_i g_jl - v_i v_j d_l g_ij  (so that -g^-1 w / 2 = -G(v, v))
    g, dg, d2g = system.metric(x)
    _, dth, d2th = system.theta(x)
    _, dV, d2V = system.potential(x)
    ginv = _inv2(g)
    A = np.tensordot(v, dg, 1)  # A[j, l] = v_i d_i g_jl
    w = 2.0 * (v @ A) - (dg @ v) @ v
    b = dth[0, 1] - dth[1, 0]
    Rv = np.array([-v[1], v[0]])
    F = -0.5 * w + b * Rv - dV
    return g, dg, d2g, d2th, d2V, ginv, A, b, Rv, F


def point_acceleration(system: MagneticSystem, x, v):
    """Single-point acceleration; same vector field as :func:`acceleration`."""
    *_, ginv, _, _, _, F = _point_force(system, x, v)
    return ginv @ F


def acceleration_jacobian(system: MagneticSystem, x, v, with_value: bool = False):
    """Partials ``(da/dx, da/dv)`` of the acceleration at one point, indexed ``[k, m]``.

    With ``with_value=True`` the acceleration itself is appended to the tuple.
    """
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    g, dg, d2g, d2th, d2V, ginv, A, b, Rv, F = _point_force(system, x, v)
    db = d2th[:, 0, 1] - d2th[:, 1, 0]
    # dw_l/dx^m = 2 v_i v_j d_m d_i g_jl - v_i v_j d_m d_l g_ij
    dw_dx = (2.0 * np.einsum("i,mijl,j->lm", v, d2g, v)
             - np.einsum("i,mlij,j->lm", v, d2g, v))
    dF_dx = -0.5 * dw_dx + np.outer(Rv, db) - d2V.T
    # dw_l/dv^m = 2 (d_m g_jl v_j + v_i d_i g_ml) - 2 d_l g_mj v_j
    dw_dv = 2.0 * (np.einsum("mjl,j->lm", dg, v) + A.T) - 2.0 * np.einsum("lmj,j->lm", dg, v)
    dF_dv = -0.5 * dw_dv + b * np.array([[0.0, -1.0], [1.0, 0.0]])
    # d(g^-1)/dx^m = -g^-1 (d_m g) g^-1
    dginv_F = -np.einsum("ka,mab,bl,l->km", ginv, dg, ginv, F)
    out = (dginv_F + ginv @ dF_dx, ginv @ dF_dv)
    return out + (ginv @ F,) if with_value else out


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    energy: np.ndarray
    max_energy_drift: float
    flow_matrix: np.ndarray | None = None

    @property
    def start(self) -> PhaseState:
        return PhaseState(self.x[0], self.v[0])

    @property
    def end(self) -> PhaseState:
        return PhaseState(self.x[-1], self.v[-1])

    def __len__(self):
        return len(self.t)


def _rk4(f, y, h, steps, check=None):
    out = np.empty((steps + 1,) + y.shape)
    out[0] = y
    for n in range(steps):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[n + 1] = y
        if check is not None:
            check(y)
    return out


def _box_check(system):
    if system.is_torus:
        return None
    box = system.plane_box

    def check(y):
        if np.any(np.abs(y[:2]) > box):
            raise DomainError(f"trajectory left the plane chart box |x| <= {box}")

    return check


def integrate_orbit(system: MagneticSystem, state0: PhaseState, T: float, steps: int,
                    variational: bool = False) -> Trajectory:
    """Fixed-step RK4 solution over ``[0, T]``.

    Torus coordinates are kept as a continuous lift (never wrapped).  With
    ``variational=True`` the 4x4 fundamental matrix of the linearized flow in
    ``(x, v)`` coordinates is integrated alongside and stored in
    ``flow_matrix``.
    """
    if not T > 0:
        raise DomainError("integration time must be positive")
    if steps < 8:
        raise DomainError("need at least 8 steps")
    h = T / steps
    y0 = np.concatenate([state0.x, state0.v])

    if variational:
        def f(y):
            x, v = y[:2], y[2:4]
            Phi = y[4:].reshape(4, 4)
            ax, av, acc = acceleration_jacobian(system, x, v, with_value=True)
            dPhi = np.concatenate([Phi[2:], ax @ Phi[:2] + av @ Phi[2:]])
            return np.concatenate([v, acc, dPhi.ravel()])

        y0 = np.concatenate([y0, np.eye(4).ravel()])
    else:
        def f(y):
            return np.concatenate([y[2:], point_acceleration(system, y[:2], y[2:])])

    ys = _rk4(f, y0, h, steps, _box_check(system))
    x, v = ys[:, :2], ys[:, 2:4]
    E = energy(system, x, v)
    return Trajectory(
        t=np.linspace(0.0, T, steps + 1),
        x=x,
        v=v,
        energy=E,
        max_energy_drift=float(np.max(np.abs(E - E[0]))),
        flow_matrix=ys[-1, 4:].reshape(4, 4) if variational else None,
    )


def closure_defect(system: MagneticSystem, traj: Trajectory):
    """Position and velocity gap between end and start, and the winding."""
    dx = traj.x[-1] - traj.x[0]
    winding = np.round(dx) if system.is_torus else np.zeros(2)
    return (float(np.linalg.norm(dx - winding)), float(np.linalg.norm(traj.v[-1] - traj.v[0])),
            winding.astype(int))


def legendre(system: MagneticSystem, x, v):
    """Cotangent point ``(q, p)`` with ``p = g v - theta``."""
    g, _, _ = metric_checked(system, x)
    th, _, _ = system.theta(x)
    return np.concatenate([np.asarray(x, float), g @ v - th])


def legendre_jacobian(system: MagneticSystem, x, v):
    g, dg, _ = metric_checked(system, x)
    _, dth, _ = system.theta(x)
    D = np.zeros((4, 4))
    D[:2, :2] = np.eye(2)
    # d(g v - theta)_i / dx^m
    D[2:, :2] = np.einsum("mij,j->im", dg, v) - dth.T
    D[2:, 2:] = g
    return D


def hamiltonian(system: MagneticSystem, q, p):
    g, _, _ = metric_checked(system, q)
    th, _, _ = system.theta(q)
    V, _, _ = system.potential(q)
    w = p + th
    return 0.5 * w @ inverse2(g) @ w + V


def symplectic_form(a, b, form=OMEGA):
    return float(np.asarray(a) @ form @ np.asarray(b))


def adapted_basis(flow_vector, grad_h):
    """Symplectic basis ``(e1, f1, e2, f2)`` with ``f1`` the flow direction.

    ``e1`` is along ``-grad H`` scaled so that ``omega(e1, f1) = 1``; then
    ``span(f1, e2, f2)`` is the tangent space of the energy level.
    """
    f1 = np.asarray(flow_vector, float)
    gh = np.asarray(grad_h, float)
    e1 = -gh / (gh @ gh)

    def project(a):
        return a - symplectic_form(a, f1) * e1 + symplectic_form(a, e1) * f1

    cands = [project(c) for c in np.eye(4)]
    order = np.argsort([-np.linalg.norm(c) for c in cands], kind="stable")
    e2 = cands[order[0]] / np.linalg.norm(cands[order[0]])
    pair = [symplectic_form(e2, c) for c in cands]
    j = int(np.argmax(np.abs(pair)))
    f2 = cands[j] / pair[j]
    return np.column_stack([e1, f1, e2, f2])


@dataclass
class MonodromyData:
    full_matrix: np.ndarray
    poincare: np.ndarray
    basis: np.ndarray
    spectrum_full: np.ndarray
    spectrum_P: np.ndarray
    hamiltonian_matrix: np.ndarray
    period: float
    closure: tuple = field(default=(0.0, 0.0))

    @property
    def symplectic_residual(self) -> float:
        M = self.full_matrix
        return float(np.linalg.norm(M.T @ J_ADAPTED @ M - J_ADAPTED))


def monodromy(system: MagneticSystem, state0: PhaseState, T: float, steps: int = 4096,
              pos_tol: float = CLOSURE_POS_TOL, vel_tol: float = CLOSURE_VEL_TOL) -> MonodromyData:
    """Linearized flow over one period and its Poincare block.

    ``state0`` must start a ``T``-periodic, non-constant orbit.
    """
    if np.linalg.norm(state0.v) < 1e-10:
        raise ConstantOrbitError("monodromy needs a non-constant orbit")
    traj = integrate_orbit(system, state0, T, steps, variational=True)
    dpos, dvel, _ = closure_defect(system, traj)
    if dpos > pos_tol or dvel > vel_tol:
        raise NotPeriodicError(f"orbit does not close: |dx|={dpos:.2e}, |dv|={dvel:.2e}")
    x0, v0 = traj.x[0], traj.v[0]
    x1, v1 = traj.x[-1], traj.v[-1]
    D0 = legendre_jacobian(system, x0, v0)
    D1 = legendre_jacobian(system, x1, v1)
    MH = D1 @ traj.flow_matrix @ np.linalg.inv(D0)

    XH = D0 @ np.concatenate([v0, point_acceleration(system, x0, v0)])
    grad_h = np.concatenate([-XH[2:], XH[:2]])
    B = adapted_basis(XH, grad_h)
    M = np.linalg.solve(B, MH @ B)
    P = M[2:, 2:].copy()
    return MonodromyData(
        full_matrix=M,
        poincare=P,
        basis=B,
        spectrum_full=np.linalg.eigvals(M),
        spectrum_P=np.linalg.eigvals(P),
        hamiltonian_matrix=MH,
        period=T,
        closure=(dpos, dvel),
    )


def spectrum_mismatch(a, b) -> float:
    """Optimal-matching distance between two eigenvalue multisets."""
    from scipy.optimize import linear_sum_assignment

    a = np.asarray(a, complex)
    b = np.asarray(b, complex)
    if a.shape != b.shape:
        return float("inf")
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max()) if len(r) else 0.0


def refine_periodic(system: MagneticSystem, state0: PhaseState, T: float, kappa: float,
                    steps: int = 2048, tol: float = 1e-11, max_iter: int = 20):
    """Gauss-Newton shooting onto a nearby periodic orbit of energy ``kappa``.

    Unknowns are the initial point, velocity and period; the phase is pinned
    by requiring the correction to be orthogonal to the initial velocity.
    Returns the best ``(state, T, residual)`` seen.  Iteration stops early
    when the residual diverges or stalls for three steps.
    """
    x0, v0 = state0.x.copy(), state0.v.copy()
    ref_v = v0.copy()
    winding = None
    best = (PhaseState(x0, v0), float(T), np.inf)
    stalled = 0
    for _ in range(max_iter):
        try:
            with np.errstate(over="raise", invalid="raise"):
                traj = integrate_orbit(system, PhaseState(x0, v0), T, steps, variational=True)
        except (FloatingPointError, DomainError):
            break
        dx = traj.x[-1] - traj.x[0]
        if winding is None:
            winding = np.round(dx) if system.is_torus else np.zeros(2)
        F = np.concatenate([dx - winding, traj.v[-1] - v0])
        e_res = float(energy(system, x0, v0)) - kappa
        res = max(np.linalg.norm(F), abs(e_res))
        if not np.isfinite(res) or not np.all(np.isfinite(traj.flow_matrix)):
            break
        if res < best[2]:
            stalled = 0 if res < 0.5 * best[2] else stalled + 1
            best = (PhaseState(x0, v0), float(T), float(res))
        else:
            stalled += 1
        if res < tol or stalled >= 3 or res > 1e3 * best[2]:
            break
        flow_end = np.concatenate([traj.v[-1], point_acceleration(system, traj.x[-1], traj.v[-1])])
        g, dg, _ = metric_checked(system, x0)
        _, dV, _ = system.potential(x0)
        dE_dx = 0.5 * np.einsum("mij,i,j->m", dg, v0, v0) + dV
        dE_dv = g @ v0
        J = np.zeros((6, 5))
        J[:4, :4] = traj.flow_matrix - np.eye(4)
        J[:4, 4] = flow_end
        J[4, :2] = ref_v
        J[5, :2] = dE_dx
        J[5, 2:4] = dE_dv
        rhs = -np.concatenate([F, [0.0, e_res]])
        try:
            delta, *_ = np.linalg.lstsq(J, rhs, rcond=1e-10)
        except np.linalg.LinAlgError:
            break
        if T + delta[4] <= 0.5 * T:
            delta *= 0.5 * T / abs(delta[4])  # keep the period positive
        x0 = x0 + delta[:2]
        v0 = v0 + delta[2:4]
        T = T + delta[4]
    return best
