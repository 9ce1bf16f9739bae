"""
Discrete free-period loops and the action functional on them.

A loop ``(x, T)`` is sampled at ``s_j = j / N``.  On the torus the nodes are a
continuous lift and ``x(1) = x(0) + winding``.  The action is discretized
edge by edge with the midpoint rule::

    S = sum_j [ N/(2T) d_j^T g(m_j) d_j - theta(m_j) . d_j - (T/N) V(m_j) ] + kappa T

with ``d_j = x_{j+1} - x_j`` and ``m_j = (x_j + x_{j+1}) / 2``, i.e. the
Lagrangian ``L(x, v) = |v|^2/2 - theta_x(v) - V(x)``.  The magnetic sign is
the one whose Euler-Lagrange equation is ``nabla_t x' = Y(x')`` for the
Lorentz operator defined by ``d theta = g(Y., .)``.

Tangent vectors ``(u, R)`` are measured with::

    <(u,R),(v,S)> = R S / T + (T/N) sum u_j . v_j + (N/T) sum (u_{j+1}-u_j).(v_{j+1}-v_j)

which makes iteration exactly conformal with factor n.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal

from .errors import AlignmentError, DomainError
from .geometry import MagneticSystem

T_FLOOR = 1e-3
MIN_NODES = 16


@dataclass(frozen=True)
class DiscreteLoop:
    nodes: np.ndarray
    period: float
    winding: tuple = (0, 0)
    t_floor: float = field(default=T_FLOOR, compare=False)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise DomainError(f"nodes must have shape (N, 2), got {nodes.shape}")
        if len(nodes) < MIN_NODES:
            raise DomainError(f"need at least {MIN_NODES} nodes, got {len(nodes)}")
        if not self.period > 0:
            raise DomainError("loop period must be positive")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "period", float(self.period))
        object.__setattr__(self, "winding", tuple(int(w) for w in self.winding))

    @property
    def N(self) -> int:
        return len(self.nodes)

    @property
    def T(self) -> float:
        return self.period

    @property
    def ps_warning(self) -> bool:
        """Period at or below the floor where Palais-Smale compactness is lost."""
        return self.period <= self.t_floor

    def with_(self, nodes=None, period=None) -> "DiscreteLoop":
        return DiscreteLoop(self.nodes if nodes is None else nodes,
                            self.period if period is None else period,
                            self.winding, self.t_floor)

    def closed_nodes(self) -> np.ndarray:
        """Nodes followed by ``x(1) = x(0) + winding``."""
        return np.vstack([self.nodes, self.nodes[:1] + np.asarray(self.winding, float)])

    def initial_state(self):
        """Phase state ``(x(0), x'(0)/T)`` implied by the samples."""
        from .dynamics import PhaseState

        w = np.asarray(self.winding, float)
        prev = self.nodes[-1] - w
        v = (self.nodes[1] - prev) * self.N / (2.0 * self.period)
        return PhaseState(self.nodes[0], v)


@dataclass(frozen=True)
class LoopTangent:
    u: np.ndarray
    R: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        object.__setattr__(self, "R", float(self.R))

    def __add__(self, other):
        return LoopTangent(self.u + other.u, self.R + other.R)

    def __sub__(self, other):
        return LoopTangent(self.u - other.u, self.R - other.R)

    def __mul__(self, c):
        return LoopTangent(c * self.u, c * self.R)

    __rmul__ = __mul__

    def __neg__(self):
        return LoopTangent(-self.u, -self.R)


def displace(loop: DiscreteLoop, tangent: LoopTangent, eps: float = 1.0) -> DiscreteLoop:
    return loop.with_(nodes=loop.nodes + eps * tangent.u, period=loop.period + eps * tangent.R)


def edges(loop: DiscreteLoop):
    """Edge midpoints and increments ``(m, d)``, each of shape (N, 2)."""
    closed = loop.closed_nodes()
    d = np.diff(closed, axis=0)
    m = 0.5 * (closed[:-1] + closed[1:])
    return m, d


def _check(loop: DiscreteLoop):
    if not loop.period > 0:
        raise DomainError("loop period must be positive")


def action(system: MagneticSystem, kappa: float, loop: DiscreteLoop) -> float:
    """Discrete free-period action ``S_kappa(x, T)``."""
    _check(loop)
    N, T = loop.N, loop.period
    m, d = edges(loop)
    g, _, _ = system.metric(m)
    th, _, _ = system.theta(m)
    V, _, _ = system.potential(m)
    kinetic = 0.5 * N / T * np.einsum("ni,nij,nj->", d, g, d)
    magnetic = np.einsum("ni,ni->", th, d)
    return float(kinetic - magnetic - T / N * np.sum(V) + kappa * T)


def action_parts(system: MagneticSystem, kappa: float, loop: DiscreteLoop) -> dict:
    """``S = K/T - F - T W + kappa T``: kinetic, flux and potential coefficients."""
    N = loop.N
    m, d = edges(loop)
    g, _, _ = system.metric(m)
    th, _, _ = system.theta(m)
    V, _, _ = system.potential(m)
    return {
        "K": float(0.5 * N * np.einsum("ni,nij,nj->", d, g, d)),
        "F": float(np.einsum("ni,ni->", th, d)),
        "W": float(np.sum(V) / N),
        "kappa": float(kappa),
    }


def edge_energy(system: MagneticSystem, loop: DiscreteLoop) -> np.ndarray:
    """Energy ``E(m_j, N d_j / T)`` on every edge."""
    m, d = edges(loop)
    g, _, _ = system.metric(m)
    V, _, _ = system.potential(m)
    v = d * loop.N / loop.period
    return 0.5 * np.einsum("ni,nij,nj->n", v, g, v) + V


def differential(system: MagneticSystem, kappa: float, loop: DiscreteLoop):
    """Partial derivatives ``(dS/dx_j, dS/dT)`` of the discrete action."""
    _check(loop)
    N, T = loop.N, loop.period
    m, d = edges(loop)
    g, dg, _ = system.metric(m)
    th, dth, _ = system.theta(m)
    V, dV, _ = system.potential(m)
    gd = np.einsum("nij,nj->ni", g, d)
    phi_d = N / T * gd - th
    phi_m = (0.5 * N / T * np.einsum("ni,nkij,nj->nk", d, dg, d)
             - np.einsum("nki,ni->nk", dth, d) - T / N * dV)
    # node j is the tail of edge j and the head of edge j-1
    r = (0.5 * phi_m - phi_d) + np.roll(0.5 * phi_m + phi_d, 1, axis=0)
    r_T = float(-0.5 * N / T**2 * np.einsum("ni,ni->", d, gd) - np.sum(V) / N + kappa)
    return r, r_T


def _metric_symbol(N: int, T: float) -> np.ndarray:
    k = np.arange(N)
    return T / N + N / T * (2.0 - 2.0 * np.cos(2.0 * np.pi * k / N))


def apply_metric_inverse(r: np.ndarray, N: int, T: float) -> np.ndarray:
    """Solve ``((T/N) I + (N/T) L) w = r`` per component (L: periodic second difference)."""
    return np.real(np.fft.ifft(np.fft.fft(r, axis=0) / _metric_symbol(N, T)[:, None], axis=0))


def apply_metric(u: np.ndarray, N: int, T: float) -> np.ndarray:
    return np.real(np.fft.ifft(np.fft.fft(u, axis=0) * _metric_symbol(N, T)[:, None], axis=0))


def inner(loop: DiscreteLoop, a: LoopTangent, b: LoopTangent) -> float:
    """Metric pairing of two tangent vectors at ``loop``."""
    N, T = loop.N, loop.period
    da = np.roll(a.u, -1, axis=0) - a.u
    db = np.roll(b.u, -1, axis=0) - b.u
    return float(a.R * b.R / T + T / N * np.sum(a.u * b.u) + N / T * np.sum(da * db))


def norm(loop: DiscreteLoop, a: LoopTangent) -> float:
    return float(np.sqrt(max(inner(loop, a, a), 0.0)))


@dataclass
class GradientResult:
    tangent: LoopTangent
    norm: float
    ps_warning: bool


def gradient(system: MagneticSystem, kappa: float, loop: DiscreteLoop) -> GradientResult:
    """Gradient of the action for the loop-space metric."""
    r, r_T = differential(system, kappa, loop)
    w = apply_metric_inverse(r, loop.N, loop.period)
    R = loop.period * r_T
    nrm = np.sqrt(max(float(np.sum(r * w)) + loop.period * r_T * r_T, 0.0))
    return GradientResult(LoopTangent(w, R), float(nrm), loop.ps_warning)


def pairing(system: MagneticSystem, kappa: float, loop: DiscreteLoop, tangent: LoopTangent) -> float:
    """``dS(loop)[tangent]``."""
    r, r_T = differential(system, kappa, loop)
    return float(np.sum(r * tangent.u) + r_T * tangent.R)


def iterate(loop: DiscreteLoop, n: int) -> DiscreteLoop:
    """``(x, T) -> (x(n .), n T)``: n traversals of the lift."""
    if n < 1:
        raise DomainError("iteration order must be a positive integer")
    if n == 1:
        return loop
    w = np.asarray(loop.winding, float)
    nodes = np.concatenate([loop.nodes + k * w for k in range(n)])
    return DiscreteLoop(nodes, n * loop.period, tuple(n * np.asarray(loop.winding)), loop.t_floor)


def iterate_tangent(tangent: LoopTangent, n: int) -> LoopTangent:
    return LoopTangent(np.tile(tangent.u, (n, 1)), n * tangent.R)


def shift(loop: DiscreteLoop, k: int) -> DiscreteLoop:
    """Cyclic rotation by ``k`` nodes, keeping the lift continuous."""
    N = loop.N
    k %= N
    if k == 0:
        return loop
    w = np.asarray(loop.winding, float)
    nodes = np.concatenate([loop.nodes[k:], loop.nodes[:k] + w])
    return loop.with_(nodes=nodes)


def translate(loop: DiscreteLoop, tau: float) -> DiscreteLoop:
    """Time translation ``x -> x(. + tau)`` by a node-aligned fraction of the period."""
    if not 0.0 <= tau < 1.0:
        raise AlignmentError("tau must lie in [0, 1)")
    k = tau * loop.N
    if abs(k - round(k)) > 1e-9:
        raise AlignmentError(f"tau * N = {k} is not an integer; resample first")
    return shift(loop, int(round(k)))


def resample(loop: DiscreteLoop, N: int) -> DiscreteLoop:
    """Trigonometric interpolation of the periodic part onto ``N`` nodes."""
    if N == loop.N:
        return loop
    w = np.asarray(loop.winding, float)
    periodic = loop.nodes - (np.arange(loop.N) / loop.N)[:, None] * w
    out = signal.resample(periodic, N, axis=0)
    return DiscreteLoop(out + (np.arange(N) / N)[:, None] * w, loop.period, loop.winding,
                        loop.t_floor)


def _h1_sq(delta: np.ndarray) -> float:
    N = len(delta)
    dd = np.roll(delta, -1, axis=0) - delta
    return float(np.sum(delta * delta) / N + N * np.sum(dd * dd))


def loop_distance(a: DiscreteLoop, b: DiscreteLoop, lattice: bool = True) -> float:
    """H^1 x R distance between two loops with the same node count and winding."""
    if a.winding != b.winding:
        return float("inf")
    delta = a.nodes - b.nodes
    if lattice:
        delta = delta - np.round(delta.mean(axis=0))
    return float(np.sqrt(_h1_sq(delta) + (a.period - b.period) ** 2))


def fractional_shift(loop: DiscreteLoop, k: float) -> DiscreteLoop:
    """Time translation by ``k`` node spacings (any real ``k``), by trigonometric interpolation."""
    N = loop.N
    w = np.asarray(loop.winding, float)
    s = np.arange(N) / N
    periodic = loop.nodes - s[:, None] * w
    freq = np.fft.fftfreq(N, d=1.0 / N)
    phase = np.exp(2j * np.pi * freq * k / N)
    if N % 2 == 0:
        phase[N // 2] = np.cos(np.pi * k)  # keep the Nyquist mode real
    moved = np.real(np.fft.ifft(np.fft.fft(periodic, axis=0) * phase[:, None], axis=0))
    return loop.with_(nodes=moved + (s[:, None] + k / N) * w)


def circle_distance(a: DiscreteLoop, b: DiscreteLoop, lattice: bool = True) -> float:
    """Distance between the time-translation orbits of two loops.

    The best node-aligned shift is refined over continuous shifts within one
    node spacing.
    """
    if a.winding != b.winding:
        return float("inf")
    N = max(a.N, b.N)
    a, b = resample(a, N), resample(b, N)
    dist = [loop_distance(shift(a, k), b, lattice) for k in range(N)]
    k0 = int(np.argmin(dist))
    res = optimize.minimize_scalar(lambda f: loop_distance(fractional_shift(a, k0 + f), b, lattice),
                                   bounds=(-1.0, 1.0), method="bounded",
                                   options={"xatol": 1e-10})
    return float(min(dist[k0], res.fun))


def orthogonal_complement_residual(loop: DiscreteLoop, n: int, tangent: LoopTangent) -> float:
    """Zero iff ``tangent`` (at the n-th iterate) is orthogonal to the iterated loops."""
    u = np.asarray(tangent.u, float)
    if len(u) != n * loop.N:
        raise DomainError("tangent must live on the n-th iterate")
    sums = u.reshape(n, loop.N, -1).sum(axis=0)
    return float(np.max(np.linalg.norm(sums, axis=1)) + abs(tangent.R))


def hessian_blocks(system: MagneticSystem, kappa: float, loop: DiscreteLoop):
    """Per-edge second derivatives of the discrete action.

    Returns ``(Haa, Hac, Hcc, hTa, hTc, hTT)`` where edge ``j`` couples tail
    node ``j`` (a) to head node ``j+1`` (c).
    """
    N, T = loop.N, loop.period
    m, d = edges(loop)
    g, dg, d2g = system.metric(m)
    th, dth, d2th = system.theta(m)
    V, dV, d2V = system.potential(m)
    gd = np.einsum("nij,nj->ni", g, d)
    Pdd = N / T * g
    # B[i, k]: d/dd_i d/dm_k
    B = N / T * np.einsum("nkij,nj->nik", dg, d) - np.einsum("nki->nik", dth)
    Pmm = (0.5 * N / T * np.einsum("ni,nklij,nj->nkl", d, d2g, d)
           - np.einsum("nkli,ni->nkl", d2th, d) - T / N * d2V)
    Bt = np.swapaxes(B, 1, 2)
    Haa = 0.25 * Pmm - 0.5 * (B + Bt) + Pdd
    Hcc = 0.25 * Pmm + 0.5 * (B + Bt) + Pdd
    Hac = 0.25 * Pmm + 0.5 * Bt - 0.5 * B - Pdd
    pTd = -N / T**2 * gd
    pTm = -0.5 * N / T**2 * np.einsum("ni,nkij,nj->nk", d, dg, d) - dV / N
    hTa = 0.5 * pTm - pTd
    hTc = 0.5 * pTm + pTd
    hTT = float(N / T**3 * np.einsum("ni,ni->", d, gd))
    return Haa, Hac, Hcc, hTa, hTc, hTT


def hessian(system: MagneticSystem, kappa: float, loop: DiscreteLoop,
            free_period: bool = True, twist: complex = 1.0) -> np.ndarray:
    """Dense Hessian of the discrete action in node coordinates (then T).

    With ``twist = exp(i a)`` the fixed-period form is restricted to
    variations with ``u_{j+N} = twist * u_j`` and a Hermitian matrix is
    returned; ``free_period`` is then ignored.
    """
    N = loop.N
    Haa, Hac, Hcc, hTa, hTc, hTT = hessian_blocks(system, kappa, loop)
    complex_mode = twist != 1.0
    dim = 2 * N + (1 if free_period and not complex_mode else 0)
    H = np.zeros((dim, dim), dtype=complex if complex_mode else float)
    idx = np.arange(N)
    a = 2 * idx
    c = 2 * ((idx + 1) % N)
    phase = np.ones(N, dtype=complex if complex_mode else float)
    phase[-1] = twist
    for p in range(2):
        for q in range(2):
            np.add.at(H, (a + p, a + q), Haa[:, p, q])
            np.add.at(H, (c + p, c + q), Hcc[:, p, q])
            np.add.at(H, (a + p, c + q), Hac[:, p, q] * phase)
            np.add.at(H, (c + p, a + q), Hac[:, q, p] * np.conj(phase))
    if dim == 2 * N + 1:
        t = 2 * N
        for p in range(2):
            np.add.at(H[t], a + p, hTa[:, p])
            np.add.at(H[t], c + p, hTc[:, p])
        H[:2 * N, t] = H[t, :2 * N]
        H[t, t] = hTT
    return H


def critical_residual(system: MagneticSystem, kappa: float, loop: DiscreteLoop) -> float:
    return gradient(system, kappa, loop).norm


# loop builders -------------------------------------------------------------

def circle_loop(center, radius: float, period: float, N: int, phase: float = 0.0,
                clockwise: bool = False) -> DiscreteLoop:
    s = np.arange(N) / N
    ang = phase + (-1.0 if clockwise else 1.0) * 2.0 * np.pi * s
    nodes = np.asarray(center, float) + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return DiscreteLoop(nodes, period)


def line_loop(start, winding, period: float, N: int) -> DiscreteLoop:
    s = np.arange(N) / N
    w = np.asarray(winding, float)
    return DiscreteLoop(np.asarray(start, float) + s[:, None] * w, period, tuple(winding))


def polygon_loop(vertices, period: float, N: int, winding=(0, 0)) -> DiscreteLoop:
    """Loop through ``vertices`` (lifted; last back to first + winding), arclength-uniform."""
    v = np.asarray(vertices, float)
    closed = np.vstack([v, v[:1] + np.asarray(winding, float)])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(N) / N * cum[-1]
    nodes = np.column_stack([np.interp(s, cum, closed[:, i]) for i in range(2)])
    return DiscreteLoop(nodes, period, tuple(winding))


# serialization ----------------------------------------------------------------

def loop_to_record(loop: DiscreteLoop) -> dict:
    """JSON-ready record ``{N, T, winding, nodes}`` (plus ``t_floor``).

    Floats are stored through ``repr``, which round-trips exactly.
    """
    return {
        "N": loop.N,
        "T": float(loop.period),
        "winding": [int(w) for w in loop.winding],
        "nodes": [[float(a), float(b)] for a, b in loop.nodes],
        "t_floor": float(loop.t_floor),
    }


def loop_from_record(record: dict) -> DiscreteLoop:
    try:
        nodes = np.array(record["nodes"], dtype=float)
        loop = DiscreteLoop(nodes, float(record["T"]), tuple(int(w) for w in record["winding"]),
                            float(record.get("t_floor", T_FLOOR)))
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed loop record: {exc}") from None
    if loop.N != int(record["N"]):
        raise DomainError(f"loop record says N={record['N']} but holds {loop.N} nodes")
    return loop
