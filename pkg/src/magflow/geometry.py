"""
Surfaces given by a single global chart, carrying a metric, a magnetic
1-form and an optional potential.

All field callables are vectorized: they take points of shape ``(..., 2)``
and return the value together with its first and second partial
derivatives, with the derivative indices leading::

    metric(x)    -> g[..., i, j],  dg[..., k, i, j],  d2g[..., k, l, i, j]
    theta(x)     -> th[..., i],    dth[..., k, i],    d2th[..., k, l, i]
    potential(x) -> V[...],        dV[..., k],        d2V[..., k, l]

where ``dg[..., k, i, j]`` is the partial derivative of ``g_ij`` along
``x^k``.  On the torus every callable is 1-periodic in both coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GeometryError

TORUS = "torus"
PLANE = "plane"

# rotation by +pi/2: R u = (-u2, u1)
ROT = np.array([[0.0, -1.0], [1.0, 0.0]])

FieldFn = Callable[[np.ndarray], tuple]


def _batch(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise GeometryError(f"chart points must have 2 coordinates, got shape {x.shape}")
    return x


def flat_metric(x):
    x = _batch(x)
    shape = x.shape[:-1]
    g = np.broadcast_to(np.eye(2), shape + (2, 2)).copy()
    return g, np.zeros(shape + (2, 2, 2)), np.zeros(shape + (2, 2, 2, 2))


def conformal_metric(u: Callable, du: Callable, d2u: Callable) -> FieldFn:
    """Metric ``exp(2u) I`` from a conformal exponent and its derivatives."""

    def metric(x):
        x = _batch(x)
        uu = np.asarray(u(x), dtype=float)
        duu = np.asarray(du(x), dtype=float)
        d2uu = np.asarray(d2u(x), dtype=float)
        f = np.exp(2.0 * uu)
        eye = np.eye(2)
        g = f[..., None, None] * eye
        dg = (2.0 * f[..., None] * duu)[..., :, None, None] * eye
        d2 = 2.0 * d2uu + 4.0 * duu[..., :, None] * duu[..., None, :]
        d2g = (f[..., None, None] * d2)[..., :, :, None, None] * eye
        return g, dg, d2g

    return metric


def zero_theta(x):
    x = _batch(x)
    shape = x.shape[:-1]
    return np.zeros(shape + (2,)), np.zeros(shape + (2, 2)), np.zeros(shape + (2, 2, 2))


def zero_potential(x):
    x = _batch(x)
    shape = x.shape[:-1]
    return np.zeros(shape), np.zeros(shape + (2,)), np.zeros(shape + (2, 2))


def constant_field_theta(b0: float) -> FieldFn:
    """theta = (0, b0 x1), so that d(theta) = b0 dx1 ^ dx2 (plane chart only)."""

    def theta(x):
        x = _batch(x)
        shape = x.shape[:-1]
        th = np.zeros(shape + (2,))
        th[..., 1] = b0 * x[..., 0]
        dth = np.zeros(shape + (2, 2))
        dth[..., 0, 1] = b0
        return th, dth, np.zeros(shape + (2, 2, 2))

    return theta


def sin_field_theta(amplitude: float) -> FieldFn:
    """theta = (0, -a cos(2 pi x1) / (2 pi)); its field is b(x) = a sin(2 pi x1)."""
    tau = 2.0 * np.pi

    def theta(x):
        x = _batch(x)
        shape = x.shape[:-1]
        c = np.cos(tau * x[..., 0])
        s = np.sin(tau * x[..., 0])
        th = np.zeros(shape + (2,))
        th[..., 1] = -amplitude * c / tau
        dth = np.zeros(shape + (2, 2))
        dth[..., 0, 1] = amplitude * s
        d2th = np.zeros(shape + (2, 2, 2))
        d2th[..., 0, 0, 1] = amplitude * tau * c
        return th, dth, d2th

    return theta


def gradient_theta(f: Callable, df: Callable, d2f: Callable, d3f: Callable) -> FieldFn:
    """Exact-differential form theta = df (closed, zero field)."""

    def theta(x):
        x = _batch(x)
        return np.asarray(df(x), float), np.asarray(d2f(x), float), np.asarray(d3f(x), float)

    return theta


def cos_potential(amplitude: float) -> FieldFn:
    """V = a (1 - cos(2 pi x2)) / 2, nonnegative and 1-periodic."""
    tau = 2.0 * np.pi

    def potential(x):
        x = _batch(x)
        shape = x.shape[:-1]
        c = np.cos(tau * x[..., 1])
        s = np.sin(tau * x[..., 1])
        V = 0.5 * amplitude * (1.0 - c)
        dV = np.zeros(shape + (2,))
        dV[..., 1] = 0.5 * amplitude * tau * s
        d2V = np.zeros(shape + (2, 2))
        d2V[..., 1, 1] = 0.5 * amplitude * tau * tau * c
        return V, dV, d2V

    return potential


@dataclass(frozen=True)
class MagneticSystem:
    """Metric, magnetic 1-form and potential on a chart.

    ``topology`` is ``"torus"`` (the periodic unit square) or ``"plane"``
    (unbounded chart, only meant for closed-form test cases).
    ``plane_box`` bounds the plane chart; integration that leaves it fails.
    """

    metric: FieldFn = flat_metric
    theta: FieldFn = zero_theta
    potential: FieldFn = zero_potential
    topology: str = TORUS
    name: str = "custom"
    params: dict = field(default_factory=dict)
    plane_box: float = 1e3

    def __post_init__(self):
        if self.topology not in (TORUS, PLANE):
            raise GeometryError(f"unknown chart topology {self.topology!r}")

    def __reduce__(self):
        # built-in systems hold closures; rebuild them from their name instead
        if self.name in BUILTIN_KINDS:
            return (_rebuild_builtin, (self.name, dict(self.params), self.plane_box))
        return super().__reduce__()

    @property
    def is_torus(self) -> bool:
        return self.topology == TORUS

    @property
    def has_potential(self) -> bool:
        return self.potential is not zero_potential


def metric_checked(system: MagneticSystem, x):
    g, dg, d2g = system.metric(x)
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    if np.any(g[..., 0, 0] <= 0.0) or np.any(det <= 0.0):
        raise GeometryError("metric is not positive definite")
    return g, dg, d2g


def inverse2(g):
    """Inverse of a batch of 2x2 matrices."""
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    inv = np.empty_like(g)
    inv[..., 0, 0] = g[..., 1, 1]
    inv[..., 1, 1] = g[..., 0, 0]
    inv[..., 0, 1] = -g[..., 0, 1]
    inv[..., 1, 0] = -g[..., 1, 0]
    return inv / det[..., None, None]


def _first_kind(dg):
    # C[l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
    return (
        np.einsum("...ijl->...lij", dg)
        + np.einsum("...jil->...lij", dg)
        - dg
    )


def christoffel(system: MagneticSystem, x) -> np.ndarray:
    """Christoffel symbols ``G[..., k, i, j]`` of the second kind."""
    g, dg, _ = metric_checked(system, x)
    ginv = inverse2(g)
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, _first_kind(dg))


def christoffel_derivative(system: MagneticSystem, x) -> np.ndarray:
    """Partial derivatives ``dG[..., m, k, i, j]`` of the Christoffel symbols."""
    g, dg, d2g = metric_checked(system, x)
    ginv = inverse2(g)
    dginv = -np.einsum("...ka,...mab,...bl->...mkl", ginv, dg, ginv)
    C = _first_kind(dg)
    # d_m C[l,i,j] = d_m d_i g_jl + d_m d_j g_il - d_m d_l g_ij
    dC = (
        np.einsum("...mijl->...mlij", d2g)
        + np.einsum("...mjil->...mlij", d2g)
        - d2g
    )
    return 0.5 * (
        np.einsum("...mkl,...lij->...mkij", dginv, C)
        + np.einsum("...kl,...mlij->...mkij", ginv, dC)
    )


def field_strength(system: MagneticSystem, x):
    """``b = d1 theta_2 - d2 theta_1`` and its gradient."""
    _, dth, d2th = system.theta(x)
    b = dth[..., 0, 1] - dth[..., 1, 0]
    db = d2th[..., :, 0, 1] - d2th[..., :, 1, 0]
    return b, db


@dataclass(frozen=True)
class LorentzOperator:
    """Endomorphism field Y with d(theta) = g(Y., .)."""

    system: MagneticSystem

    def value(self, x) -> np.ndarray:
        g, _, _ = metric_checked(self.system, x)
        b, _ = field_strength(self.system, x)
        return b[..., None, None] * (inverse2(g) @ ROT)

    __call__ = value

    def derivative(self, x) -> np.ndarray:
        """``dY[..., m, k, j]``: partial of ``Y^k_j`` along ``x^m``."""
        g, dg, _ = metric_checked(self.system, x)
        b, db = field_strength(self.system, x)
        ginv = inverse2(g)
        dginv = -np.einsum("...ka,...mab,...bl->...mkl", ginv, dg, ginv)
        return (
            db[..., :, None, None] * (ginv @ ROT)[..., None, :, :]
            + b[..., None, None, None] * (dginv @ ROT)
        )


def lorentz(system: MagneticSystem) -> LorentzOperator:
    return LorentzOperator(system)


def wrap(x):
    """Reduce torus chart coordinates to [0, 1)."""
    return np.mod(x, 1.0)


def chart_displacement(system: MagneticSystem, a, b):
    """Shortest chart displacement from ``a`` to ``b`` (wraps on the torus)."""
    d = np.asarray(b, float) - np.asarray(a, float)
    if system.is_torus:
        d = d - np.round(d)
    return d


def _torus_bump(eps):
    tau = 2.0 * np.pi

    def u(x):
        return eps * np.sin(tau * x[..., 0]) * np.sin(tau * x[..., 1])

    def du(x):
        s0, c0 = np.sin(tau * x[..., 0]), np.cos(tau * x[..., 0])
        s1, c1 = np.sin(tau * x[..., 1]), np.cos(tau * x[..., 1])
        return eps * tau * np.stack([c0 * s1, s0 * c1], axis=-1)

    def d2u(x):
        s0, c0 = np.sin(tau * x[..., 0]), np.cos(tau * x[..., 0])
        s1, c1 = np.sin(tau * x[..., 1]), np.cos(tau * x[..., 1])
        k = eps * tau * tau
        row0 = np.stack([-s0 * s1, c0 * c1], axis=-1)
        row1 = np.stack([c0 * c1, -s0 * s1], axis=-1)
        return k * np.stack([row0, row1], axis=-2)

    return u, du, d2u


BUILTIN_KINDS = {
    "flat_torus": {},
    "flat_torus_sin_field": {"amplitude": 1.0, "potential_amplitude": 0.0},
    "conformal_torus_sin_field": {"amplitude": 1.0, "conformal_amplitude": 0.05},
    "plane_constant_field": {"b0": 1.0},
    "plane_flat": {},
}


def builtin_system(kind: str, **params) -> MagneticSystem:
    """Build one of the bundled example systems by name."""
    if kind not in BUILTIN_KINDS:
        raise GeometryError(f"unknown system kind {kind!r}; known: {sorted(BUILTIN_KINDS)}")
    unknown = set(params) - set(BUILTIN_KINDS[kind])
    if unknown:
        raise GeometryError(f"unknown parameters for {kind!r}: {sorted(unknown)}")
    p = {**BUILTIN_KINDS[kind], **{k: float(v) for k, v in params.items()}}
    if kind == "flat_torus":
        return MagneticSystem(topology=TORUS, name=kind, params=p)
    if kind == "flat_torus_sin_field":
        pot = cos_potential(p["potential_amplitude"]) if p["potential_amplitude"] else zero_potential
        return MagneticSystem(theta=sin_field_theta(p["amplitude"]), potential=pot,
                              topology=TORUS, name=kind, params=p)
    if kind == "conformal_torus_sin_field":
        metric = conformal_metric(*_torus_bump(p["conformal_amplitude"]))
        return MagneticSystem(metric=metric, theta=sin_field_theta(p["amplitude"]),
                              topology=TORUS, name=kind, params=p)
    if kind == "plane_constant_field":
        return MagneticSystem(theta=constant_field_theta(p["b0"]), topology=PLANE,
                              name=kind, params=p)
    return MagneticSystem(topology=PLANE, name=kind, params=p)


def _rebuild_builtin(kind: str, params: dict, plane_box: float) -> MagneticSystem:
    sysm = builtin_system(kind, **params)
    object.__setattr__(sysm, "plane_box", plane_box)
    return sysm
