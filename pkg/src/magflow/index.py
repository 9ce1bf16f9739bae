"""
Morse indices, nullities and Bott functions of critical loops.

All indices are eigenvalue counts of the dense discrete second variation of
the action.  The fixed-period form lives on node coordinates, the free-period
form adds the period as one more unknown, and the Bott function ``Lambda``
restricts the fixed-period form to twisted variations ``u_{j+N} = w u_j``.
Because the discrete iterate is a block-circulant copy of the base loop, the
Hessian of the ``n``-th iterate splits exactly into the twisted Hessians at the
``n``-th roots of unity.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import loops as lp
from .errors import DomainError, NotPeriodicError, PreconditionError
from .geometry import MagneticSystem

log = logging.getLogger(__name__)

CRIT_TOL = 1e-6
LAMBDA_REL_TOL = 1e-8
RANK_TOL = 1e-7
ANGLE_TOL = 1e-6
MODULUS_TOL = 1e-6
AMBIGUITY_BAND = 1e-3
BOTT_GRID = 64


@dataclass(frozen=True)
class SpectrumSummary:
    """Eigenvalue count of a symmetric matrix with its threshold."""

    negative: int
    near_zero: int
    lowest: tuple
    scale: float
    threshold: float


def count_spectrum(H: np.ndarray, rel_tol: float = LAMBDA_REL_TOL, rank_tol: float = RANK_TOL,
                   n_lowest: int = 6) -> SpectrumSummary:
    """Negative and near-zero eigenvalue counts of a Hermitian matrix.

    Eigenvalues below ``-rel_tol * scale`` count as negative, where ``scale`` is
    the largest eigenvalue magnitude.  ``|lambda| <= rank_tol * scale`` counts
    as kernel.
    """
    ev = np.linalg.eigvalsh(H)
    scale = float(np.max(np.abs(ev))) if ev.size else 0.0
    thr = rel_tol * scale
    return SpectrumSummary(
        negative=int(np.sum(ev < -thr)),
        near_zero=int(np.sum(np.abs(ev) <= rank_tol * scale)),
        lowest=tuple(float(e) for e in ev[:n_lowest]),
        scale=scale,
        threshold=thr,
    )


def _require_critical(system, kappa, loop, crit_tol):
    g = lp.gradient(system, kappa, loop).norm
    if not g < crit_tol:
        raise PreconditionError(f"loop is not critical: gradient norm {g:.3e} >= {crit_tol:.1e}")
    return g


def fixed_period_index(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop,
                       crit_tol: float = CRIT_TOL):
    """``(ind_T, summary)`` from the 2N x 2N fixed-period Hessian."""
    _require_critical(system, kappa, loop, crit_tol)
    s = count_spectrum(lp.hessian(system, kappa, loop, free_period=False))
    return s.negative, s


def free_period_index(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop,
                      crit_tol: float = CRIT_TOL):
    """``(ind, summary)`` from the (2N+1)-dimensional free-period Hessian."""
    _require_critical(system, kappa, loop, crit_tol)
    free = count_spectrum(lp.hessian(system, kappa, loop, free_period=True))
    fixed = count_spectrum(lp.hessian(system, kappa, loop, free_period=False))
    gap = free.negative - fixed.negative
    if gap not in (0, 1):
        raise PreconditionError(
            f"free and fixed period indices differ by {gap}; the loop is not resolved")
    return free.negative, free


def nullity(monodromy, rank_tol: float = RANK_TOL) -> int:
    """``dim ker(I - P)`` for the Poincare block of ``monodromy``."""
    P = monodromy.poincare if hasattr(monodromy, "poincare") else np.asarray(monodromy)
    sv = np.linalg.svd(np.eye(len(P)) - P, compute_uv=False)
    return int(np.sum(sv < rank_tol))


def bott_function(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop, angle: float,
                  crit_tol: float | None = CRIT_TOL) -> int:
    """``Lambda(exp(i angle))``: index on twisted periodic variations."""
    if crit_tol is not None:
        _require_critical(system, kappa, loop, crit_tol)
    w = np.exp(1j * angle)
    if abs(angle) % (2.0 * np.pi) == 0.0:
        H = lp.hessian(system, kappa, loop, free_period=False)
    else:
        H = lp.hessian(system, kappa, loop, free_period=False, twist=w)
    return count_spectrum(H).negative


def bott_sweep(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop, grid: int = BOTT_GRID,
               jobs: int = 1, crit_tol: float | None = CRIT_TOL) -> dict:
    """Bott function on the uniform grid ``2 pi k / grid``, keyed by angle."""
    if crit_tol is not None:
        _require_critical(system, kappa, loop, crit_tol)
    angles = 2.0 * np.pi * np.arange(grid) / grid

    def one(a):
        return bott_function(system, kappa, loop, float(a), crit_tol=None)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(one, angles))
    else:
        values = [one(a) for a in angles]
    return {float(a): int(v) for a, v in zip(angles, values)}


def mean_index(bott_samples) -> float:
    """Average of the Bott function over a uniform circle grid."""
    vals = np.asarray(list(bott_samples.values()) if isinstance(bott_samples, dict)
                      else bott_samples, float)
    if len(vals) == 0:
        raise ValueError("no Bott samples")
    # trapezoidal rule on a periodic uniform grid is the plain mean
    return float(np.mean(vals))


def bott_jumps(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop, bott_samples: dict,
               tol: float = 1e-10) -> list:
    """Locate the discontinuities between neighbouring grid samples by bisection.

    Returns ``(angle, left_value, right_value)`` triples on ``[0, pi]``; the
    Bott function is even under ``angle -> 2 pi - angle``.
    """
    angles = sorted(a for a in bott_samples if a <= np.pi + 1e-12)
    out = []
    for a, b in zip(angles[:-1], angles[1:]):
        va, vb = bott_samples[a], bott_samples[b]
        if va == vb:
            continue
        lo, hi = a, b
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            vm = bott_function(system, kappa, loop, mid, crit_tol=None)
            if vm == va:
                lo = mid
            else:
                hi = mid
        out.append((0.5 * (lo + hi), va, vb))
    return out


def refined_mean_index(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop,
                       bott_samples: dict) -> float:
    """Mean index with grid jumps resolved to bisection accuracy.

    Assumes at most one jump between neighbouring grid points.
    """
    lam0 = bott_samples[min(bott_samples)]
    pieces, prev, val = 0.0, 0.0, lam0
    for angle, _, right in bott_jumps(system, kappa, loop, bott_samples):
        pieces += val * (angle - prev)
        prev, val = angle, right
    pieces += val * (np.pi - prev)
    return float(pieces / np.pi)


# roots of unity -----------------------------------------------------------

@dataclass(frozen=True)
class SnappedEigenvalue:
    value: complex
    root: Fraction | None  # angle / (2 pi) as p/q when snapped
    ambiguous: bool


def snap_eigenvalue(lam: complex, n_max: int, angle_tol: float = ANGLE_TOL,
                    modulus_tol: float = MODULUS_TOL, band: float = AMBIGUITY_BAND) -> SnappedEigenvalue:
    """Identify ``lam`` with a root of unity of order at most ``n_max``, if it is one."""
    lam = complex(lam)
    frac = (np.angle(lam) / (2.0 * np.pi)) % 1.0
    best, best_err = None, np.inf
    for q in range(1, n_max + 1):
        p = round(frac * q)
        err = abs(frac - p / q) * 2.0 * np.pi
        if err < best_err - 1e-15:
            best, best_err = Fraction(p % q, q), err
    mod_err = abs(abs(lam) - 1.0)
    if best_err <= angle_tol and mod_err <= modulus_tol:
        return SnappedEigenvalue(lam, best, False)
    ambiguous = best_err <= band and mod_err <= band
    return SnappedEigenvalue(lam, None, ambiguous)


def _geometric_multiplicity(P: np.ndarray, lam: complex, rank_tol: float) -> int:
    sv = np.linalg.svd(P - lam * np.eye(len(P)), compute_uv=False)
    scale = max(1.0, float(np.linalg.norm(P, 2)))
    return int(np.sum(sv < rank_tol * scale))


@dataclass
class NullityClass:
    members: list
    n_min: int
    nu: int
    roots: tuple  # the fractions p/q with q | n, shared by all members


@dataclass
class NullityPartition:
    classes: list
    eigenvalues: list
    ambiguous: bool = False

    def nu(self, n: int) -> int:
        for c in self.classes:
            if n in c.members:
                return c.nu
        raise KeyError(n)


def iterated_nullity_partition(P, n_max: int, angle_tol: float = ANGLE_TOL,
                               rank_tol: float = RANK_TOL) -> NullityPartition:
    """Group ``1..n_max`` by the set of ``n``-th roots of unity in the spectrum of ``P``.

    Each class records its smallest member and the common nullity
    ``nu = dim ker(P^n - I)``, the summed geometric multiplicity of those roots.
    """
    P = np.asarray(P, float)
    eig = np.linalg.eigvals(P)
    snapped = [snap_eigenvalue(lam, n_max, angle_tol) for lam in eig]
    roots = sorted({s.root for s in snapped if s.root is not None})
    mult = {}
    for r in roots:
        lam = np.exp(2j * np.pi * float(r))
        mult[r] = min(_geometric_multiplicity(P, lam, rank_tol),
                      sum(1 for s in snapped if s.root == r))
    groups: dict = {}
    for n in range(1, n_max + 1):
        key = tuple(r for r in roots if n % r.denominator == 0)
        groups.setdefault(key, []).append(n)
    classes = [NullityClass(members=ns, n_min=min(ns), nu=sum(mult[r] for r in key), roots=key)
               for key, ns in groups.items()]
    classes.sort(key=lambda c: c.n_min)
    return NullityPartition(classes, [s.value for s in snapped], any(s.ambiguous for s in snapped))


def kernel_dimension_of_power(P, n: int, rank_tol: float = RANK_TOL) -> int:
    """Brute-force ``dim ker(P^n - I)`` by numerical rank."""
    P = np.asarray(P, float)
    Pn = np.linalg.matrix_power(P, n)
    sv = np.linalg.svd(Pn - np.eye(len(P)), compute_uv=False)
    scale = max(1.0, float(np.linalg.norm(Pn, 2)))
    return int(np.sum(sv < rank_tol * scale))


# full report ---------------------------------------------------------------

@dataclass
class IndexReport:
    ind_free: int
    ind_fixed: int
    nullity: int | None
    bott_samples: dict = field(default_factory=dict)
    mean_index: float = 0.0
    hessian_nullity: int = 0
    lowest_free: tuple = ()
    gradient_norm: float = 0.0
    poincare_spectrum: tuple = ()
    monodromy_residual: float | None = None

    @property
    def degenerate(self) -> bool:
        return bool(self.nullity) or self.hessian_nullity > 1

    def to_dict(self) -> dict:
        return {
            "ind_free": self.ind_free,
            "ind_fixed": self.ind_fixed,
            "nullity": self.nullity,
            "hessian_nullity": self.hessian_nullity,
            "mean_index": self.mean_index,
            "bott_samples": {f"{a:.12f}": v for a, v in self.bott_samples.items()},
            "lowest_free": list(self.lowest_free),
            "gradient_norm": self.gradient_norm,
            "poincare_spectrum": [[float(np.real(z)), float(np.imag(z))]
                                  for z in self.poincare_spectrum],
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndexReport":
        return cls(
            ind_free=int(d["ind_free"]),
            ind_fixed=int(d["ind_fixed"]),
            nullity=None if d.get("nullity") is None else int(d["nullity"]),
            bott_samples={float(k): int(v) for k, v in d.get("bott_samples", {}).items()},
            mean_index=float(d.get("mean_index", 0.0)),
            hessian_nullity=int(d.get("hessian_nullity", 0)),
            lowest_free=tuple(d.get("lowest_free", ())),
            gradient_norm=float(d.get("gradient_norm", 0.0)),
            poincare_spectrum=tuple(complex(a, b) for a, b in d.get("poincare_spectrum", ())),
        )


def poincare_of_loop(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop,
                     steps: int = 4096):
    """Shoot from the loop's implied phase state onto the true orbit and linearize."""
    from .dynamics import monodromy, refine_periodic

    state, T, res = refine_periodic(system, loop.initial_state(), loop.period, kappa,
                                    steps=steps)
    return monodromy(system, state, T, steps=steps), res


def index_report(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop,
                 grid: int = BOTT_GRID, jobs: int = 1, with_monodromy: bool = True,
                 crit_tol: float = CRIT_TOL, steps: int = 4096) -> IndexReport:
    """Every index quantity of a critical loop in one record."""
    gnorm = _require_critical(system, kappa, loop, crit_tol)
    ind_free, free = free_period_index(system, kappa, loop, crit_tol)
    ind_fixed, _ = fixed_period_index(system, kappa, loop, crit_tol)
    samples = bott_sweep(system, kappa, loop, grid, jobs, crit_tol=None) if grid else {}
    null, spec, resid = None, (), None
    if with_monodromy:
        try:
            mono, resid = poincare_of_loop(system, kappa, loop, steps)
        except (NotPeriodicError, DomainError) as exc:
            # shooting over a long, strongly hyperbolic period can fail; the
            # Hessian indices above do not depend on it
            log.warning("no monodromy for loop with T = %.6g: %s", loop.period, exc)
        else:
            null = nullity(mono)
            spec = tuple(mono.spectrum_P)
    return IndexReport(
        ind_free=ind_free,
        ind_fixed=ind_fixed,
        nullity=null,
        bott_samples=samples,
        mean_index=mean_index(samples) if samples else 0.0,
        hessian_nullity=free.near_zero,
        lowest_free=free.lowest,
        gradient_norm=gnorm,
        poincare_spectrum=spec,
        monodromy_residual=resid,
    )
