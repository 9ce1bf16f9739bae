"""
Searches on loop space: local minimizers, mountain-pass values, energy sweeps,
the critical value of the universal cover, and catalogs of critical circles.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import loops as lp
from .errors import BracketError, DomainError, PreconditionError
from .geometry import MagneticSystem
from .index import CRIT_TOL, IndexReport, index_report

T_CEILING = 1e4
NEG_MARGIN = 1e-4
ARMIJO_C = 1e-4
MAX_STEP = 0.5


@dataclass
class DescentResult:
    loop: lp.DiscreteLoop
    action: float
    gradient_norm: float
    iterations: int
    converged: bool
    ps_failure: str | None = None  # "T_floor" or "T_ceiling"
    trace: list = field(default_factory=list)


def _clip_period(loop: lp.DiscreteLoop, tangent: lp.LoopTangent, step: float) -> float:
    """Largest step <= ``step`` that keeps the period above half its current value."""
    if tangent.R > 0:
        return min(step, 0.5 * loop.period / tangent.R)
    return step


def descend(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop,
            crit_tol: float = CRIT_TOL, max_iter: int = 20000, step0: float = 1.0,
            stop_below: float | None = None, trace_every: int = 0) -> DescentResult:
    """Preconditioned gradient descent with backtracking (Armijo) line search.

    The trial step of each iteration is the Barzilai-Borwein step of the
    loop-space metric, capped to keep the period positive.  Descent stops at
    ``gradient norm < crit_tol``, when the period leaves
    ``[t_floor, T_CEILING]``, when the action drops below ``stop_below``, or at
    the iteration cap.
    """
    if not kappa > 0:
        raise DomainError("energy must be positive")
    S = lp.action(system, kappa, loop)
    gr = lp.gradient(system, kappa, loop)
    trace = [loop] if trace_every else []
    step = step0
    prev = None
    for it in range(max_iter):
        if gr.norm < crit_tol:
            return DescentResult(loop, S, gr.norm, it, True, None, trace)
        if loop.ps_warning:
            return DescentResult(loop, S, gr.norm, it, False, "T_floor", trace)
        if loop.period > T_CEILING:
            return DescentResult(loop, S, gr.norm, it, False, "T_ceiling", trace)
        if stop_below is not None and S < stop_below:
            return DescentResult(loop, S, gr.norm, it, False, None, trace)
        g = gr.tangent
        if prev is not None:
            # BB1 step in the metric at the current loop
            s_vec = lp.LoopTangent(loop.nodes - prev[0].nodes, loop.period - prev[0].period)
            y_vec = g - prev[1]
            sy = lp.inner(loop, s_vec, y_vec)
            if sy > 0:
                step = lp.inner(loop, s_vec, s_vec) / sy
        step = _clip_period(loop, g, step)
        slope = gr.norm**2
        while True:
            trial = lp.displace(loop, g, -step)
            S_trial = lp.action(system, kappa, trial)
            if S_trial <= S - ARMIJO_C * step * slope:
                break
            step *= 0.5
            if step < 1e-16:
                return DescentResult(loop, S, gr.norm, it, False, None, trace)
        prev = (loop, g)
        loop, S = trial, S_trial
        gr = lp.gradient(system, kappa, loop)
        if trace_every and (it + 1) % trace_every == 0:
            trace.append(loop)
    converged = gr.norm < crit_tol
    return DescentResult(loop, S, gr.norm, max_iter, converged, None, trace)


@dataclass
class MinimizerResult:
    loop: lp.DiscreteLoop
    action: float
    gradient_norm: float
    iterations: int
    converged: bool
    negative: bool
    ps_failure: str | None
    report: IndexReport | None = None


def find_minimizer(system: MagneticSystem, kappa: float, seed: lp.DiscreteLoop,
                   crit_tol: float = CRIT_TOL, max_iter: int = 20000, with_index: bool = True,
                   bott_grid: int = 64, with_monodromy: bool = False,
                   jobs: int = 1) -> MinimizerResult:
    """Local minimizer of the action by descent from ``seed``.

    Non-convergence and Palais-Smale failures are reported in the result, not
    raised.
    """
    d = descend(system, kappa, seed, crit_tol, max_iter)
    report = None
    if d.converged and with_index:
        report = index_report(system, kappa, d.loop, grid=bott_grid, jobs=jobs,
                              with_monodromy=with_monodromy, crit_tol=crit_tol)
    return MinimizerResult(d.loop, d.action, d.gradient_norm, d.iterations, d.converged,
                           d.action < 0, d.ps_failure, report)


# mountain pass ---------------------------------------------------------------

@dataclass
class MinimaxProblem:
    """Paths from the n-th iterates of a start set to the n-th iterate of a target.

    ``start_set`` holds order-one critical loops and ``target`` the order-one
    loop ``mu``; both are iterated ``n`` times to form the path endpoints.
    """

    system: MagneticSystem
    kappa: float
    n: int
    start_set: list
    target: lp.DiscreteLoop
    path: list | None = None
    K: int = 33

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("iteration order must be positive")
        if not self.start_set:
            raise PreconditionError("start set is empty")
        if self.K < 17 or (self.path is not None and len(self.path) < 17):
            raise DomainError("a path needs at least 17 loops")
        s_min = min(lp.action(self.system, self.kappa, a) for a in self.start_set)
        if not lp.action(self.system, self.kappa, self.target) < s_min:
            raise PreconditionError("target action must lie below every start action")

    def endpoints(self):
        starts = [lp.iterate(a, self.n) for a in self.start_set]
        end = lp.iterate(self.target, self.n)
        N = max([s.N for s in starts] + [end.N])
        return [lp.resample(s, N) for s in starts], lp.resample(end, N)


@dataclass
class MinimaxResult:
    value: float
    argmax: lp.DiscreteLoop
    argmax_index: int
    gradient_norm: float
    path: list
    actions: np.ndarray
    iterations: int
    converged: bool
    torn: bool = False
    ps_warning: bool = False
    polished: bool = False


def interpolate_path(a: lp.DiscreteLoop, b: lp.DiscreteLoop, K: int) -> list:
    """Straight segment from ``a`` to ``b`` in node coordinates and period."""
    if a.winding != b.winding or a.N != b.N:
        raise DomainError("path endpoints need the same winding and node count")
    out = []
    for s in np.linspace(0.0, 1.0, K):
        out.append(a.with_(nodes=(1 - s) * a.nodes + s * b.nodes,
                           period=(1 - s) * a.period + s * b.period))
    return out


def path_lengths(path: list) -> np.ndarray:
    return np.array([lp.loop_distance(p, q, lattice=False) for p, q in zip(path[:-1], path[1:])])


def reparametrize(path: list, K: int | None = None) -> list:
    """Equal-arclength redistribution by piecewise-linear interpolation."""
    K = len(path) if K is None else K
    seg = path_lengths(path)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0.0:
        return [path[0]] * K
    targets = np.linspace(0.0, cum[-1], K)
    out = []
    for t in targets:
        j = min(int(np.searchsorted(cum, t, side="right")) - 1, len(path) - 2)
        w = 0.0 if seg[j] == 0 else (t - cum[j]) / seg[j]
        w = min(max(w, 0.0), 1.0)
        a, b = path[j], path[j + 1]
        out.append(a.with_(nodes=(1 - w) * a.nodes + w * b.nodes,
                           period=(1 - w) * a.period + w * b.period))
    out[0], out[-1] = path[0], path[-1]
    return out


def _closest_start(starts: list, loop: lp.DiscreteLoop):
    """Best node-aligned time translate of any start loop, measured against ``loop``."""
    best, best_d = None, np.inf
    for s in starts:
        for k in range(s.N):
            c = lp.shift(s, k)
            d = lp.loop_distance(c, loop, lattice=False)
            if d < best_d:
                best, best_d = c, d
    return best, best_d


def path_is_torn(system, kappa, path, value, tear_tol):
    """True when a segment midpoint rises above the path maximum by more than ``tear_tol``.

    Such a segment hides part of the barrier and the path needs more loops.
    """
    for a, b in zip(path[:-1], path[1:]):
        mid = a.with_(nodes=0.5 * (a.nodes + b.nodes), period=0.5 * (a.period + b.period))
        if lp.action(system, kappa, mid) > value + tear_tol:
            return True
    return False


def newton_polish(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop,
                  tol: float = 1e-10, max_iter: int = 25):
    """Newton iteration on the discrete action (minimum-norm steps through symmetry kernels).

    Returns ``(loop, gradient norm, converged)``.  Unlike descent this also
    converges to saddles, so it is only used to certify critical points.
    """
    gnorm = lp.gradient(system, kappa, loop).norm
    for _ in range(max_iter):
        if gnorm < tol:
            return loop, gnorm, True
        r, r_T = lp.differential(system, kappa, loop)
        H = lp.hessian(system, kappa, loop)
        delta = np.linalg.lstsq(H, -np.concatenate([r.ravel(), [r_T]]), rcond=1e-10)[0]
        cand = loop.with_(nodes=loop.nodes + delta[:-1].reshape(-1, 2),
                          period=max(loop.period + delta[-1], 0.5 * loop.period))
        cnorm = lp.gradient(system, kappa, cand).norm
        if not cnorm < 2.0 * gnorm:
            return loop, gnorm, False
        loop, gnorm = cand, cnorm
    return loop, gnorm, gnorm < tol


def _zoom_window(system, kappa, path):
    """Indices bracketing the highest point among the loops and the segment midpoints."""
    acts = np.array([lp.action(system, kappa, p) for p in path])
    mids = np.array([lp.action(system, kappa, a.with_(nodes=0.5 * (a.nodes + b.nodes),
                                                      period=0.5 * (a.period + b.period)))
                     for a, b in zip(path[:-1], path[1:])])
    j = int(np.argmax(mids))
    if mids[j] > acts.max():
        return j, j + 1
    i = int(np.argmax(acts))
    return max(i - 1, 0), min(i + 1, len(path) - 1)


def path_max(system, kappa, path):
    acts = np.array([lp.action(system, kappa, p) for p in path])
    return float(acts.max()), int(acts.argmax()), acts


def _relax(system, kappa, path, iters, tol, min_iter, starts=None, slide_every=10):
    """String sweeps with fixed last loop; the first loop slides along ``starts`` if given."""
    K = len(path)
    steps = np.full(K, 1.0)
    prev_max = np.inf
    ps = False
    it = 0
    for it in range(1, iters + 1):
        new = list(path)
        for i in range(1, K - 1):
            loop = path[i]
            gr = lp.gradient(system, kappa, loop)
            ps = ps or gr.ps_warning
            g = gr.tangent
            s0 = lp.action(system, kappa, loop)
            st = _clip_period(loop, g, min(2.0 * steps[i], MAX_STEP))
            slope = gr.norm**2
            while st > 1e-14:
                trial = lp.displace(loop, g, -st)
                if lp.action(system, kappa, trial) <= s0 - ARMIJO_C * st * slope:
                    break
                st *= 0.5
            else:
                trial = loop
            steps[i] = max(st, 1e-12)
            new[i] = trial
        path = reparametrize(new)
        if starts is not None and it % slide_every == 0:
            path[0], _ = _closest_start(starts, path[1])
        cur_max = float(max(lp.action(system, kappa, p) for p in path))
        if it >= min_iter and abs(prev_max - cur_max) < tol:
            return path, it, True, ps
        prev_max = cur_max
    return path, it, False, ps


def minimax(problem: MinimaxProblem, max_iter: int = 300, min_iter: int = 50,
            tol: float = 1e-7, zoom_rounds: int = 6, min_zoom: int = 2, zoom_K: int = 17,
            zoom_iter: int = 150, tear_tol: float = 1e-4, slide_every: int = 10,
            polish: bool = True) -> MinimaxResult:
    """String-method estimate of the mountain-pass value ``c_n``.

    A coarse string of ``K`` loops is relaxed first: every sweep moves each
    interior loop one backtracking descent step and redistributes the loops to
    equal spacing, and every ``slide_every`` sweeps the first loop slides to the
    nearest translate of an iterated start loop.  Equal spacing is dominated by
    the period coordinate, so a coarse path can step over the barrier between
    two neighbouring loops.  Each zoom round therefore replaces the segments
    around the highest point (a loop or a segment midpoint) by a relaxed
    sub-string of ``zoom_K`` loops with fixed ends; at least ``min_zoom`` and at most ``zoom_rounds`` rounds run,
    stopping once the path is no longer torn.

    With ``polish`` the highest loop is refined by Newton iteration; when that
    converges and its action agrees with the path maximum to within
    ``10 * tear_tol``, the critical loop is returned as ``argmax`` and the run
    counts as converged even if the last sweeps had not settled.
    """
    sysm, kappa = problem.system, problem.kappa
    starts, end = problem.endpoints()
    K = problem.K
    if problem.path is not None:
        path = [lp.resample(p, end.N) for p in problem.path]
        K = len(path)
    else:
        path = interpolate_path(starts[0], end, K)
    path[-1] = end
    path[0], _ = _closest_start(starts, path[1])
    path, it, converged, ps = _relax(sysm, kappa, path, max_iter, tol, min_iter,
                                     starts, slide_every)
    total = it
    for r in range(zoom_rounds):
        if r >= min_zoom and not path_is_torn(sysm, kappa, path, path_max(sysm, kappa, path)[0],
                                              tear_tol):
            break
        lo, hi = _zoom_window(sysm, kappa, path)
        sub = interpolate_path(path[lo], path[hi], zoom_K)
        sub, it, ok, ps_sub = _relax(sysm, kappa, sub, zoom_iter, tol, min(min_iter, zoom_iter))
        total += it
        ps = ps or ps_sub
        path = path[:lo] + sub + path[hi + 1:]
    value, imax, acts = path_max(sysm, kappa, path)
    if zoom_rounds:
        converged = ok
    argmax = path[imax]
    polished = False
    if polish and 0 < imax < len(path) - 1:
        cand, _, ok = newton_polish(sysm, kappa, argmax)
        if ok and abs(lp.action(sysm, kappa, cand) - value) <= 10.0 * tear_tol:
            argmax, polished = cand, True
            converged = True
    return MinimaxResult(
        value=value,
        argmax=argmax,
        argmax_index=imax,
        gradient_norm=lp.gradient(sysm, kappa, argmax).norm,
        path=path,
        actions=acts,
        iterations=total,
        converged=converged,
        torn=path_is_torn(sysm, kappa, path, value, tear_tol),
        ps_warning=ps,
        polished=polished,
    )


# energy sweeps ------------------------------------------------------------------

def line_seed(kappa: float, N: int = 32, x1: float = 0.5, winding=(0, 1)) -> lp.DiscreteLoop:
    """Straight closed line through ``x1`` with the period that is optimal for unit length."""
    return lp.line_loop([x1, 0.0], winding, 1.0 / np.sqrt(2.0 * kappa), N)


def detour_target(system: MagneticSystem, kappa: float, N: int = 32) -> lp.DiscreteLoop:
    """Low-action loop in the class of :func:`line_seed` on the sin-field torus.

    It runs up the line ``x1 = 1/2``, crosses to ``x1 = 0``, runs down and
    back.  The vertical legs and crossings pick up flux of the same sign, and
    the period minimizes the action at ``kappa``.
    """
    shape = lp.polygon_loop([(0.5, 0.0), (0.5, 1.0), (0.0, 1.0), (0.0, 0.0), (0.5, 0.0)],
                            1.0, N, (0, 1))
    K = lp.action_parts(system, kappa, shape)["K"]
    return shape.with_(period=float(np.sqrt(K / kappa)))


@dataclass
class MinimizerRecord:
    kappa: float
    loops: list
    actions: list
    converged: bool
    ps_failures: list

    @property
    def best(self) -> lp.DiscreteLoop:
        return self.loops[int(np.argmin(self.actions))]


@dataclass
class SweepCell:
    kappa: float
    n: int
    value: float
    relaxed_value: float
    source: str  # "relaxed", "transported" or "iterated"
    converged: bool
    torn: bool
    polished: bool
    ps_warning: bool
    argmax: lp.DiscreteLoop
    argmax_gradient_norm: float
    path: list = field(repr=False, default_factory=list)


@dataclass
class SweepResult:
    kappas: list
    ns: list
    minimizers: list
    target: lp.DiscreteLoop
    target_actions: list
    cells: dict  # (i, n) -> SweepCell
    tol: float = 1e-4

    def values(self, n: int) -> np.ndarray:
        return np.array([self.cells[i, n].value for i in range(len(self.kappas))])

    def monotonicity_violations(self) -> list:
        """``(n, i, excess)`` wherever ``c_n(kappa_i) > c_n(kappa_{i+1}) + tol``."""
        out = []
        for n in self.ns:
            v = self.values(n)
            for i in range(len(v) - 1):
                if v[i] > v[i + 1] + self.tol:
                    out.append((n, i, float(v[i] - v[i + 1])))
        return out

    def decreasing_in_n(self) -> list:
        """Per grid energy, whether ``c_n`` strictly decreases along the n range."""
        out = []
        for i in range(len(self.kappas)):
            v = [self.cells[i, n].value for n in self.ns]
            out.append(bool(all(b < a for a, b in zip(v[:-1], v[1:]))))
        return out

    def target_margins(self) -> np.ndarray:
        """``c_n(kappa) - n S_kappa(mu)`` for every cell, shape (grid, n range)."""
        return np.array([[self.cells[i, n].value - n * self.target_actions[i] for n in self.ns]
                         for i in range(len(self.kappas))])

    @property
    def flagged(self) -> list:
        return [(self.kappas[i], n) for (i, n), c in sorted(self.cells.items())
                if not c.converged or c.ps_warning]


def _minimizers_at(system, kappa, seeds, dedup_tol, max_iter):
    loops, actions, ps = [], [], []
    ok = False
    for seed in seeds:
        r = find_minimizer(system, kappa, seed, max_iter=max_iter, with_index=False)
        if r.ps_failure:
            ps.append(r.ps_failure)
        if not (r.converged and r.negative):
            continue
        ok = True
        if any(lp.circle_distance(r.loop, q) < dedup_tol for q in loops):
            continue
        loops.append(r.loop)
        actions.append(r.action)
    return MinimizerRecord(kappa, loops, actions, ok, ps)


def _relax_cell(args):
    system, kappa, n, starts, target, K, options = args
    res = minimax(MinimaxProblem(system, kappa, n, starts, target, K=K), **options)
    return res


def _cell_from(res: MinimaxResult, kappa, n, system) -> SweepCell:
    return SweepCell(kappa, n, res.value, res.value, "relaxed", res.converged, res.torn,
                     res.polished, res.ps_warning, res.argmax, res.gradient_norm, res.path)


def _path_value(system, kappa, path):
    value, imax, _ = path_max(system, kappa, path)
    return value, path[imax]


def sweep_kappa(system: MagneticSystem, kappas, ns, seeds, target: lp.DiscreteLoop,
                K: int = 33, jobs: int = 1, dedup_tol: float = 1e-3,
                max_iter: int = 20000, minimax_options: dict | None = None,
                tol: float = 1e-4) -> SweepResult:
    """Minimizers and mountain-pass values ``c_n(kappa)`` over an energy grid.

    ``seeds`` is a list of loops or a callable ``kappa -> list of loops``.
    The target loop is shared by the whole grid.  Cells are relaxed
    independently (in ``jobs`` worker processes).  A second pass walks the grid
    downwards and replaces a value by a cheaper path when one is available:
    the path found at the next larger energy, entered by the descent from the
    old minimizer to the new one, or the ``n``-fold iterate of the best
    order-one path.  Both are admissible paths, and the action decreases with
    the energy loop by loop, so the reported values are upper bounds that
    never decrease in ``kappa``.
    """
    kappas = [float(k) for k in kappas]
    if any(not k > 0 for k in kappas):
        raise DomainError("energies must be positive")
    if any(b <= a for a, b in zip(kappas[:-1], kappas[1:])):
        raise DomainError("energy grid must be strictly increasing")
    ns = sorted(int(n) for n in ns)
    if not ns or ns[0] < 1:
        raise DomainError("iteration orders must be positive")
    options = dict(minimax_options or {})
    mins = []
    for k in kappas:
        battery = seeds(k) if callable(seeds) else list(seeds)
        mins.append(_minimizers_at(system, k, battery, dedup_tol, max_iter))
    target_actions = [lp.action(system, k, target) for k in kappas]
    for rec, s_mu in zip(mins, target_actions):
        if rec.loops and not s_mu < min(rec.actions):
            raise PreconditionError(
                f"target action {s_mu:.6g} is not below the minimizers at kappa={rec.kappa:.6g}")
    tasks = [(system, kappas[i], n, mins[i].loops, target, K, options)
             for i in range(len(kappas)) for n in ns if mins[i].loops]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_relax_cell, tasks))
    else:
        results = [_relax_cell(t) for t in tasks]
    cells = {}
    it = iter(results)
    for i in range(len(kappas)):
        for n in ns:
            if mins[i].loops:
                cells[i, n] = _cell_from(next(it), kappas[i], n, system)
    # downward pass
    for i in reversed(range(len(kappas))):
        if not mins[i].loops:
            continue
        k = kappas[i]
        for n in ns:
            cell = cells[i, n]
            options_i = []
            if (i + 1, n) in cells and mins[i + 1].loops:
                head = cells[i + 1, n].path[0]
                origin = min(mins[i + 1].loops,
                             key=lambda q: lp.circle_distance(lp.iterate(q, n), head))
                # the prefix ends on the critical circle of head; the two are joined
                # along that circle, where the action is constant
                d = descend(system, k, origin, max_iter=max_iter, trace_every=5)
                if d.converged and any(lp.circle_distance(d.loop, q) < dedup_tol
                                       for q in mins[i].loops):
                    prefix = [lp.iterate(q, n) for q in reversed(d.trace + [d.loop])]
                    N = cells[i + 1, n].path[0].N
                    path = [lp.resample(q, N) for q in prefix] + cells[i + 1, n].path
                    options_i.append(("transported", path))
            if n != 1 and (i, 1) in cells:
                options_i.append(("iterated", [lp.iterate(q, n) for q in cells[i, 1].path]))
            for name, path in options_i:
                value, top = _path_value(system, k, path)
                if value < cell.value:
                    cell = SweepCell(k, n, value, cell.relaxed_value, name, cell.converged,
                                     cell.torn, cell.polished, cell.ps_warning, top,
                                     lp.gradient(system, k, top).norm, path)
            cells[i, n] = cell
    return SweepResult(kappas, ns, mins, target, target_actions, cells, tol)


# critical value of the universal cover --------------------------------------------

def reduced_action(system: MagneticSystem, kappa: float, loop: lp.DiscreteLoop) -> float:
    """Action minimized over the period: ``2 sqrt(K (kappa - W)) - F``.

    ``-inf`` when ``kappa`` does not exceed the mean potential on the loop (the action
    is then unbounded below in the period).
    """
    p = lp.action_parts(system, kappa, loop)
    gap = kappa - p["W"]
    if not gap > 0:
        return -np.inf
    return 2.0 * np.sqrt(p["K"] * gap) - p["F"]


def _optimal_period(system, kappa, loop):
    p = lp.action_parts(system, kappa, loop)
    return float(np.sqrt(p["K"] / (kappa - p["W"])))


@dataclass
class ReducedDescent:
    action: float
    negative: bool
    collapsed: bool
    iterations: int
    loop: lp.DiscreteLoop


def reduced_descent(system: MagneticSystem, kappa: float, seed: lp.DiscreteLoop,
                    neg_margin: float = NEG_MARGIN, max_iter: int = 3000,
                    step0: float = 0.05, collapse_length: float = 1e-3,
                    grad_tol: float = 1e-9) -> ReducedDescent:
    """Descent of :func:`reduced_action` over the nodes.

    Barzilai-Borwein steps in the loop metric at unit period, accepted by
    backtracking; the first trial step has metric length ``step0``.  Scaling
    the magnetic form by ``c`` and the energy by ``c^2`` scales the reduced
    action and its gradient by ``c`` and leaves the whole trajectory
    unchanged.  Stops at an action below ``-neg_margin``, at collapse of the
    loop to a point, at a vanishing gradient or at a stalled line search.
    """
    loop = seed
    S = reduced_action(system, kappa, loop)
    prev = None
    step = None
    for it in range(max_iter):
        if S < -neg_margin:
            return ReducedDescent(S, True, False, it, loop)
        length = float(np.sum(np.linalg.norm(np.diff(loop.closed_nodes(), axis=0), axis=1)))
        if length < collapse_length:
            return ReducedDescent(S, False, True, it, loop)
        # envelope theorem: the node gradient at the optimal period
        at = loop.with_(period=_optimal_period(system, kappa, loop))
        r, _ = lp.differential(system, kappa, at)
        u = lp.apply_metric_inverse(r, loop.N, 1.0)
        slope = float(np.sum(u * r))
        if not slope > 0:
            break
        if step is None:
            step = step0 / np.sqrt(slope)
        if prev is not None:
            sx = loop.nodes - prev[0]
            y = u - prev[1]
            sy = float(np.sum(sx * lp.apply_metric(y, loop.N, 1.0)))
            if sy > 0:
                step = float(np.sum(sx * lp.apply_metric(sx, loop.N, 1.0))) / sy
        if np.sqrt(slope) * len(u) ** -0.5 < grad_tol * max(1.0, abs(S)):
            break
        while step * np.sqrt(slope) > 1e-12:
            trial = loop.with_(nodes=loop.nodes - step * u)
            S_trial = reduced_action(system, kappa, trial)
            if S_trial <= S - ARMIJO_C * step * slope:
                break
            step *= 0.5
        else:
            return ReducedDescent(S, False, False, it, loop)
        prev = (loop.nodes, u)
        loop, S = trial, S_trial
    return ReducedDescent(S, S < -neg_margin, False, max_iter, loop)


def contractible_seeds(N: int = 64, centers: int = 3, radii=(0.1, 0.2, 0.3),
                       heights=(1.0, 4.0, 8.0), offsets=(0.0, 0.25, 0.5, 0.75),
                       per_length: int = 16) -> list:
    """Circles and long rectangles of both orientations.

    Rectangles come first, tallest first, then circles on a
    ``centers x centers`` grid of centres.  The rectangles
    have width 1/2, the given heights (in the covering plane), about
    ``per_length`` nodes per unit length, and run along either axis from each
    offset; long ones are the cheap way for a
    contractible loop to enclose a lot of flux of one sign.
    """
    out = []
    for h in sorted(heights, reverse=True):
        n_h = int(2 ** np.ceil(np.log2(per_length * (2.0 * h + 1.0))))
        for a in offsets:
            box = np.array([(a, 0.0), (a + 0.5, 0.0), (a + 0.5, h), (a, h)])
            for vertical in (True, False):
                v = box if vertical else box[:, ::-1]
                for cw in (False, True):
                    out.append(lp.polygon_loop(v[::-1] if cw else v, 1.0, max(N, n_h)))
    for cx in (np.arange(centers) + 0.5) / centers:
        for cy in (np.arange(centers) + 0.5) / centers:
            for r in radii:
                for cw in (False, True):
                    out.append(lp.circle_loop([cx, cy], r, 1.0, N, clockwise=cw))
    return out


def _seed_task(args):
    system, kappa, seed, neg_margin, max_iter = args
    return reduced_descent(system, kappa, seed, neg_margin, max_iter).negative


def below_cu(system: MagneticSystem, kappa: float, seeds: list, neg_margin: float = NEG_MARGIN,
             max_iter: int = 3000, jobs: int = 1) -> bool:
    """True when some contractible seed reaches reduced action below ``-neg_margin``."""
    if system.has_potential and kappa <= _max_potential(system):
        return True
    tasks = [(system, kappa, s, neg_margin, max_iter) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return any(pool.map(_seed_task, tasks))
    return any(_seed_task(t) for t in tasks)


def _max_potential(system: MagneticSystem, n: int = 128) -> float:
    if system.is_torus:
        g = (np.arange(n) + 0.5) / n
    else:
        g = np.linspace(-system.plane_box, system.plane_box, n)
    X, Y = np.meshgrid(g, g)
    V, _, _ = system.potential(np.column_stack([X.ravel(), Y.ravel()]))
    return float(np.max(V))


@dataclass
class CuEstimate:
    lo: float
    hi: float
    steps: int
    decisions: list  # (kappa, below) for every bisection midpoint

    @property
    def estimate(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo


def estimate_cu(system: MagneticSystem, lo: float, hi: float, steps: int = 10,
                seeds: list | None = None, neg_margin: float = NEG_MARGIN,
                max_iter: int = 3000, jobs: int = 1) -> CuEstimate:
    """Bisection bracket for the critical value of the universal cover.

    ``lo`` must be below it (a seed reaches negative reduced action there;
    ``lo = 0`` is accepted without a test when the potential vanishes) and
    ``hi`` above it (no seed does).  An inconsistent bracket raises
    :class:`BracketError`.
    """
    if not (0 <= lo < hi):
        raise BracketError(f"need 0 <= lo < hi, got [{lo}, {hi}]")
    if steps < 0:
        raise DomainError("bisection steps must be nonnegative")
    seeds = contractible_seeds() if seeds is None else seeds
    kw = dict(neg_margin=neg_margin, max_iter=max_iter, jobs=jobs)
    if below_cu(system, hi, seeds, **kw):
        raise BracketError(f"negative action found at the upper end kappa={hi}")
    if not (lo == 0 and not system.has_potential):
        if lo == 0 or not below_cu(system, lo, seeds, **kw):
            raise BracketError(f"no negative action found at the lower end kappa={lo}")
    decisions = []
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        below = below_cu(system, mid, seeds, **kw)
        decisions.append((mid, below))
        if below:
            lo = mid
        else:
            hi = mid
    return CuEstimate(lo, hi, steps, decisions)


# catalog of critical circles ------------------------------------------------------

@dataclass
class CatalogOrbit:
    representative: lp.DiscreteLoop
    members: list  # indices into the input list
    prime: int | None = None  # orbit this one iterates, if any
    order: int = 1


@dataclass
class Catalog:
    orbits: list
    relations: list  # (prime orbit, iterated orbit, n)
    suspects: list  # input indices of loops flagged by the iteration diagnostic
    dedup_tol: float

    @property
    def distinct(self) -> int:
        """Number of geometrically distinct orbits: those that iterate no other."""
        return sum(1 for o in self.orbits if o.prime is None)


def critical_circle_catalog(loops: list, labels: list | None = None, dedup_tol: float = 1e-3,
                            max_order: int = 8, suspect_order: int = 2) -> Catalog:
    """Group critical loops into critical circles and detect iterates.

    Loops are grouped by :func:`circle_distance` below ``dedup_tol``, taken in
    order of increasing period and with the shortest loop of each group as
    representative.  An orbit whose representative lies within ``dedup_tol``
    of ``iterate(E, n)`` for an earlier orbit ``E`` and ``2 <= n <= max_order``
    is recorded as the ``n``-th iterate of ``E``.  Loops labelled
    ``"minimax"`` that turn out to be ``n``-th iterates with
    ``n >= suspect_order`` are listed as suspects: mountain-pass values of high
    iterates are expected away from iterates of known orbits.
    """
    labels = list(labels) if labels is not None else [""] * len(loops)
    if len(labels) != len(loops):
        raise DomainError("one label per loop")
    order = sorted(range(len(loops)), key=lambda i: (loops[i].period, i))
    orbits: list[CatalogOrbit] = []
    for i in order:
        for orb in orbits:
            if lp.circle_distance(loops[i], orb.representative) < dedup_tol:
                orb.members.append(i)
                break
        else:
            orbits.append(CatalogOrbit(loops[i], [i]))
    relations = []
    for j, orb in enumerate(orbits):
        rep = orb.representative
        for e, base in enumerate(orbits[:j]):
            if base.prime is not None:
                continue
            n = int(round(rep.period / base.representative.period))
            if not 2 <= n <= max_order:
                continue
            if lp.circle_distance(lp.iterate(base.representative, n), rep) < dedup_tol:
                orb.prime, orb.order = e, n
                relations.append((e, j, n))
                break
    suspects = sorted(i for orb in orbits if orb.order >= suspect_order
                      for i in orb.members if labels[i] == "minimax")
    return Catalog(orbits, relations, suspects, dedup_tol)
