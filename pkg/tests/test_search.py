import numpy as np
import pytest

from magflow import loops as lp
from magflow import search
from magflow.errors import BracketError, DomainError, PreconditionError
from magflow.geometry import builtin_system

KAPPA = 0.002


def test_minimizer_closed_form(sin_torus):
    # S = sqrt(2 kappa) - A / (2 pi) at T = 1 / sqrt(2 kappa)
    seed = lp.line_loop([0.42, 0.1], (0, 1), 12.0, 32)
    res = search.find_minimizer(sin_torus, KAPPA, seed, with_index=False)
    assert res.converged and res.negative
    assert res.action == pytest.approx(np.sqrt(2 * KAPPA) - 1 / (2 * np.pi), abs=1e-9)
    # the action is flat in T near the minimum; Newton polish pins the period
    loop, gnorm, ok = search.newton_polish(sin_torus, KAPPA, res.loop)
    assert ok and gnorm < 1e-10
    assert loop.T == pytest.approx(1 / np.sqrt(2 * KAPPA), rel=1e-7)
    assert np.allclose(loop.nodes[:, 0] % 1.0, 0.5, atol=1e-9)


def test_restart_at_a_minimizer_takes_no_steps(sin_torus, torus_minimizer):
    res = search.find_minimizer(sin_torus, KAPPA, torus_minimizer, with_index=False)
    assert res.iterations == 0 and res.converged


def test_minimizer_reports_index_zero(sin_torus, torus_minimizer):
    res = search.find_minimizer(sin_torus, KAPPA, torus_minimizer, bott_grid=16)
    assert res.report.ind_free == 0 and res.report.ind_fixed == 0
    assert res.report.mean_index == 0.0


def test_contractible_loop_shrinks_without_field():
    flat = builtin_system("flat_torus")
    seed = lp.circle_loop([0.5, 0.5], 0.2, 3.0, 32)
    res = search.find_minimizer(flat, 0.1, seed, with_index=False, max_iter=5000)
    assert not res.converged
    assert res.ps_failure is not None


def test_descend_rejects_nonpositive_energy(sin_torus, torus_minimizer):
    with pytest.raises(DomainError):
        search.descend(sin_torus, 0.0, torus_minimizer)


def test_minimax_problem_validation(sin_torus, torus_minimizer):
    target = search.detour_target(sin_torus, KAPPA, 32)
    with pytest.raises(PreconditionError):
        search.MinimaxProblem(sin_torus, KAPPA, 1, [], target)
    with pytest.raises(DomainError):
        search.MinimaxProblem(sin_torus, KAPPA, 1, [torus_minimizer], target, K=5)
    with pytest.raises(PreconditionError):
        # the target must be below the start
        search.MinimaxProblem(sin_torus, KAPPA, 1, [target], torus_minimizer)


def test_mountain_pass_lies_above_both_ends(sin_torus, torus_minimizer, torus_saddle):
    target = search.detour_target(sin_torus, KAPPA, 32)
    value = lp.action(sin_torus, KAPPA, torus_saddle)
    assert value > lp.action(sin_torus, KAPPA, torus_minimizer)
    assert value > lp.action(sin_torus, KAPPA, target)
    assert lp.gradient(sin_torus, KAPPA, torus_saddle).norm < 1e-8


def test_interpolated_path_endpoints(torus_minimizer, sin_torus):
    target = search.detour_target(sin_torus, KAPPA, 32)
    path = search.interpolate_path(torus_minimizer, target, 17)
    assert len(path) == 17
    assert np.array_equal(path[0].nodes, torus_minimizer.nodes)
    assert np.allclose(path[-1].nodes, target.nodes)


def test_reduced_action_scaling():
    # theta -> 2 theta, kappa -> 4 kappa doubles the period-minimized action
    one = builtin_system("flat_torus_sin_field", amplitude=1.0)
    two = builtin_system("flat_torus_sin_field", amplitude=2.0)
    for loop in search.contractible_seeds()[:10]:
        assert search.reduced_action(two, 0.04, loop) == pytest.approx(
            2 * search.reduced_action(one, 0.01, loop), rel=1e-12, abs=1e-14)


def test_reduced_action_is_the_minimum_over_periods(sin_torus):
    loop = lp.circle_loop([0.3, 0.3], 0.2, 1.0, 32)
    Ts = np.linspace(0.5, 50, 4000)
    best = min(lp.action(sin_torus, 0.01, loop.with_(period=T)) for T in Ts)
    assert search.reduced_action(sin_torus, 0.01, loop) == pytest.approx(best, abs=1e-5)


def test_contractible_seeds_are_contractible():
    seeds = search.contractible_seeds()
    assert seeds and all(s.winding == (0, 0) for s in seeds)


def test_flat_bracket_starts_at_zero():
    est = search.estimate_cu(builtin_system("flat_torus"), 0.0, 0.01, steps=3)
    assert est.lo == 0.0 and est.width == pytest.approx(0.01 / 8)


def test_inconsistent_bracket(sin_torus):
    with pytest.raises(BracketError):
        search.estimate_cu(sin_torus, 0.001, 0.002, steps=2)
    with pytest.raises(BracketError):
        search.estimate_cu(sin_torus, 0.01, 0.005)


def test_catalog_groups_translates_and_iterates(torus_minimizer, torus_saddle):
    loops = [lp.iterate(torus_minimizer, 2), lp.shift(torus_minimizer, 5), torus_minimizer,
             torus_saddle]
    cat = search.critical_circle_catalog(loops, labels=["minimax", "", "", "minimax"])
    assert cat.distinct == 2
    assert len(cat.orbits) == 3
    assert [n for _, _, n in cat.relations] == [2]
    assert cat.suspects == [0]


def test_catalog_label_count():
    with pytest.raises(DomainError):
        search.critical_circle_catalog([lp.circle_loop([0, 0], 0.1, 1.0, 16)], labels=[])


@pytest.mark.slow
def test_small_sweep_is_monotone(sin_torus):
    kappas = [0.0015, 0.0025]
    target = search.detour_target(sin_torus, kappas[-1], 32)
    res = search.sweep_kappa(sin_torus, kappas, [1, 2], lambda k: [search.line_seed(k, 32)],
                             target)
    assert res.monotonicity_violations() == []
    assert res.decreasing_in_n()
    assert np.all(res.target_margins() > 0)
