from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stvs import critmoments as cm
from stvs import devices as dv
from stvs.netmodel import FaultSpec
from stvs.optimizer import (SHARED, Expr, ProblemBuilder, Status, Tolerances, assemble_nlp, evaluate_point,
                            grid_search_oracle, optimize, solve_interior_point, variable_count)
from stvs.optimizer.assemble import with_config
from stvs.tuning import SHARED_KEY, DeviceTuning, TuningSet

from .test_critmoments import _divider_scenario


def _random_points(problem, seed, k=2):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=problem.n) for _ in range(k)]


def test_variable_count_single_gfm():
    sc = _divider_scenario()
    prob = assemble_nlp(sc)
    assert prob.n == variable_count(n_dev=1, n_bus=2, n_mon=1, n_fault=1)
    # 3 moments x (2 n_bus + 2 n_dev) xy unknowns + tunings + sources/presets + (|V|, slack) per monitored bus
    assert prob.n == 3 * (2 * 2 + 2 * 1) + 1 + 2 + 2 + 3 * 2


def test_variable_count_ieee14(ieee14):
    prob = assemble_nlp(ieee14)
    assert prob.n == variable_count(5, 14, 3, len(ieee14.faults))
    shared = assemble_nlp(with_config(ieee14, preset_sharing=SHARED))
    assert shared.n == variable_count(5, 14, 3, len(ieee14.faults), shared=True)


def test_hessian_independent_of_point(two_device):
    prob = assemble_nlp(two_device)
    rng = np.random.default_rng(1)
    d = rng.normal(size=prob.n)
    x1, x2 = _random_points(prob, 2)
    for qmap in (prob.eq, prob.ineq, prob.objective):
        h1 = (qmap.jacobian(x1 + d) - qmap.jacobian(x1)).tocoo()
        h2 = (qmap.jacobian(x2 + d) - qmap.jacobian(x2)).tocoo()
        diff = abs(h1 - h2)
        assert diff.max() <= 1e-9 if diff.nnz else True


def test_quadraticity_second_difference(two_device):
    prob = assemble_nlp(two_device)
    x1, x2 = _random_points(prob, 3)
    d = np.random.default_rng(4).normal(size=prob.n)
    for qmap in (prob.eq, prob.ineq):
        s1 = qmap.value(x1 + d) - 2 * qmap.value(x1) + qmap.value(x1 - d)
        s2 = qmap.value(x2 + d) - 2 * qmap.value(x2) + qmap.value(x2 - d)
        np.testing.assert_allclose(s1, s2, atol=1e-9)
        # second difference equals d' H_r d for each row
        np.testing.assert_allclose(s1[:5], [d @ (qmap.hessian_of_row(r) @ d) for r in range(5)], atol=1e-9)


def test_unconstrained_quadratic():
    a = np.array([0.3, -1.2, 2.5])
    pb = ProblemBuilder()
    obj = Expr(const=float(a @ a))
    for i, ai in enumerate(a):
        pb.add_var(f"x{i}")
        obj.bilinear(i, i, 1.0).term(i, -2 * ai)
    pb.obj = obj
    sol = solve_interior_point(pb.build(), np.zeros(3))
    assert sol.status is Status.OPTIMAL
    np.testing.assert_allclose(sol.x_star, a, atol=1e-8)
    assert sol.iterations <= 2


def test_box_constrained_quadratic():
    pb = ProblemBuilder()
    pb.add_var("x", 0.0, 1.0)
    pb.add_var("y", -np.inf, np.inf)
    pb.obj = Expr(const=4.0).bilinear(0, 0, 1.0).term(0, -4.0).bilinear(1, 1, 1.0)
    pb.add_ineq(Expr(const=1.0).term(1, -1.0), "y>=1")
    sol = solve_interior_point(pb.build(), np.array([0.5, 2.0]))
    assert sol.status is Status.OPTIMAL
    np.testing.assert_allclose(sol.x_star, [1.0, 1.0], atol=1e-6)


def test_two_device_optimal(two_device_opt):
    best = two_device_opt.best
    assert best.status is Status.OPTIMAL
    assert best.max_constraint_violation <= 1e-8
    assert best.kkt_residual <= 1e-6
    assert best.objective >= 0


def test_epigraph_exact_and_reevaluation(ieee14, ieee14_opt):
    sol = ieee14_opt.best
    assert sol.optimal
    prob = ieee14_opt.problem
    lay = prob.layout
    x = sol.x_star
    v_ref = prob.meta["v_ref"]
    for key, vm in lay["vm"].items():
        for b, k in vm.items():
            assert x[lay["t"][key][b]] == pytest.approx(abs(v_ref[b] - x[k]), abs=1e-7)
    tun = ieee14_opt.tunings
    src = cm.backsolve_internal_sources(ieee14.dispatch, ieee14.devices, tun.virtual)
    for f in ieee14.faults:
        for st_ in cm.eval_all_moments(ieee14, f, tun.virtual, src, tun.presets_for(f.id)):
            vx, vy = lay["v"][(f.id, st_.moment)]
            assert np.abs(st_.v - (x[vx] + 1j * x[vy])).max() <= 1e-8


def test_extract_conversions(two_device_opt):
    assert DeviceTuning("L", "gfl", 0.5).x_virtual == 2.0
    assert DeviceTuning("L", "gfl", 0.0).correction_disabled
    ts = TuningSet(virtual={"M": 0.3}, presets={"F": {"M": 0.88 + 0j}}, kinds={"M": "gfm"})
    rec = ts.to_dict()["preset"][0]
    assert rec["e_opt"] == pytest.approx(0.88) and rec["delta_opt"] == 0.0
    tun = two_device_opt.tunings
    assert TuningSet.from_dict(tun.to_dict()).presets == tun.presets


def test_multistart_ieee14_single_fault(ieee14):
    sc = with_config(ieee14, contingencies=("F2",), multistart=5)
    res = optimize(sc)
    assert sum(s.optimal for _, s in res.runs) >= 1
    # local method on a nonconvex set: either the starts agree or the disagreement is reported
    assert res.objective_spread <= 1e-5 or res.multistart_disagreement


def test_shared_presets_tie_faults(ieee14):
    sc = with_config(ieee14, preset_sharing=SHARED, contingencies=("F2", "F10"))
    res = optimize(sc)
    assert res.best.optimal
    assert list(res.tunings.presets) == [SHARED_KEY]
    assert res.tunings.presets_for("F2") is res.tunings.presets_for("F10")
    per = optimize(with_config(ieee14, contingencies=("F2", "F10")))
    # tying the presets is a restriction
    assert res.best.objective >= per.best.objective - 1e-6


def test_restriction_monotone(two_device, two_device_opt):
    base = two_device_opt.best.objective
    for change in (dict(x_min=0.7), dict(b_max=1.0), dict(x_max=0.5)):
        res = optimize(with_config(two_device, **change))
        # a restriction is either infeasible or no better than the original
        assert not res.best.optimal or res.best.objective >= base - 1e-6, change
    extra = FaultSpec("F2", 2, 0.0, 0.2)
    more = replace(two_device, faults=two_device.faults + (extra,))
    res = optimize(more)
    assert res.best.optimal and res.best.objective >= base - 1e-6


def test_small_reactance_cap_is_infeasible(two_device):
    """Below x' = 0.5 the grid-forming inception current exceeds its cap for every b'."""
    sc = with_config(two_device, x_max=0.5)
    assert not optimize(sc).best.optimal
    orc = grid_search_oracle(sc, axes={"GFM1": np.linspace(0.05, 0.5, 10), "GFL2": np.linspace(0.0, 20.0, 21)})
    assert not orc.feasible


def test_objective_nonnegative_within_bounds(two_device):
    prob = assemble_nlp(two_device)
    lo = np.where(np.isfinite(prob.lb), prob.lb, -3.0)
    hi = np.where(np.isfinite(prob.ub), prob.ub, 3.0)

    @given(st.lists(st.floats(0.0, 1.0), min_size=prob.n, max_size=prob.n))
    def check(u):
        x = lo + np.asarray(u) * (hi - lo)
        assert prob.f(x) >= 0.0

    check()


def test_oracle_contains_ipm_point(two_device, two_device_opt):
    tun = two_device_opt.tunings
    fid = two_device.faults[0].id
    axes = {n: [v] for n, v in tun.virtual.items()}
    axes["preset_points"] = {n: [tun.presets[fid][n]] for n in tun.virtual}
    res = grid_search_oracle(two_device, axes=axes)
    assert res.feasible
    assert res.best_objective <= two_device_opt.best.objective + 1e-9


def test_oracle_vectorized_matches_scalar(two_device):
    res = grid_search_oracle(two_device, resolution=3)
    assert res.feasible
    obj, ok = evaluate_point(two_device, two_device.opt, res.tunings, res.presets)
    assert ok
    assert obj == pytest.approx(res.best_objective, abs=1e-12)


def test_oracle_rejects_large_systems(ieee14):
    with pytest.raises(Exception, match="at most 3 devices"):
        grid_search_oracle(ieee14)


def test_infeasible_limits_reported_by_both(two_device):
    bolted = replace(two_device, faults=(FaultSpec("F3", 3, 0.0, 0.001),),
                     limits=dv.SecurityLimits(v_lvrt_th=0.99, v_hvrt_th=1.2))
    res = optimize(bolted, tol=Tolerances(max_iter=80))
    assert not res.best.optimal
    assert res.tunings is None
    orc = grid_search_oracle(bolted, resolution=3)
    assert not orc.feasible and "no feasible point" in orc.message
