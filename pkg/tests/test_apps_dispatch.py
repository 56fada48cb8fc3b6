import json

import numpy as np
import pytest

from conftest import case
from oracles import dc_opf_oracle, dc_power_flow, wls_oracle
from tdcoord.apps.dispatch import (DispatchError, LmpVector, UnobservableError, build_tdced, build_tdopf_dc,
                                   build_tdse, centralized_qp, compute_lmps, dc_bbus, dc_branches, ptdf,
                                   qp_dso_side, qp_tso_side, run_tdced, run_tdopf_dc, run_tdse,
                                   weighted_residuals)
from tdcoord.hgd import BoundaryResponse, HgdConfig
from tdcoord.model import Branch, bundled_case_path, case_from_dict, dso_view, tso_view

TIGHT = HgdConfig(epsilon=1e-10, max_iter=100)


def case_dict(name):
    return json.loads(bundled_case_path(name).read_text())


# -- DC network helpers ------------------------------------------------------------------------

def test_ptdf_single_line():
    P = ptdf([1, 2], [Branch(1, 1, 2, 0.0, 0.1)], ref=1)
    # injection at bus 2 withdrawn at the reference flows 2 -> 1
    assert np.allclose(P, [[0.0, -1.0]])


def test_ptdf_triangle_splits_by_path_reactance():
    brs = [Branch(1, 1, 2, 0.0, 0.1), Branch(2, 2, 3, 0.0, 0.1), Branch(3, 1, 3, 0.0, 0.1)]
    P = ptdf([1, 2, 3], brs, ref=1)
    # injection at 3: direct path 3->1 carries 2/3, the two-line path 1/3
    assert np.allclose(P[:, 2], [-1 / 3, -1 / 3, -2 / 3])


def test_bbus_rows_sum_to_zero():
    c = case("ieee14_itd")
    B = dc_bbus([b.id for b in c.buses], dc_branches(c))
    assert np.abs(B.sum(axis=1)).max() <= 1e-12
    assert np.allclose(B, B.T)


def test_disconnected_network_rejected():
    with pytest.raises(DispatchError, match="disconnected"):
        ptdf([1, 2, 3], [Branch(1, 1, 2, 0.0, 0.1)], ref=1)


# -- economic dispatch -------------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["ed_quadratic", "ed_merit", "ed_congested"])
def test_ed_dispatch_and_all_prices_match_oracle(name):
    c = case(name)
    ref = dc_opf_oracle(c)
    sol, lmps, tr = run_tdced(c, "basic", TIGHT)
    assert tr.converged
    for k, p in ref["p"].items():
        assert sol.generation[k] == pytest.approx(p, abs=1e-6)
    for b in lmps.buses:
        assert lmps.price(b) == pytest.approx(ref["lmp"][b], abs=1e-6), b


def test_congestion_separates_prices():
    lmps = run_tdced(case("ed_congested"), "basic", TIGHT)[1]
    # the slave side sits behind the binding feeder and is priced by its local unit
    assert lmps.price(3) == pytest.approx(30.0, abs=1e-6)
    assert lmps.price(1) == pytest.approx(10.0, abs=1e-6)


def test_generation_within_limits():
    c = case("ed_quadratic")
    sol = run_tdced(c, "modified-trans", TIGHT)[0]
    for k, p in sol.generation.items():
        g = c.generators[k]
        assert g.p_min - 1e-9 <= p <= g.p_max + 1e-9


def test_ed_boundary_price_is_the_exchanged_multiplier():
    sol, lmps, _ = run_tdced(case("ed_quadratic"), "basic", TIGHT)
    assert np.array_equal(lmps.lambda_mb, sol.xi.lam[0])
    assert np.allclose(sol.extra["P_BT"], sol.extra["P_BD"], atol=1e-8)


def test_ed_rejects_multi_boundary_component():
    with pytest.raises(DispatchError, match="reference-bus ambiguity"):
        build_tdced(case("opf_asym"))


def test_centralized_qp_agrees():
    for build, name in ((build_tdced, "ed_quadratic"), (build_tdopf_dc, "opf_asym")):
        prob = build(case(name))
        qp, pt = centralized_qp(prob)
        assert qp.objective(pt.z) + sum(g.cost_c0 for g in case(name).generators) == pytest.approx(
            dc_opf_oracle(case(name))["objective"], rel=1e-8)


def test_lmp_vector():
    v = LmpVector((1, 2), np.array([10.0, 12.5]), (2,), np.array([12.5]))
    assert v.price(2) == 12.5
    assert v.rows() == [{"bus": 1, "lmp": 10.0}, {"bus": 2, "lmp": 12.5}]
    with pytest.raises(DispatchError):
        compute_lmps(None)


# -- DC optimal power flow -----------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["opf_asym", "opf_3p1p2"])
def test_opf_prices_match_oracle(name):
    c = case(name)
    ref = dc_opf_oracle(c)
    sol, lmps, tr = run_tdopf_dc(c, "modified-dist", TIGHT)
    assert tr.converged
    for b in lmps.buses:
        assert lmps.price(b) == pytest.approx(ref["lmp"][b], abs=1e-6), b
    for k, p in ref["p"].items():
        assert sol.generation[k] == pytest.approx(p, abs=1e-6)


# -- state estimation ---------------------------------------------------------------------------------

def test_se_exact_residuals_vanish():
    c = case("se_exact")
    sol, _ = run_tdse(c, "basic", HgdConfig(epsilon=1e-12, max_iter=100))
    assert max(abs(r) for _, r in weighted_residuals(c, sol.estimate)) <= 1e-7
    assert np.abs(sol.nu).max() <= 1e-8


def test_se_truth_has_zero_residuals():
    c = case("se_exact")
    assert max(abs(r) for _, r in weighted_residuals(c, dc_power_flow(c))) <= 1e-9


def test_se_noisy_objective_matches_wls():
    c = case("se_noisy")
    sol, _ = run_tdse(c, "basic", TIGHT)
    r_ref = np.array([v for _, v in weighted_residuals(c, wls_oracle(c))])
    assert sol.objective == pytest.approx(0.5 * (r_ref ** 2).sum(), rel=1e-8)


def test_se_needs_measurements():
    d = case_dict("se_exact")
    d["measurements"] = []
    with pytest.raises(DispatchError, match="no measurements"):
        build_tdse(case_from_dict(d))


def test_se_boundary_needs_one_injection():
    d = case_dict("se_exact")
    d["measurements"] = [m for m in d["measurements"] if not (m["kind"] == "injection" and m["bus"] == 5)]
    with pytest.raises(DispatchError, match="exactly one injection"):
        build_tdse(case_from_dict(d))


def test_se_unobservable_slave():
    c = case("se_exact")
    d = case_dict("se_exact")
    slave2 = set(c.dso_slave_ids(2))
    keep = []
    for m in d["measurements"]:
        buses = {m["bus"]} if m["kind"] != "flow" else {c.branch(m["branch"]).from_bus, c.branch(m["branch"]).to_bus}
        if not buses & slave2:
            keep.append(m)
    d["measurements"] = keep
    with pytest.raises(UnobservableError, match="DSO 2"):
        build_tdse(case_from_dict(d))


# -- per-operator sides ------------------------------------------------------------------------------

@pytest.mark.parametrize("app,build,name", [("ed", build_tdced, "ed_quadratic"),
                                            ("opf", build_tdopf_dc, "opf_asym"),
                                            ("se", build_tdse, "se_noisy")])
def test_views_build_the_same_sides(app, build, name):
    c = case(name)
    full = build(c)
    tso, xi0 = qp_tso_side(app, tso_view(c))
    assert np.array_equal(xi0.vector(), full.initial_state().vector())
    L = full.layout
    for d in L.dsos:
        side = qp_dso_side(app, dso_view(c, d), d)
        xi = full.initial_state().columns(L.columns(d))
        a, b = side.solve(xi).y, full.dsos[d].solve(xi).y
        assert np.allclose(a.vector(), b.vector(), atol=1e-12)
    y = BoundaryResponse.merge([(L.columns(d), full.dsos[d].solve(full.initial_state().columns(L.columns(d))).y)
                                for d in L.dsos], L)
    assert np.allclose(tso.solve(y).xi.vector(), full.tso.solve(y).xi.vector(), atol=1e-12)
