import csv
import io
import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import affine_half, case
from tdcoord.apps.dispatch import build_tdced, build_tdopf_dc, run_tdced, run_tdopf_dc
from tdcoord.apps.pf import build_tdpf, run_tdpf
from tdcoord.acpf import solve_centralized_pf
from tdcoord.hgd import (AffineCoordinatedProblem, BoundaryLayout, BoundaryResponse, BoundaryState,
                         HgdConfig, InsufficientDataError, RateWarning, StartSide, SubproblemError,
                         Variant, composite_map_spectral_radius, composite_sweep, estimate_rate,
                         run_basic_hgd, run_hgd, run_modified_hgd_dist, run_modified_hgd_trans,
                         wrap_with_elastic_slacks)
from tdcoord.model import bundled_case_path, case_from_dict


def gap(a: BoundaryState, b: BoundaryState) -> float:
    return float(np.abs(a.vector() - b.vector()).max())


def ed_tight(limit=0.3):
    """ed_congested with the slave feeder limit below what the DSO can cover locally."""
    d = json.loads(bundled_case_path("ed_congested").read_text())
    d["branches"][1]["flow_limit"] = limit
    return case_from_dict(d)


# -- config ----------------------------------------------------------------------------------

def test_config_validation():
    for bad in ({"epsilon": 0.0}, {"epsilon": -1.0}, {"max_iter": 0}, {"eta_mode": "guess"}):
        with pytest.raises(ValueError):
            HgdConfig(**bad)
    cfg = HgdConfig(variant="modified-dist", start_side="tsp")
    assert cfg.variant is Variant.MODIFIED_DIST and cfg.start_side is StartSide.FROM_TSP
    assert HgdConfig().epsilon == 1e-6 and HgdConfig().max_iter == 50


def test_layout_scalar_counts():
    L = BoundaryLayout((1, 2), (1, 1), ("x",), ("f",))
    assert L.scalars_per_round_trip() == 4
    L = BoundaryLayout((1,), (1,), ("x",), ("f",), send_x=False, send_l=False)
    assert L.scalars_per_round_trip() == 2
    assert L.sent_xi_mask().tolist() == [False, True]


# -- affine fixture ----------------------------------------------------------------------------

def test_affine_basic_converges_geometrically():
    p = affine_half()
    _, tr = run_basic_hgd(p, HgdConfig(epsilon=1e-10))
    assert tr.converged
    assert gap(tr.final_state, p.fixed_point()) <= 1e-9
    assert estimate_rate(tr) == pytest.approx(0.5, abs=0.1)
    assert tr.global_kkt_residual <= 1e-9


def test_affine_spectral_radius_matches_analytic():
    p = affine_half()
    rho = np.abs(np.linalg.eigvals(p.sweep_matrix())).max()
    diag = composite_map_spectral_radius(p, p.fixed_point())
    assert diag.rho == pytest.approx(rho, abs=1e-6)
    assert np.abs(diag.jacobian - p.sweep_matrix()).max() <= 1e-6
    assert diag.reliable


def test_affine_exact_response_two_iterations():
    p = affine_half()
    _, tr = run_modified_hgd_dist(p, HgdConfig(epsilon=1e-10))
    assert tr.converged and tr.n_iter <= 2
    assert gap(tr.final_state, p.fixed_point()) <= 1e-10


def test_zero_response_identical_to_basic():
    _, a = run_basic_hgd(affine_half(), HgdConfig(epsilon=1e-10))
    _, b = run_modified_hgd_dist(affine_half(exact_response=False), HgdConfig(epsilon=1e-10))
    assert a.n_iter == b.n_iter
    assert np.abs(a.states() - b.states()).max() <= 1e-12


def test_loose_tolerance_stops_after_one_iteration():
    _, tr = run_basic_hgd(affine_half(), HgdConfig(epsilon=1e3))
    assert tr.converged and tr.n_iter == 1


def test_max_iter_returns_unconverged_trace():
    _, tr = run_basic_hgd(affine_half(), HgdConfig(epsilon=1e-14, max_iter=3))
    assert not tr.converged and tr.n_iter == 3 and len(tr.residuals) == 3


def test_start_from_transmission_side():
    p = affine_half()
    _, tr = run_basic_hgd(p, HgdConfig(epsilon=1e-10, start_side="tsp"))
    assert tr.converged and gap(tr.final_state, p.fixed_point()) <= 1e-9


def test_two_dso_affine_problem():
    # two boundary buses owned by different DSOs; A block-diagonal over DSOs
    M = np.eye(4) + 0.1 * np.ones((4, 4))
    A = np.zeros((4, 4))
    A[np.ix_([0, 2], [0, 2])] = [[0.3, 0.1], [0.0, 0.2]]
    A[np.ix_([1, 3], [1, 3])] = [[-0.4, 0.0], [0.1, 0.25]]
    p = AffineCoordinatedProblem(M, A, a0=np.array([1.0, -1.0, 0.5, 0.2]), dso_of=(1, 2))
    for run in (run_basic_hgd, run_modified_hgd_dist):
        _, tr = run(p, HgdConfig(epsilon=1e-11))
        assert tr.converged and gap(tr.final_state, p.fixed_point()) <= 1e-9


@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(-0.5, 0.5))
def test_affine_rate_law(a11, a22, a12):
    p = AffineCoordinatedProblem(np.eye(2), np.array([[a11, a12], [0.0, a22]]), a0=np.array([1.0, -1.0]))
    rho = float(np.abs(np.linalg.eigvals(p.sweep_matrix())).max())
    _, tr = run_basic_hgd(p, HgdConfig(epsilon=1e-12, max_iter=200))
    assert tr.converged
    if rho < 0.9 and tr.n_iter >= 6 and tr.residuals[-1] > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RateWarning)
            est = estimate_rate(tr)
        assert abs(est - rho) <= 0.2 * max(rho, 0.05)


# -- rate estimator ---------------------------------------------------------------------------

def test_estimate_rate_halving():
    assert estimate_rate([1, 0.5, 0.25, 0.125]) == pytest.approx(0.5)


def test_estimate_rate_needs_data():
    with pytest.raises(InsufficientDataError):
        estimate_rate([1.0, 0.5, 0.25])
    _, tr = run_basic_hgd(affine_half(), HgdConfig(epsilon=1e3))
    with pytest.raises(InsufficientDataError):
        estimate_rate(tr)


def test_estimate_rate_flags_non_monotone_tail():
    with pytest.warns(RateWarning):
        estimate_rate([1.0, 0.5, 0.6, 0.3])


# -- bundled problems ----------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["b2s1", "feeder_shunt", "ieee14_itd"])
def test_tdpf_matches_centralized(name):
    c = case(name)
    st_, tr = run_tdpf(c, "basic", HgdConfig(epsilon=1e-9))
    ref = solve_centralized_pf(c)
    assert tr.converged
    assert max(abs(st_.voltage(b.id) - ref.voltage(b.id)) for b in c.buses) <= 1e-6
    assert tr.global_kkt_residual <= 1e-8


@pytest.mark.parametrize("name", ["b2s1", "feeder_shunt"])
def test_fixed_point_property(name):
    eps = 1e-8
    p = build_tdpf(case(name))
    _, tr = run_hgd(p, HgdConfig(epsilon=eps))
    for variant in (Variant.BASIC, Variant.MODIFIED_DIST):
        again, _ = composite_sweep(p, tr.final_state, variant)
        assert gap(again, tr.final_state) <= 2 * eps


def test_tdpf_spectral_radius_and_rate():
    c = case("rx_heavy")
    p = build_tdpf(c)
    _, tr = run_hgd(p, HgdConfig(epsilon=1e-10))
    rho = composite_map_spectral_radius(p, tr.final_state).rho
    assert rho < 1
    assert estimate_rate(tr) == pytest.approx(rho, rel=0.2)


def test_ed_spectral_radius_in_price_coordinates():
    p = build_tdced(case("ed_quadratic"))
    _, tr = run_hgd(p, HgdConfig(epsilon=1e-10))
    diag = composite_map_spectral_radius(p, tr.final_state)
    # dummy x is not probed: only the boundary prices
    assert diag.jacobian.shape == (p.layout.nb, p.layout.nb)
    assert diag.rho < 1


@pytest.mark.parametrize("build,name", [(build_tdced, "ed_quadratic"), (build_tdced, "ed_merit"),
                                        (build_tdopf_dc, "opf_asym"), (build_tdopf_dc, "opf_3p1p2")])
def test_variants_agree_and_are_optimal(build, name):
    eps = 1e-8
    finals = []
    for v in Variant:
        _, tr = run_hgd(build(case(name)), HgdConfig(epsilon=eps, variant=v))
        if tr.converged:
            # the stopping rule measures prices in normalized units; compare like with like
            assert tr.global_kkt_residual * tr.lam_scale <= 10 * eps
            finals.append(tr.final_state)
    assert len(finals) >= 2
    for f in finals[1:]:
        assert gap(f, finals[0]) <= 10 * eps


def test_trans_variant_not_slower_than_basic():
    c = case("ed_quadratic")
    _, _, basic = run_tdced(c, "basic", HgdConfig(epsilon=1e-8))
    _, _, trans = run_tdced(c, "modified-trans", HgdConfig(epsilon=1e-8))
    assert trans.converged and trans.n_iter <= basic.n_iter


def test_secant_slope_reaches_same_optimum():
    c = case("ed_quadratic")
    a, _, ta = run_tdced(c, "modified-trans", HgdConfig(epsilon=1e-10), eta_mode="sensitivity")
    b, _, tb = run_tdced(c, "modified-trans", HgdConfig(epsilon=1e-10), eta_mode="secant")
    assert ta.converged and tb.converged
    assert gap(ta.final_state, tb.final_state) <= 1e-6


def test_trans_variant_on_opf():
    _, _, tr = run_tdopf_dc(case("opf_asym"), "modified-trans", HgdConfig(epsilon=1e-8))
    assert tr.converged and tr.global_kkt_residual * tr.lam_scale <= 1e-7


# -- elastic slacks ---------------------------------------------------------------------------------

def test_tight_feeder_fails_without_slacks():
    with pytest.raises(SubproblemError) as info:
        run_tdced(ed_tight())
    assert info.value.iteration == 1 and "DSO 1" in str(info.value)


def test_slack_carries_the_shortfall():
    prev = np.inf
    for pen in (1e2, 1e3, 1e4, 1e5, 1e6):
        _, tr = run_hgd(wrap_with_elastic_slacks(build_tdced(ed_tight()), pen), HgdConfig())
        assert tr.converged
        s = tr.iterations[-1].slack
        assert s == pytest.approx(0.2, abs=1e-9)   # load 1.0 - local gen 0.5 - feeder 0.3
        assert s <= prev + 1e-12
        prev = s


def test_slacks_idle_on_feasible_problem():
    c = case("ed_congested")
    _, wrapped = run_hgd(wrap_with_elastic_slacks(build_tdced(c), 1e3), HgdConfig())
    _, _, plain = run_tdced(c)
    assert wrapped.total_slack() == 0.0
    assert gap(wrapped.final_state, plain.final_state) <= 1e-9


def test_penalty_must_be_positive():
    with pytest.raises(ValueError):
        wrap_with_elastic_slacks(affine_half(), 0.0)


# -- trace output -------------------------------------------------------------------------------------

def test_trace_csv_and_json():
    _, tr = run_basic_hgd(affine_half(), HgdConfig(epsilon=1e-8))
    rows = list(csv.reader(io.StringIO(tr.to_csv())))
    assert rows[0] == ["k", "residual", "status", "ms"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, tr.n_iter + 1))
    assert [float(r[1]) for r in rows[1:]] == tr.residuals.tolist()
    d = json.loads(tr.to_json())
    assert d["converged"] and d["iterations"] == tr.n_iter and d["variant"] == "basic"
    assert len(d["trace"]) == tr.n_iter and "lambda_MB" in d["trace"][0]


def test_deterministic_csv_is_reproducible():
    runs = [run_tdpf(case("b2s1"), "modified-dist")[1].to_csv_deterministic() for _ in range(2)]
    assert runs[0] == runs[1]
    assert "ms" not in runs[0].splitlines()[0]


def test_response_merge_in_boundary_order():
    L = BoundaryLayout((10, 20, 30), (2, 1, 2), ("x",), ("f",))
    parts = [(L.columns(1), BoundaryResponse(np.array([[1.0]]), np.array([[-1.0]]))),
             (L.columns(2), BoundaryResponse(np.array([[2.0, 3.0]]), np.array([[-2.0, -3.0]])))]
    out = BoundaryResponse.merge(parts, L)
    assert out.f.tolist() == [[2.0, 1.0, 3.0]] and out.l.tolist() == [[-2.0, -1.0, -3.0]]


def test_trans_without_slope_is_basic():
    # the affine sides have no price sensitivity and ignore the correction: b = 0, B = 0
    _, a = run_basic_hgd(affine_half(), HgdConfig(epsilon=1e-10))
    _, b = run_modified_hgd_trans(affine_half(), HgdConfig(epsilon=1e-10))
    assert a.n_iter == b.n_iter
    assert np.abs(a.states() - b.states()).max() <= 1e-12
    assert len([n for n in b.notes if "secant used" in n]) == 1
