import copy
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import case
from tdcoord.model import (Branch, Bus, BusKind, CaseParseError, CaseValidationError, IslandingError, Subsystem,
                           apply_contingency, assemble_admittance, branch_admittance, build_admittance,
                           bundled_case_names, bundled_case_path, case_from_dict, case_to_dict, check_case,
                           load_case, rebase, scale_loads, slave_components, tso_view, dso_view,
                           validate_partition)

VALID = [n for n in bundled_case_names() if n != "broken"]


def b2s1_dict():
    return json.loads(bundled_case_path("b2s1").read_text())


def with_branch(d, **kw):
    d = copy.deepcopy(d)
    br = {"id": 99, "from": 1, "to": 4, "r": 0.01, "x": 0.1}
    br.update(kw)
    d["branches"].append(br)
    return d


# -- loading --------------------------------------------------------------------------

def test_b2s1_shape():
    c = case("b2s1")
    assert len(c.buses) == 4 and len(c.branches) == 3
    assert c.master_ids == (1, 2) and c.boundary == (3,) and c.slave_ids == (4,)
    assert c.dsos == (1,)


def test_round_trip_through_dict():
    for name in VALID:
        c = case(name)
        again = case_from_dict(case_to_dict(c), name)
        assert again.buses == c.buses
        assert again.branches == c.branches
        assert again.generators == c.generators
        for m, n in zip(c.measurements, again.measurements):
            assert (m.kind, m.bus, m.branch) == (n.kind, n.bus, n.branch)
            assert n.value == pytest.approx(m.value, abs=1e-15)
        assert again.boundary == c.boundary and again.dso_assignment == c.dso_assignment


def test_angles_stored_in_radians():
    d = b2s1_dict()
    d["buses"][1]["v_ang"] = 30.0
    c = case_from_dict(d)
    assert c.bus(2).v_ang == pytest.approx(math.pi / 6)


def test_empty_bus_list_has_no_slack():
    with pytest.raises(CaseValidationError, match="no slack bus"):
        case_from_dict({"buses": []})


def test_master_slave_branch_names_fact2():
    with pytest.raises(CaseValidationError, match="Fact 2") as info:
        case_from_dict(with_branch(b2s1_dict()))
    assert info.value.violations[0].branch == 99


def test_bundled_broken_case_rejected():
    with pytest.raises(CaseValidationError, match="branch"):
        load_case(bundled_case_path("broken"))


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(CaseParseError):
        load_case(p)
    p.write_text("[]")
    with pytest.raises(CaseParseError):
        load_case(p)


def test_invariant_checks_are_named():
    d = b2s1_dict()
    d["branches"][0]["x"] = 0.0
    with pytest.raises(CaseValidationError, match="zero reactance"):
        case_from_dict(d)
    d = b2s1_dict()
    d["generators"][0]["cost_c2"] = -1.0
    with pytest.raises(CaseValidationError, match="concave"):
        case_from_dict(d)
    d = b2s1_dict()
    d["generators"].append({"bus": 3, "p": 0.1})
    with pytest.raises(CaseValidationError, match="owner"):
        case_from_dict(d)
    d["generators"][-1]["owner"] = "dso"
    assert case_from_dict(d).generator_side(case_from_dict(d).generators[-1]) is Subsystem.SLAVE


# -- partition --------------------------------------------------------------------------

def test_valid_cases_have_empty_report():
    for name in VALID:
        assert validate_partition(case(name)) == []
        assert check_case(case(name)) == []


def test_second_slack_in_one_island_reported():
    c = case("b2s1")
    b2 = next(b for b in c.buses if b.id == 2)
    bad = replace(c, buses=tuple(replace(b, kind=BusKind.SLACK) if b is b2 else b for b in c.buses))
    assert [v.kind for v in check_case(bad)] == ["slack"]


def test_fact2_violation_report_names_branch():
    c = case("b2s1")
    bad = replace(c, branches=c.branches + (Branch(99, 1, 4, 0.01, 0.1),))
    rep = validate_partition(bad)
    assert len(rep) == 1 and rep[0].branch == 99 and "Fact 2" in rep[0].message


def test_two_dso_attachment_reported():
    c = case("b2s1")
    # second boundary bus 5 owned by DSO 2, tied to the same slave bus 4
    bad = replace(c, buses=c.buses + (Bus(5, Subsystem.BOUNDARY),),
                  branches=c.branches + (Branch(98, 2, 5, 0.01, 0.1), Branch(99, 5, 4, 0.01, 0.1)),
                  boundary_ids=(3, 5), dso_assignment={3: 1, 5: 2})
    rep = validate_partition(bad)
    assert [v.kind for v in rep] == ["attachment"]


def _cut_holds(c) -> bool:
    """Breadth-first search from the master side that never enters the boundary."""
    master, slave, bnd = set(c.master_ids), set(c.slave_ids), set(c.boundary)
    adj = {b.id: set() for b in c.buses}
    for br in c.active_branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    seen, stack = set(master), list(master)
    while stack:
        for j in adj[stack.pop()] - bnd - seen:
            seen.add(j)
            stack.append(j)
    return not (seen & slave)


def test_cut_property_on_every_bundled_case():
    for name in VALID:
        assert _cut_holds(case(name)), name


def test_slave_components_attach_to_one_dso():
    for name in VALID:
        c = case(name)
        for comp, attached in slave_components(c):
            assert len({c.dso_assignment[b] for b in attached}) == 1


# -- admittance -------------------------------------------------------------------------

def test_single_line_admittance():
    Y = assemble_admittance([1, 2], [Branch(1, 1, 2, 0.0, 0.1)])
    y = 1 / 0.1j
    assert np.allclose(Y, [[y, -y], [-y, y]], atol=1e-14)


def test_tap_and_charging():
    yff, yft, ytf, ytt = branch_admittance(Branch(1, 1, 2, 0.01, 0.1, b_charging=0.2, tap=0.95))
    y = 1 / complex(0.01, 0.1)
    assert yff == pytest.approx((y + 0.1j) / 0.95 ** 2)
    assert yft == ytf == pytest.approx(-y / 0.95)
    assert ytt == pytest.approx(y + 0.1j)


def _shunt_free(c):
    return all(b.shunt_g == 0 == b.shunt_b for b in c.buses) and all(
        br.b_charging == 0 and br.tap == 1 for br in c.branches)


def test_row_sums_vanish_without_shunts():
    found = 0
    for name in VALID:
        c = case(name)
        if _shunt_free(c):
            Y = build_admittance(c).Y
            assert np.abs(Y.sum(axis=1)).max() <= 1e-12
            found += 1
    assert found >= 2


def test_b2s1_blocks_match_hand_assembly():
    c = case("b2s1")
    blocks = build_admittance(c)
    y12 = 1 / complex(0.01, 0.05)
    y23 = 1 / complex(0.01, 0.04)
    y34 = 1 / complex(0.01, 0.02)
    Y = np.array([
        [y12 + 0.01j, -y12, 0, 0],
        [-y12, y12 + 0.01j + y23 + 0.01j, -y23, 0],
        [0, -y23, y23 + 0.01j + y34, -y34],
        [0, 0, -y34, y34]])
    assert np.abs(blocks.Y - Y).max() <= 1e-12
    assert np.abs(blocks.Y_MS).max(initial=0) == 0
    assert blocks.Y_BS.shape == (1, 1) and blocks.Y_BS[0, 0] == pytest.approx(-y34)
    assert blocks.Y_BB_slave[0, 0] == pytest.approx(y34)


def test_admittance_symmetric_without_phase_shift():
    for name in VALID:
        Y = build_admittance(case(name)).Y
        assert np.abs(Y - Y.T).max() <= 1e-12


# -- contingencies, scaling and bases -----------------------------------------------------------

def test_contingency_keeps_buses():
    c = case("ieee14_itd")
    for br in c.contingencies:
        out = apply_contingency(c, br)
        assert [b.id for b in out.buses] == [b.id for b in c.buses]
        assert not out.branch(br).in_service
        assert validate_partition(out) == []


def test_contingency_on_radial_boundary_line_islands():
    with pytest.raises(IslandingError):
        apply_contingency(case("b2s1"), 3)


def test_contingency_errors():
    with pytest.raises(KeyError):
        apply_contingency(case("b2s1"), 42)
    out = apply_contingency(case("ieee14_itd"), 1)
    with pytest.raises(ValueError):
        apply_contingency(out, 1)


def test_scale_loads_keeps_power_factor():
    c = case("b2s1")
    s = scale_loads(c, 0.5)
    for a, b in zip(c.buses, s.buses):
        k = 1 + 0.5 * c.load_direction.get(a.id, 0.0)
        assert b.p_load == pytest.approx(a.p_load * k) and b.q_load == pytest.approx(a.q_load * k)


def test_rebase_identity_and_scaling():
    c = case("ed_quadratic")
    assert rebase(c, c.base_mva) is c
    r = rebase(c, 10.0)
    for a, b in zip(c.buses, r.buses):
        assert b.p_load == pytest.approx(10 * a.p_load)
    for a, b in zip(c.branches, r.branches):
        assert b.x == pytest.approx(a.x / 10)
    with pytest.raises(ValueError):
        rebase(c, 0.0)


def _max_field_gap(a, b) -> float:
    gap = 0.0
    for xs, ys in ((a.buses, b.buses), (a.branches, b.branches), (a.generators, b.generators),
                   (a.measurements, b.measurements)):
        for x, y in zip(xs, ys):
            for f in x.__dataclass_fields__:
                u, v = getattr(x, f), getattr(y, f)
                if isinstance(u, float) and math.isfinite(u):
                    gap = max(gap, abs(u - v) / max(1.0, abs(u)))
    return gap


@given(st.sampled_from(VALID), st.floats(1.0, 1000.0))
def test_rebase_round_trip(name, base):
    c = case(name)
    assert _max_field_gap(c, rebase(rebase(c, base), c.base_mva)) <= 1e-12


def test_dso_base_reconciled_onto_master_base():
    d = b2s1_dict()
    d["dso_base_mva"] = {"1": 10.0}
    c = case_from_dict(d)
    ref = case("b2s1")
    assert c.bus(4).p_load == pytest.approx(0.1 * ref.bus(4).p_load)
    assert c.branch(3).x == pytest.approx(10 * ref.branch(3).x)
    assert c.bus(2).p_load == ref.bus(2).p_load


# -- operator views ------------------------------------------------------------------------------

def test_views_split_the_data():
    c = case("ieee14_itd")
    t = tso_view(c)
    assert not (set(b.id for b in t.buses) & set(c.slave_ids))
    for d in c.dsos:
        v = dso_view(c, d)
        ids = {b.id for b in v.buses}
        assert not ids & set(c.master_ids)
        assert ids == set(c.dso_boundary(d)) | set(c.dso_slave_ids(d))
        assert all(v.bus(b).p_load == 0 for b in v.boundary)


def test_bus_kind_parsing_is_case_insensitive():
    d = b2s1_dict()
    d["buses"][0]["kind"] = "SLACK"
    assert case_from_dict(d).bus(1).kind is BusKind.SLACK
