"""Regenerate the bundled case files under src/tdcoord/cases.

Run from the repository root:  python tools/build_cases.py
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "tdcoord" / "cases"


def bus(i, sub, kind="pq", p=0.0, q=0.0, vm=1.0, va=0.0, g=0.0, b=0.0, owner=None):
    d = {"id": i, "subsystem": sub, "kind": kind, "v_mag": vm, "v_ang": va,
         "p_load": p, "q_load": q, "shunt_g": g, "shunt_b": b}
    if owner:
        d["shunt_owner"] = owner
    return d


def line(i, f, t, r, x, b=0.0, tap=1.0, limit=None, status=1):
    d = {"id": i, "from": f, "to": t, "r": r, "x": x, "b_charging": b, "tap": tap, "status": status}
    if limit is not None:
        d["flow_limit"] = limit
    return d


def gen(busid, p=0.0, q=0.0, pmin=0.0, pmax=0.0, qmin=-9.0, qmax=9.0, c2=0.0, c1=0.0, c0=0.0, owner=None):
    d = {"bus": busid, "p": p, "q": q, "p_min": pmin, "p_max": pmax, "q_min": qmin, "q_max": qmax,
         "cost_c2": c2, "cost_c1": c1, "cost_c0": c0}
    if owner:
        d["owner"] = owner
    return d


def case(name, buses, branches, gens, boundary, assignment, **extra):
    d = {"name": name, "base_mva": 100.0, "buses": buses, "branches": branches,
         "generators": gens, "boundary": boundary,
         "dso_assignment": {str(k): v for k, v in assignment.items()}}
    d.update(extra)
    return d


def b2s1():
    return case(
        "b2s1",
        [bus(1, "master", "slack", vm=1.02), bus(2, "master", p=0.3, q=0.1),
         bus(3, "boundary", p=0.05, q=0.02), bus(4, "slave", p=0.1, q=0.05)],
        [line(1, 1, 2, 0.01, 0.05, 0.02), line(2, 2, 3, 0.01, 0.04, 0.02),
         line(3, 3, 4, 0.01, 0.02)],
        [gen(1, pmax=2.0, c1=10.0)],
        [3], {3: 1},
        contingencies=[1], load_direction={"2": 1.0, "3": 1.0, "4": 1.0},
    )


def _feeder_master():
    buses = [bus(1, "master", "slack", vm=1.03), bus(2, "master", "pv", p=0.2, vm=1.01),
             bus(3, "master", p=0.4, q=0.15), bus(4, "boundary", p=0.05, q=0.02)]
    branches = [line(1, 1, 2, 0.01, 0.06, 0.03), line(2, 1, 3, 0.02, 0.08, 0.02),
                line(3, 2, 3, 0.015, 0.07, 0.02), line(4, 3, 4, 0.01, 0.05, 0.01),
                line(5, 2, 4, 0.02, 0.09, 0.01)]
    gens = [gen(1, pmax=3.0, c1=12.0), gen(2, p=0.5, pmax=1.0, qmin=-1.0, qmax=1.0, c1=20.0)]
    return buses, branches, gens


def feeder_shunt():
    buses, branches, gens = _feeder_master()
    buses += [bus(5, "slave", p=0.06, q=0.02), bus(6, "slave", p=0.08, q=0.03, b=0.06),
              bus(7, "slave", p=0.05, q=0.02), bus(8, "slave", p=0.07, q=0.03, b=0.05)]
    branches += [line(6, 4, 5, 0.02, 0.03, 0.004), line(7, 5, 6, 0.03, 0.04, 0.004),
                 line(8, 6, 7, 0.03, 0.03, 0.002), line(9, 5, 8, 0.04, 0.05, 0.003)]
    return case("feeder_shunt", buses, branches, gens, [4], {4: 1},
                contingencies=[2, 5], load_direction={str(i): 1.0 for i in (3, 5, 6, 7, 8)})


def feeder_radial():
    buses, branches, gens = _feeder_master()
    buses += [bus(5, "slave", p=0.06, q=0.02), bus(6, "slave", p=0.08, q=0.03),
              bus(7, "slave", p=0.05, q=0.02), bus(8, "slave", p=0.07, q=0.03)]
    branches += [line(6, 4, 5, 0.02, 0.03), line(7, 5, 6, 0.03, 0.04),
                 line(8, 6, 7, 0.03, 0.03), line(9, 5, 8, 0.04, 0.05)]
    return case("feeder_radial", buses, branches, gens, [4], {4: 1},
                load_direction={str(i): 1.0 for i in (3, 5, 6, 7, 8)})


IEEE14_BUS = [
    (1, 3, 0.0, 0.0, 0.0, 1.06), (2, 2, 21.7, 12.7, 0.0, 1.045), (3, 2, 94.2, 19.0, 0.0, 1.01),
    (4, 1, 47.8, -3.9, 0.0, 1.0), (5, 1, 7.6, 1.6, 0.0, 1.0), (6, 2, 11.2, 7.5, 0.0, 1.07),
    (7, 1, 0.0, 0.0, 0.0, 1.0), (8, 2, 0.0, 0.0, 0.0, 1.09), (9, 1, 29.5, 16.6, 19.0, 1.0),
    (10, 1, 9.0, 5.8, 0.0, 1.0), (11, 1, 3.5, 1.8, 0.0, 1.0), (12, 1, 6.1, 1.6, 0.0, 1.0),
    (13, 1, 13.5, 5.8, 0.0, 1.0), (14, 1, 14.9, 5.0, 0.0, 1.0),
]
IEEE14_BRANCH = [
    (1, 2, 0.01938, 0.05917, 0.0528, 1.0), (1, 5, 0.05403, 0.22304, 0.0492, 1.0),
    (2, 3, 0.04699, 0.19797, 0.0438, 1.0), (2, 4, 0.05811, 0.17632, 0.0340, 1.0),
    (2, 5, 0.05695, 0.17388, 0.0346, 1.0), (3, 4, 0.06701, 0.17103, 0.0128, 1.0),
    (4, 5, 0.01335, 0.04211, 0.0, 1.0), (4, 7, 0.0, 0.20912, 0.0, 0.978),
    (4, 9, 0.0, 0.55618, 0.0, 0.969), (5, 6, 0.0, 0.25202, 0.0, 0.932),
    (6, 11, 0.09498, 0.19890, 0.0, 1.0), (6, 12, 0.12291, 0.25581, 0.0, 1.0),
    (6, 13, 0.06615, 0.13027, 0.0, 1.0), (7, 8, 0.0, 0.17615, 0.0, 1.0),
    (7, 9, 0.0, 0.11001, 0.0, 1.0), (9, 10, 0.03181, 0.08450, 0.0, 1.0),
    (9, 14, 0.12711, 0.27038, 0.0, 1.0), (10, 11, 0.08205, 0.19207, 0.0, 1.0),
    (12, 13, 0.22092, 0.19988, 0.0, 1.0), (13, 14, 0.17093, 0.34802, 0.0, 1.0),
]
IEEE14_GEN = [(1, 232.4, -9.9, 9.9, 1.06, 0.0430293, 20.0), (2, 40.0, -0.5, 0.5, 1.045, 0.25, 20.0),
              (3, 0.0, -0.4, 0.4, 1.01, 0.01, 40.0), (6, 0.0, -0.3, 0.3, 1.07, 0.01, 40.0),
              (8, 0.0, -0.3, 0.3, 1.09, 0.01, 40.0)]


def ieee14_itd():
    kinds = {1: "pq", 2: "pv", 3: "slack"}
    buses, branches, gens = [], [], []
    for i, t, p, q, bs, vm in IEEE14_BUS:
        # part of the load at buses 13 and 14 moves down into the feeders
        if i == 13:
            p, q = 5.0, 2.0
        if i == 14:
            p, q = 6.0, 2.0
        buses.append(bus(i, "master", kinds[t], p / 100, q / 100, vm=vm, b=bs / 100))
    for k, (f, t, r, x, b, tap) in enumerate(IEEE14_BRANCH, start=1):
        branches.append(line(k, f, t, r, x, b, tap))
    for i, p, qmin, qmax, vm, c2, c1 in IEEE14_GEN:
        pmax = 3.3 if i == 1 else 1.0
        gens.append(gen(i, p / 100 if i != 1 else 0.0, pmax=pmax, qmin=qmin, qmax=qmax, c2=c2 * 100, c1=c1))
    # boundary substations
    buses += [bus(101, "boundary", p=0.01), bus(201, "boundary", p=0.01)]
    branches += [line(21, 13, 101, 0.0, 0.08, 0.0, 1.0), line(22, 14, 201, 0.0, 0.09, 0.0, 1.0),
                 line(23, 12, 101, 0.02, 0.12, 0.0)]
    # DSO 1 feeder, on the master base
    f1 = [(102, 0.02, 0.008), (103, 0.015, 0.006), (104, 0.02, 0.01), (105, 0.01, 0.004), (106, 0.015, 0.005)]
    for i, p, q in f1:
        buses.append(bus(i, "slave", p=p, q=q))
    branches += [line(31, 101, 102, 0.02, 0.04, 0.001), line(32, 102, 103, 0.03, 0.05),
                 line(33, 103, 104, 0.03, 0.04), line(34, 102, 105, 0.04, 0.06),
                 line(35, 105, 106, 0.05, 0.05)]
    # DSO 2 feeder, given on its own 10 MVA base (loads x10, impedances /10 relative to 100 MVA)
    f2 = [(202, 0.15, 0.05), (203, 0.2, 0.08), (204, 0.1, 0.04), (205, 0.12, 0.05),
          (206, 0.08, 0.03), (207, 0.1, 0.04)]
    for i, p, q in f2:
        buses.append(bus(i, "slave", p=p, q=q, b=0.02 if i == 204 else 0.0))
    branches += [line(41, 201, 202, 0.002, 0.004), line(42, 202, 203, 0.003, 0.004),
                 line(43, 203, 204, 0.004, 0.005), line(44, 202, 205, 0.003, 0.005),
                 line(45, 205, 206, 0.004, 0.004), line(46, 206, 207, 0.003, 0.003)]
    gens.append(gen(206, p=0.1, pmax=0.2, qmin=0.0, qmax=0.0, c1=30.0))
    return case("ieee14_itd", buses, branches, gens, [101, 201], {101: 1, 201: 2},
                dso_base_mva={"2": 10.0}, contingencies=[1, 7, 13, 20, 23],
                load_direction={str(b["id"]): 1.0 for b in buses})


def broken():
    c = b2s1()
    c["name"] = "broken"
    c["branches"].append(line(4, 2, 4, 0.01, 0.03))
    return c


def rx_heavy():
    """High R/X feeder with capacitor banks and line charging behind a weak tie."""
    xm = 0.2
    buses = [bus(1, "master", "slack", vm=1.0), bus(2, "master", p=0.2, q=0.05), bus(3, "boundary")]
    branches = [line(1, 1, 2, 0.01, xm), line(2, 2, 3, 0.01, xm), line(3, 1, 3, 0.01, 1.5 * xm)]
    for i in range(4, 9):
        buses.append(bus(i, "slave", p=0.15, q=0.045, b=0.05))
    for k, ((f, t), r) in enumerate(zip([(3, 4), (4, 5), (5, 6), (4, 7), (7, 8)],
                                        [0.05, 0.06, 0.05, 0.06, 0.055])):
        branches.append(line(4 + k, f, t, r, 0.02, 0.1))
    return case("rx_heavy", buses, branches, [gen(1, pmax=5.0, c1=10.0)], [3], {3: 1},
                load_direction={str(i): 1.0 for i in range(4, 9)})


def heavy_dps():
    """Heavily loaded, capacitor-compensated feeder behind a high-impedance tie."""
    s = 2.0
    buses = [bus(1, "master", "slack", vm=1.02), bus(2, "master", p=0.1, q=0.03), bus(3, "boundary"),
             bus(4, "slave", p=0.15, q=s / 2, b=s / 2), bus(5, "slave", p=0.15, q=s / 2, b=s / 2)]
    branches = [line(1, 1, 2, 0.01, 0.15), line(2, 2, 3, 0.01, 0.15),
                line(3, 3, 4, 0.01, 0.01), line(4, 4, 5, 0.01, 0.01)]
    return case("heavy_dps", buses, branches, [gen(1, pmax=5.0, c1=10.0)], [3], {3: 1})


def der_rich():
    """Feeder with a voltage-regulating DER and a remote PV plant on a meshed pair of lines."""
    buses = [bus(1, "master", "slack", vm=1.0), bus(2, "master", p=0.3, q=0.1), bus(3, "boundary"),
             bus(4, "slave", "pv", p=1.6, q=0.64, vm=0.98), bus(5, "slave", p=0.1, q=0.03),
             bus(6, "slave")]
    branches = [line(1, 1, 2, 0.01, 0.05), line(2, 1, 3, 0.02, 0.5), line(3, 1, 3, 0.02, 0.5),
                line(4, 2, 3, 0.02, 0.6), line(5, 3, 4, 0.01, 0.08), line(6, 3, 5, 0.02, 0.04),
                line(7, 5, 6, 0.15, 0.03), line(8, 5, 6, 0.15, 0.03)]
    gens = [gen(1, pmax=5.0, c1=10.0), gen(4, pmax=0.2, qmin=-1.5, qmax=1.5, c1=0.0),
            gen(6, p=0.6, pmin=0.6, pmax=0.6, qmin=0.0, qmax=0.0)]
    return case("der_rich", buses, branches, gens, [3], {3: 1}, contingencies=[2, 8],
                load_direction={"2": 1.0, "4": 1.0, "5": 1.0})


def _ed_base(name, link_limit=None):
    buses = [bus(1, "master", "slack", vm=1.0), bus(2, "boundary"), bus(3, "slave", p=1.0, q=0.2)]
    branches = [line(1, 1, 2, 0.0, 0.1), line(2, 2, 3, 0.0, 0.1, limit=link_limit)]
    gens = [gen(1, pmax=2.0, c1=10.0), gen(3, pmax=0.5, c1=30.0)]
    return case(name, buses, branches, gens, [2], {2: 1})


def ed_merit():
    return _ed_base("ed_merit")


def ed_congested():
    return _ed_base("ed_congested", link_limit=0.6)


def ed_quadratic():
    """Two DSOs and quadratic costs everywhere, so the boundary price responds to the interchange."""
    buses = [bus(1, "master", "slack", vm=1.02), bus(2, "master", "pv", vm=1.01), bus(3, "master", p=0.8, q=0.2),
             bus(4, "boundary", p=0.05), bus(5, "boundary", p=0.05),
             bus(6, "slave", p=0.4, q=0.1), bus(7, "slave", p=0.3, q=0.1),
             bus(8, "slave", p=0.5, q=0.15), bus(9, "slave", p=0.2, q=0.05)]
    branches = [line(1, 1, 2, 0.01, 0.1), line(2, 1, 3, 0.01, 0.12), line(3, 2, 3, 0.01, 0.1),
                line(4, 3, 4, 0.01, 0.08), line(5, 2, 5, 0.01, 0.09),
                line(6, 4, 6, 0.02, 0.05), line(7, 6, 7, 0.02, 0.05),
                line(8, 5, 8, 0.02, 0.05), line(9, 8, 9, 0.02, 0.05)]
    gens = [gen(1, pmax=3.0, c2=4.0, c1=10.0), gen(2, p=0.5, pmax=2.0, c2=6.0, c1=11.0),
            gen(6, pmax=0.3, c2=8.0, c1=12.0), gen(9, pmax=0.4, c2=5.0, c1=15.0)]
    return case("ed_quadratic", buses, branches, gens, [4, 5], {4: 1, 5: 2})


def opf_3p1p2():
    """Three master buses, one boundary bus, two slave buses; quadratic costs, one limit."""
    buses = [bus(1, "master", "slack", vm=1.0), bus(2, "master", "pv", vm=1.0), bus(3, "master", p=0.9, q=0.2),
             bus(4, "boundary", p=0.1), bus(5, "slave", p=0.5, q=0.1), bus(6, "slave", p=0.3, q=0.1)]
    branches = [line(1, 1, 2, 0.01, 0.1), line(2, 1, 3, 0.01, 0.1, limit=0.7), line(3, 2, 3, 0.01, 0.1),
                line(4, 3, 4, 0.01, 0.1), line(5, 2, 4, 0.01, 0.15),
                line(6, 4, 5, 0.02, 0.05), line(7, 5, 6, 0.02, 0.05)]
    gens = [gen(1, pmax=2.0, c2=2.0, c1=10.0), gen(2, pmax=1.5, c2=3.0, c1=20.0),
            gen(6, pmax=0.4, c2=4.0, c1=15.0)]
    return case("opf_3p1p2", buses, branches, gens, [4], {4: 1})


def opf_asym():
    """One DSO reaching the grid through two boundary buses with different prices."""
    buses = [bus(1, "master", "slack", vm=1.0), bus(2, "master", p=0.5, q=0.1),
             bus(3, "boundary"), bus(4, "boundary"), bus(5, "slave", p=1.0, q=0.2)]
    branches = [line(1, 1, 2, 0.01, 0.1, limit=0.3), line(2, 1, 3, 0.01, 0.1), line(3, 2, 4, 0.01, 0.1),
                line(4, 3, 5, 0.02, 0.3), line(5, 4, 5, 0.02, 0.3)]
    gens = [gen(1, pmax=3.0, c2=1.0, c1=10.0), gen(2, pmax=2.0, c2=1.0, c1=30.0),
            gen(5, pmax=0.3, c2=2.0, c1=25.0)]
    return case("opf_asym", buses, branches, gens, [3, 4], {3: 1, 4: 1})


def _se_network():
    buses = [bus(1, "master", "slack", vm=1.0), bus(2, "master"), bus(3, "master"), bus(4, "master"),
             bus(5, "boundary"), bus(6, "boundary"),
             bus(7, "slave"), bus(8, "slave"), bus(9, "slave"),
             bus(10, "slave"), bus(11, "slave")]
    branches = [line(1, 1, 2, 0.01, 0.06), line(2, 1, 3, 0.01, 0.08), line(3, 2, 3, 0.01, 0.05),
                line(4, 2, 4, 0.01, 0.07), line(5, 3, 4, 0.01, 0.09), line(6, 3, 5, 0.01, 0.1),
                line(7, 4, 6, 0.01, 0.12),
                line(8, 5, 7, 0.02, 0.05), line(9, 7, 8, 0.02, 0.04), line(10, 7, 9, 0.02, 0.06),
                line(11, 6, 10, 0.02, 0.05), line(12, 10, 11, 0.02, 0.04)]
    inj = {2: -0.3, 3: -0.4, 4: 0.5, 5: -0.05, 6: -0.05, 7: -0.2, 8: -0.15, 9: -0.1, 10: 0.1, 11: -0.25}
    return buses, branches, inj


def _dc_truth(buses, branches, inj):
    ids = [b["id"] for b in buses]
    pos = {b: i for i, b in enumerate(ids)}
    B = np.zeros((len(ids), len(ids)))
    for br in branches:
        i, j, b = pos[br["from"]], pos[br["to"]], 1.0 / br["x"]
        B[i, i] += b
        B[j, j] += b
        B[i, j] -= b
        B[j, i] -= b
    P = np.array([inj.get(b, 0.0) for b in ids])
    th = np.zeros(len(ids))
    th[1:] = np.linalg.solve(B[1:, 1:], P[1:])
    return ids, pos, B, th


def se_case(name, noise):
    buses, branches, inj = _se_network()
    ids, pos, B, th = _dc_truth(buses, branches, inj)
    rng = np.random.default_rng(7)
    meas = []

    def add(kind, value, sigma, **where):
        v = value + (sigma * rng.standard_normal() if noise else 0.0)
        if kind == "angle":
            v, sigma = math.degrees(v), math.degrees(sigma)
        meas.append({"id": len(meas) + 1, "kind": kind, "value": v, "sigma": sigma, **where})

    for b in ids:
        if b != 1:
            add("injection", float(B[pos[b]] @ th), 0.01, bus=b)
    for br in branches:
        f = (th[pos[br["from"]]] - th[pos[br["to"]]]) / br["x"]
        add("flow", float(f), 0.008, branch=br["id"])
    for b in (2, 8, 11):
        add("angle", float(th[pos[b]]), 0.002, bus=b)
    # the data section carries loads so the case is also a valid power flow case
    for bd in buses:
        p = -inj.get(bd["id"], 0.0)
        if p > 0:
            bd["p_load"] = p
    gens = [gen(1, pmax=5.0, c1=10.0), gen(4, p=0.5, pmax=1.0, c1=20.0),
            gen(10, p=0.1, pmax=0.2, qmin=0.0, qmax=0.0, c1=25.0)]
    return case(name, buses, branches, gens, [5, 6], {5: 1, 6: 2}, measurements=meas)


def se_noisy():
    return se_case("se_noisy", noise=True)


def se_exact():
    return se_case("se_exact", noise=False)


ALL = {
    "b2s1": b2s1, "feeder_shunt": feeder_shunt, "feeder_radial": feeder_radial,
    "ieee14_itd": ieee14_itd, "broken": broken, "rx_heavy": rx_heavy, "heavy_dps": heavy_dps,
    "der_rich": der_rich, "ed_merit": ed_merit, "ed_congested": ed_congested,
    "ed_quadratic": ed_quadratic, "opf_3p1p2": opf_3p1p2, "opf_asym": opf_asym,
    "se_noisy": se_noisy, "se_exact": se_exact,
}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, fn in ALL.items():
        (OUT / f"{name}.json").write_text(json.dumps(fn(), indent=1) + "\n")
        print("wrote", name)


if __name__ == "__main__":
    main()
