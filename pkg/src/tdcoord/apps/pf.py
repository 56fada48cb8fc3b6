"""Coordinated AC power flow, contingency screening and loading margin.

The TSO solves the master network with each boundary bus as a PQ bus whose
injection toward the slave side is specified; each DSO solves its slave
network with its boundary buses held at the voltages received from the TSO.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..acpf import (BoundaryInjection, PfState, PowerFlowError, central_network, compute_fbs,
                    master_network, max_mismatch, slave_network, slave_response_matrix,
                    solve_centralized_pf, solve_master_pf, solve_slave_pf)
from ..equivalencing import EquivalencingError, case_equivalent
from ..hgd import (BoundaryLayout, BoundaryResponse, BoundaryState, CoordinatedProblem,
                   DistCorrection, DsoResult, DsoSide, EquivalentResponse, HgdConfig, HgdTrace,
                   LinearResponse, SubproblemError, TsoResult, TsoSide, Variant, run_hgd)
from ..kkt import SingularMatrixError, SolverError
from ..model import (CaseValidationError, IslandingError, ItdCase, Subsystem, apply_contingency,
                     dso_view, scale_loads, slave_components, tso_view)

PF_X = ("vm", "va")
PF_F = ("p", "q")


def pf_layout(case: ItdCase) -> BoundaryLayout:
    return BoundaryLayout(case.boundary, tuple(case.dso_assignment[b] for b in case.boundary),
                          PF_X, PF_F, send_x=True, send_lam=False, send_f=True, send_l=False)


def _voltages(x: np.ndarray) -> np.ndarray:
    return x[0] * np.exp(1j * x[1])


class PfTsoSide(TsoSide):
    """Master network solve; built from the TSO's view of the case only."""

    def __init__(self, tso_case: ItdCase, warm: PfState | None = None):
        self.case = tso_case
        self.warm = warm

    def solve(self, y: BoundaryResponse, correction: DistCorrection | None = None) -> TsoResult:
        f_sp = BoundaryInjection(y.f[0].copy(), y.f[1].copy())
        y_eq = None
        corr = None
        if correction is not None:
            y_eq = correction.response.y_eq
            if y_eq is None:
                corr = _pf_correction(correction)
        xm, xb = solve_master_pf(self.case, f_sp, y_eq=y_eq, correction=corr, warm=self.warm)
        nb = len(self.case.boundary)
        xi = BoundaryState(np.vstack([xb.v_mag, xb.v_ang]), np.zeros((2, nb)))
        return TsoResult(xi, detail=(xm, xb, f_sp))


def _pf_correction(correction: DistCorrection):
    const, Dx = correction.affine_in_x()
    nb = correction.xi_prev.x.shape[1]
    cf = const[:2 * nb]
    Df = Dx[:2 * nb]
    dm = Df[:nb, :nb] + 1j * Df[nb:, :nb]
    da = Df[:nb, nb:] + 1j * Df[nb:, nb:]

    def corr(vm, va):
        a = cf + Df @ np.concatenate([vm, va])
        return a[:nb] + 1j * a[nb:], dm, da

    return corr


class PfDsoSide(DsoSide):
    """Slave network solve for one DSO; built from that DSO's view only.

    response_mode selects the distribution-response function offered to the
    TSO: "equivalent" (static network equivalent, needs one boundary bus per
    slave component) or "sensitivity" (implicit derivative of f_BS).
    """

    def __init__(self, dso_case: ItdCase, dso: int, response_mode: str = "equivalent",
                 warm: PfState | None = None):
        self.case = dso_case
        self.dso = dso
        self.warm = warm
        if response_mode not in ("equivalent", "sensitivity"):
            raise ValueError(f"unknown response mode {response_mode!r}")
        self.mode = response_mode
        self.y_eq = None
        if response_mode == "equivalent":
            if all(len(att) == 1 for _, att in slave_components(dso_case)):
                self.y_eq = case_equivalent(dso_case).y_eq
            else:
                self.mode = "sensitivity"

    def solve(self, xi, trans=None, want_response=False) -> DsoResult:
        v_B = _voltages(xi.x)
        x_S = solve_slave_pf(self.case, v_B, warm=self.warm)
        f = compute_fbs(self.case, v_B, x_S)
        nb = v_B.size
        y = BoundaryResponse(np.vstack([f.p, f.q]), np.zeros((2, nb)))
        resp = None
        status = "ok"
        if want_response:
            if self.mode == "equivalent":
                resp = EquivalentResponse(self.y_eq)
            else:
                D = np.zeros((4 * nb, 4 * nb))
                try:
                    D[:2 * nb, :2 * nb] = slave_response_matrix(self.case, v_B, x_S)
                except (SingularMatrixError, PowerFlowError):
                    status = "response-degenerate"
                resp = LinearResponse(D, 2, 2)
        return DsoResult(y, detail=(v_B, x_S), response=resp, status=status)


class TdpfProblem(CoordinatedProblem):
    def __init__(self, case: ItdCase | None, tso: TsoSide, dsos: dict[int, DsoSide],
                 layout: BoundaryLayout, initial: BoundaryState | None = None):
        self.case = case
        self.tso = tso
        self.dsos = dsos
        self.layout = layout
        self._initial = initial

    def initial_state(self):
        if self._initial is not None:
            return self._initial
        nb = self.layout.nb
        return BoundaryState(np.vstack([np.ones(nb), np.zeros(nb)]), np.zeros((2, nb)))

    def assemble(self, tso_result, dso_results):
        xm, xb, _ = tso_result.detail
        parts = [xm, xb]
        for r in dso_results.values():
            parts.append(r.detail[1])
        order = self.case.bus_order if self.case is not None else None
        if order is None:
            return PfState.merge(*parts)
        return PfState.merge(*parts, order=order)

    def global_kkt_residual(self, solution):
        if self.case is None:
            return None
        return max_mismatch(self.case, solution)


def build_tdpf(case: ItdCase, response_mode: str = "equivalent",
               warm: PfState | None = None) -> TdpfProblem:
    layout = pf_layout(case)
    tso = PfTsoSide(tso_view(case), warm)
    dsos = {d: PfDsoSide(dso_view(case, d), d, response_mode, warm) for d in layout.dsos}
    initial = None
    if warm is not None:
        initial = BoundaryState(np.vstack([[warm.v_mag[warm.index(b)] for b in case.boundary],
                                           [warm.v_ang[warm.index(b)] for b in case.boundary]]),
                                np.zeros((2, layout.nb)))
    return TdpfProblem(case, tso, dsos, layout, initial)


def _variant(v) -> Variant:
    if v in ("modified", None):
        return Variant.MODIFIED_DIST if v == "modified" else Variant.BASIC
    return Variant(v)


def run_tdpf(case: ItdCase, variant: Variant | str = Variant.BASIC, cfg: HgdConfig | None = None,
             response_mode: str = "equivalent",
             warm: PfState | None = None) -> tuple[PfState, HgdTrace]:
    cfg = cfg or HgdConfig()
    v = _variant(variant)
    p = build_tdpf(case, response_mode, warm)
    cfg = HgdConfig(cfg.epsilon, cfg.max_iter, v, cfg.start_side, cfg.initial_state,
                    cfg.initial_response, cfg.eta_mode)
    return run_hgd(p, cfg)


# -- contingency analysis --------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str           # "voltage-high" | "voltage-low" | "flow"
    element: int        # bus id or branch id
    value: float        # p.u. voltage or fraction of limit
    subsystem: str

    @property
    def key(self) -> tuple[str, int]:
        return (self.kind, self.element)


@dataclass
class ContingencyEntry:
    branch: int
    status: str                      # "secure" | "insecure" | "diverged" | "islanded"
    iterations: int = 0
    worst_voltage: tuple[int, float, str] | None = None
    worst_flow: tuple[int, float, str] | None = None
    violations: list[Violation] = field(default_factory=list)
    mismatch_master: float = math.nan
    mismatch_slave: float = math.nan
    baseline_status: str = ""
    baseline_violations: list[Violation] = field(default_factory=list)

    @property
    def missed_by_baseline(self) -> list[Violation]:
        seen = {v.key for v in self.baseline_violations}
        return [v for v in self.violations if v.key not in seen]

    @property
    def false_alarms(self) -> list[Violation]:
        if self.status in ("diverged", "islanded"):
            return []
        seen = {v.key for v in self.violations}
        return [v for v in self.baseline_violations if v.key not in seen]


@dataclass
class SecurityReport:
    entries: list[ContingencyEntry]

    def rows(self) -> list[dict]:
        out = []
        for e in self.entries:
            out.append({
                "branch": e.branch, "status": e.status, "iterations": e.iterations,
                "worst_voltage_bus": None if e.worst_voltage is None else e.worst_voltage[0],
                "worst_voltage": None if e.worst_voltage is None else e.worst_voltage[1],
                "worst_voltage_subsystem": None if e.worst_voltage is None else e.worst_voltage[2],
                "worst_flow_branch": None if e.worst_flow is None else e.worst_flow[0],
                "worst_flow_fraction": None if e.worst_flow is None else e.worst_flow[1],
                "worst_flow_subsystem": None if e.worst_flow is None else e.worst_flow[2],
                "violations": ";".join(f"{v.kind}:{v.element}" for v in e.violations),
                "baseline_status": e.baseline_status,
                "baseline_violations": ";".join(f"{v.kind}:{v.element}" for v in e.baseline_violations),
                "missed_by_baseline": ";".join(f"{v.kind}:{v.element}" for v in e.missed_by_baseline),
                "false_alarms": ";".join(f"{v.kind}:{v.element}" for v in e.false_alarms),
                "mismatch_master": e.mismatch_master, "mismatch_slave": e.mismatch_slave,
            })
        return out


def _branch_flows(case: ItdCase, state: PfState) -> dict[int, float]:
    from ..model import branch_admittance
    out = {}
    for br in case.active_branches:
        if br.flow_limit is None or not (br.from_bus in state.ids and br.to_bus in state.ids):
            continue
        vf, vt = state.voltage(br.from_bus), state.voltage(br.to_bus)
        yff, yft, ytf, ytt = branch_admittance(br)
        sf = vf * np.conj(yff * vf + yft * vt)
        st = vt * np.conj(ytf * vf + ytt * vt)
        out[br.id] = max(abs(sf), abs(st)) / br.flow_limit
    return out


def find_violations(case: ItdCase, state: PfState, buses=None) -> tuple[list[Violation], tuple | None, tuple | None]:
    lo, hi = case.voltage_limits
    viol = []
    worst_v = None
    worst_dev = -math.inf
    for b in (buses if buses is not None else state.ids):
        vm = state.v_mag[state.index(b)]
        sub = case.bus(b).subsystem.value
        dev = max(vm - hi, lo - vm)
        if dev > worst_dev:
            worst_dev, worst_v = dev, (b, float(vm), sub)
        if vm > hi + 1e-9:
            viol.append(Violation("voltage-high", b, float(vm), sub))
        elif vm < lo - 1e-9:
            viol.append(Violation("voltage-low", b, float(vm), sub))
    worst_f = None
    for br_id, frac in sorted(_branch_flows(case, state).items()):
        sub = case.branch_side(case.branch(br_id)).value
        if worst_f is None or frac > worst_f[1]:
            worst_f = (br_id, float(frac), sub)
        if frac > 1 + 1e-9:
            viol.append(Violation("flow", br_id, float(frac), sub))
    return viol, worst_v, worst_f


def _split_mismatch(case: ItdCase, state: PfState) -> tuple[float, float]:
    """Max mismatch of the master and slave equations at a full state."""
    tso = tso_view(case)
    vb = np.array([state.voltage(b) for b in case.boundary])
    x_S = state.take(case.slave_ids)
    f = compute_fbs(case, vb, x_S)
    net_m = master_network(tso, f)
    rm = net_m.residual(state.take(net_m.ids).V)
    net_s = slave_network(case, vb)
    rs = net_s.residual(state.take(net_s.ids).V)
    return float(np.abs(rm).max(initial=0.0)), float(np.abs(rs).max(initial=0.0))


def baseline_state(case: ItdCase, f_frozen: BoundaryInjection) -> PfState:
    """Transmission-only post-contingency state with the slave side frozen at f_frozen."""
    tso = tso_view(case)
    xm, xb = solve_master_pf(tso, f_frozen)
    return PfState.merge(xm, xb, order=tso.master_ids + tso.boundary)


def run_ca(case: ItdCase, cfg: HgdConfig | None = None, variant: Variant | str = Variant.BASIC,
           contingencies: list[int] | None = None,
           response_mode: str = "equivalent") -> SecurityReport:
    cfg = cfg or HgdConfig()
    conts = list(case.contingencies if contingencies is None else contingencies)
    if not conts:
        return SecurityReport([])
    base, _ = run_tdpf(case, variant, cfg, response_mode)
    vb0 = np.array([base.voltage(b) for b in case.boundary])
    f0 = compute_fbs(case, vb0, base.take(case.slave_ids))
    entries = []
    for br in conts:
        try:
            cc = apply_contingency(case, br)
        except (IslandingError, CaseValidationError):
            entries.append(ContingencyEntry(br, "islanded", baseline_status="islanded"))
            continue
        entry = ContingencyEntry(br, "diverged")
        try:
            state, trace = run_tdpf(cc, variant, cfg, response_mode)
            entry.iterations = trace.n_iter
            if trace.converged:
                viol, wv, wf = find_violations(cc, state)
                entry.violations, entry.worst_voltage, entry.worst_flow = viol, wv, wf
                entry.mismatch_master, entry.mismatch_slave = _split_mismatch(cc, state)
                entry.status = "insecure" if viol else "secure"
        except (SubproblemError, SolverError):
            pass
        try:
            bstate = baseline_state(cc, f0)
            bviol, _, _ = find_violations(tso_view(cc), bstate)
            entry.baseline_violations = bviol
            entry.baseline_status = "insecure" if bviol else "secure"
        except SolverError:
            entry.baseline_status = "diverged"
        entries.append(entry)
    return SecurityReport(entries)


# -- loading margin -------------------------------------------------------------------------------

@dataclass
class VsaResult:
    margin: float
    state: PfState | None
    history: list[tuple[float, float, bool]] = field(default_factory=list)   # (lambda, step, ok)


def _continuation(solve: Callable[[float, PfState | None], PfState], step0: float,
                  min_step: float, max_lambda: float) -> VsaResult:
    try:
        state = solve(0.0, None)
    except (SolverError, SubproblemError, ArithmeticError) as exc:
        raise PowerFlowError(f"base case is not solvable: {exc}") from exc
    lam, step = 0.0, step0
    hist = [(0.0, 0.0, True)]
    while step >= min_step and lam < max_lambda:
        trial = lam + step
        try:
            new = solve(trial, state)
            ok = True
        except (SolverError, SubproblemError, ArithmeticError):
            ok = False
        hist.append((trial, step, ok))
        if ok:
            lam, state = trial, new
        else:
            step /= 2
    return VsaResult(lam, state, hist)


def run_vsa(case: ItdCase, cfg: HgdConfig | None = None, step0: float = 0.5,
            min_step: float = 1 / 64, variant: Variant | str = Variant.MODIFIED_DIST,
            response_mode: str = "sensitivity", max_lambda: float = 50.0) -> VsaResult:
    """Loading margin along the case's load direction by step halving."""
    if not case.load_direction:
        raise ValueError("case has no load direction")
    if not step0 > min_step > 0:
        raise ValueError("need step0 > min_step > 0")
    cfg = cfg or HgdConfig()

    def solve(lam, warm):
        st, tr = run_tdpf(scale_loads(case, lam), variant, cfg, response_mode, warm=warm)
        if not tr.converged:
            raise PowerFlowError(f"coordinated power flow did not converge at load multiplier {lam}")
        return st

    return _continuation(solve, step0, min_step, max_lambda)


def run_vsa_centralized(case: ItdCase, step0: float = 0.5, min_step: float = 1 / 64,
                        max_lambda: float = 50.0) -> VsaResult:
    """Same stepping on the single-network Newton solve (the reference)."""
    if not case.load_direction:
        raise ValueError("case has no load direction")

    def solve(lam, warm):
        return solve_centralized_pf(scale_loads(case, lam), warm=warm)

    return _continuation(solve, step0, min_step, max_lambda)


def run_vsa_frozen(case: ItdCase, step0: float = 0.5, min_step: float = 1 / 64,
                   max_lambda: float = 50.0) -> VsaResult:
    """Transmission-only estimate: slave side replaced by its base injection scaled by (1 + lambda)."""
    if not case.load_direction:
        raise ValueError("case has no load direction")
    base = solve_centralized_pf(case)
    vb = np.array([base.voltage(b) for b in case.boundary])
    f0 = compute_fbs(case, vb, base.take(case.slave_ids))
    tso = tso_view(case)

    def solve(lam, warm):
        f = BoundaryInjection(f0.p * (1 + lam), f0.q * (1 + lam))
        xm, xb = solve_master_pf(scale_loads(tso, lam), f, warm=warm)
        return PfState.merge(xm, xb)

    return _continuation(solve, step0, min_step, max_lambda)
