"""Coordinated dispatch and estimation on linear (DC) network models.

Three instances share one machinery of parametric quadratic programs:

- shift-factor economic dispatch: the boundary state is a dummy, the TSO sends
  the boundary price and the DSO sends its import, l_BS vanishes identically;
- angle-based DC optimal power flow: the boundary state is the boundary angle
  and the full (f_BS, l_BS) / (x_B, lambda_MB) exchange is exercised;
- linear weighted-least-squares state estimation with a boundary residual
  variable nu_B carried by the TSO.

Master QP (TSO), in variables z:
    min 1/2 z'Hz + c'z - l_sp' X z
    s.t. A_eq z = b_eq,  F z = f_sp + f0  [lambda_MB],  A_in z >= b_in
with x_B = X z.

Slave QP (one DSO), in variables z, parameters p = x_B and lambda:
    min 1/2 z'Hz + (c + K p)'z + lambda' f_BS
    s.t. E_z z + E_x p = e  [lambda_S],  F_z z + F_x p >= f  [omega_S]
with f_BS = G_z z + G_x p + g0 and
    l_BS = -(H_bb p + c_b + K'z + G_x' lambda - E_x' lambda_S - F_x' omega_S).
Sign convention: the DSO pays lambda_MB per unit it draws from the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from ..hgd import (
    BoundaryLayout, BoundaryResponse, BoundaryState, CoordinatedProblem, DistCorrection, DsoResult,
    DsoSide, HgdConfig, HgdTrace, LinearResponse, TransCorrection, TsoResult, TsoSide, Variant,
    run_hgd,
)
from ..kkt import (
    DegenerateError, KktPoint, QpProblem, SingularMatrixError, SolverError, kkt_residual,
    kkt_sensitivity, solve_qp,
)
from ..model import Branch, ItdCase, Owner, Subsystem, slave_components


class DispatchError(ValueError):
    pass


class UnobservableError(DispatchError):
    pass


# -- DC network helpers ---------------------------------------------------------------------

def dc_branches(case: ItdCase, side: Subsystem | None = None) -> list[Branch]:
    out = []
    for br in case.active_branches:
        if side is not None and case.branch_side(br) is not side:
            continue
        if br.x == 0:
            raise DispatchError(f"branch {br.id} has zero reactance; DC model undefined")
        out.append(br)
    return out


def susceptance(br: Branch) -> float:
    # taps and resistance are ignored in the DC model
    return 1.0 / br.x


def dc_bbus(bus_ids, branches) -> np.ndarray:
    pos = {b: i for i, b in enumerate(bus_ids)}
    B = np.zeros((len(bus_ids), len(bus_ids)))
    for br in branches:
        i, j, b = pos[br.from_bus], pos[br.to_bus], susceptance(br)
        B[i, i] += b
        B[j, j] += b
        B[i, j] -= b
        B[j, i] -= b
    return B


def ptdf(bus_ids, branches, ref: int) -> np.ndarray:
    """Flow on each branch (from->to) per unit injection at each bus, withdrawn at ref."""
    bus_ids = list(bus_ids)
    pos = {b: i for i, b in enumerate(bus_ids)}
    keep = [i for i, b in enumerate(bus_ids) if b != ref]
    B = dc_bbus(bus_ids, branches)[np.ix_(keep, keep)]
    if keep and np.linalg.matrix_rank(B) < len(keep):
        raise DispatchError(f"disconnected DC network around buses {bus_ids}")
    X = np.zeros((len(bus_ids), len(bus_ids)))
    if keep:
        X[np.ix_(keep, keep)] = np.linalg.inv(B)
    P = np.zeros((len(branches), len(bus_ids)))
    for r, br in enumerate(branches):
        P[r] = susceptance(br) * (X[pos[br.from_bus]] - X[pos[br.to_bus]])
    return P


# -- parametric QP data -----------------------------------------------------------------------

@dataclass(frozen=True)
class MasterQp:
    H: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    F: np.ndarray          # boundary rows, in flattened f order
    f0: np.ndarray
    X: np.ndarray          # x_B = X z, in flattened x order
    n_slack: int = 0

    __hash__ = None  # type: ignore[assignment]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def elastic(self, penalty: float) -> "MasterQp":
        H, c, A_in, b_in, extra = _elastic(self.H, self.c, self.A_in, self.b_in, penalty)
        pad = lambda M: np.hstack([M, np.zeros((M.shape[0], extra))])  # noqa: E731
        return MasterQp(H, c, pad(self.A_eq), self.b_eq, A_in, b_in, pad(self.F), self.f0,
                        pad(self.X), self.n_slack + extra)


@dataclass(frozen=True)
class SlaveQp:
    H: np.ndarray
    c: np.ndarray
    K: np.ndarray          # (n, n_p) cross term z' K p
    H_bb: np.ndarray
    c_b: np.ndarray
    G_z: np.ndarray
    G_x: np.ndarray
    g0: np.ndarray
    E_z: np.ndarray
    E_x: np.ndarray
    e: np.ndarray
    F_z: np.ndarray
    F_x: np.ndarray
    f: np.ndarray
    n_slack: int = 0

    __hash__ = None  # type: ignore[assignment]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def n_p(self) -> int:
        return self.K.shape[1]

    def elastic(self, penalty: float) -> "SlaveQp":
        H, c, F_z, f, extra = _elastic(self.H, self.c, self.F_z, self.f, penalty)
        pad = lambda M: np.hstack([M, np.zeros((M.shape[0], extra))])  # noqa: E731
        F_x = np.vstack([self.F_x, np.zeros((extra, self.n_p))])
        K = np.vstack([self.K, np.zeros((extra, self.n_p))])
        return replace(self, H=H, c=c, K=K, G_z=pad(self.G_z), E_z=pad(self.E_z), F_z=F_z,
                       F_x=F_x, f=f, n_slack=self.n_slack + extra)

    def problem(self, p: np.ndarray, lam: np.ndarray, eta: np.ndarray | None = None,
                f_prev: np.ndarray | None = None) -> QpProblem:
        H = self.H
        c = self.c + self.K @ p + self.G_z.T @ lam
        if eta is not None:
            H = H + self.G_z.T @ eta @ self.G_z
            c = c + self.G_z.T @ eta @ (self.G_x @ p + self.g0 - f_prev)
        return QpProblem(H, c, self.E_z, self.e - self.E_x @ p, self.F_z, self.f - self.F_x @ p)

    def f_bs(self, z, p):
        return self.G_z @ z + self.G_x @ p + self.g0

    def l_bs(self, z, p, lam, lam_s, om_s):
        return -(self.H_bb @ p + self.c_b + self.K.T @ z + self.G_x.T @ lam
                 - self.E_x.T @ lam_s - self.F_x.T @ om_s)


def _elastic(H, c, A_in, b_in, penalty):
    m, n = A_in.shape
    H2 = np.zeros((n + m, n + m))
    H2[:n, :n] = H
    c2 = np.concatenate([c, np.full(m, float(penalty))])
    A2 = np.block([[A_in, np.eye(m)], [np.zeros((m, n)), np.eye(m)]])
    b2 = np.concatenate([b_in, np.zeros(m)])
    return H2, c2, A2, b2, m


def _sym(H):
    return 0.5 * (H + H.T)


# -- sides -----------------------------------------------------------------------------------

class QpTsoSide(TsoSide):
    def __init__(self, data: MasterQp, layout: BoundaryLayout):
        self.data = data
        self.layout = layout

    def with_elastic(self, penalty: float) -> "QpTsoSide":
        return QpTsoSide(self.data.elastic(penalty), self.layout)

    def problem(self, y: BoundaryResponse, correction: DistCorrection | None = None) -> QpProblem:
        d = self.data
        f_sp, l_sp = y.f.ravel(), y.l.ravel()
        H, c = d.H, d.c - d.X.T @ l_sp
        F, rhs = d.F, f_sp + d.f0
        if correction is not None:
            const, Dx = correction.affine_in_x()
            nf = f_sp.size
            Df, Dl = Dx[:nf], Dx[nf:]
            lam_prev = correction.xi_prev.lam.ravel()
            F = F - Df @ d.X
            rhs = rhs + const[:nf]
            # objective gains -lam_prev' a_f(x) and -A_l(x) (a_l affine, symmetric part)
            c = c - d.X.T @ (Df.T @ lam_prev) - d.X.T @ const[nf:]
            H = H - d.X.T @ _sym(Dl) @ d.X
        return QpProblem(_sym(H), c, np.vstack([d.A_eq, F]), np.concatenate([d.b_eq, rhs]),
                         d.A_in, d.b_in)

    def solve(self, y, correction=None):
        L = self.layout
        qp = self.problem(y, correction)
        pt = solve_qp(qp)
        me = self.data.A_eq.shape[0]
        x = (self.data.X @ pt.z).reshape(L.n_x, L.nb)
        lam = pt.lam[me:].reshape(L.n_f, L.nb)
        slack = float(pt.z[self.data.n - self.data.n_slack:].sum()) if self.data.n_slack else 0.0
        return TsoResult(BoundaryState(x, lam), detail=(qp, pt, self.data), signature=tuple(pt.active_set),
                         slack=slack)

    def price_sensitivity(self, result: TsoResult) -> np.ndarray:
        qp, pt, _ = result.detail
        me = self.data.A_eq.shape[0]
        nf = self.data.F.shape[0]
        d_b = np.zeros((qp.m_eq, nf))
        d_b[me:me + nf] = np.eye(nf)
        sens = kkt_sensitivity(qp, pt, d_b_eq=d_b)
        return np.asarray(sens.dlam)[me:me + nf]


@dataclass
class SlaveDetail:
    qp: QpProblem
    pt: KktPoint
    p: np.ndarray
    lam: np.ndarray
    data: SlaveQp


class QpDsoSide(DsoSide):
    def __init__(self, dso: int, data: SlaveQp, layout: BoundaryLayout):
        self.dso = dso
        self.data = data
        self.layout = layout     # this DSO's sub-layout

    def with_elastic(self, penalty: float) -> "QpDsoSide":
        return QpDsoSide(self.dso, self.data.elastic(penalty), self.layout)

    def solve(self, xi, trans=None, want_response=False):
        L, d = self.layout, self.data
        p, lam = xi.x.ravel(), xi.lam.ravel()
        eta = f_prev = None
        if trans is not None:
            eta, f_prev = trans.eta, trans.f_prev.ravel()
        qp = d.problem(p, lam, eta, f_prev)
        pt = solve_qp(qp)
        me = d.E_z.shape[0]
        f = d.f_bs(pt.z, p)
        lam_eff = lam if eta is None else lam + eta @ (f - f_prev)
        l = d.l_bs(pt.z, p, lam_eff, pt.lam[:me], pt.omega)
        y = BoundaryResponse(f.reshape(L.n_f, L.nb), l.reshape(L.n_x, L.nb))
        status, resp = "ok", None
        if want_response:
            try:
                resp = LinearResponse(self._response_matrix(qp, pt), L.n_x, L.n_f)
            except (DegenerateError, SingularMatrixError):
                n = (L.n_x + L.n_f) * L.nb
                resp = LinearResponse(np.zeros((n, n)), L.n_x, L.n_f)
                status = "response-degenerate"
        slack = float(pt.z[d.n - d.n_slack:].sum()) if d.n_slack else 0.0
        return DsoResult(y, detail=SlaveDetail(qp, pt, p, lam, d), response=resp, status=status,
                         signature=tuple(pt.active_set), slack=slack)

    def _response_matrix(self, qp: QpProblem, pt: KktPoint) -> np.ndarray:
        """d[f; l]/d[p; lam] of the D-SP solution map."""
        d = self.data
        n_p, n_l = d.n_p, d.G_z.shape[0]
        d_c = np.hstack([d.K, d.G_z.T])
        d_be = np.hstack([-d.E_x, np.zeros((d.E_z.shape[0], n_l))])
        d_bi = np.hstack([-d.F_x, np.zeros((d.F_z.shape[0], n_l))])
        s = kkt_sensitivity(qp, pt, d_c=d_c, d_b_eq=d_be, d_b_in=d_bi)
        dz, dls, dom = (np.atleast_2d(np.asarray(a)).reshape(-1, n_p + n_l) for a in s)
        df = d.G_z @ dz
        df[:, :n_p] += d.G_x
        dl = -(d.K.T @ dz - d.E_x.T @ dls - d.F_x.T @ dom)
        dl[:, :n_p] -= d.H_bb
        dl[:, n_p:] -= d.G_x.T
        return np.vstack([df, dl])


# -- assembled global problem -----------------------------------------------------------------

def global_qp(master: MasterQp, slaves: dict[int, SlaveQp], layout: BoundaryLayout):
    """The undecomposed QP and the column/row offsets of every block."""
    L = layout
    nM = master.n
    offs, n = {}, nM
    for dso in L.dsos:
        offs[dso] = n
        n += slaves[dso].n
    H = np.zeros((n, n))
    c = np.zeros(n)
    H[:nM, :nM] = master.H
    c[:nM] = master.c
    nf_rows = master.F.shape[0]
    Fb = np.zeros((nf_rows, n))
    Fb[:, :nM] = master.F
    rhs_b = master.f0.copy()
    eq_rows, eq_b, in_rows, in_b = [], [], [], []
    for dso in L.dsos:
        s, o = slaves[dso], offs[dso]
        cols = L.columns(dso)
        xr = L.xi_index(cols)[: L.n_x * len(cols)]
        fr = L.y_index(cols)[: L.n_f * len(cols)]
        Xd = master.X[xr]
        sl = slice(o, o + s.n)
        H[sl, sl] = s.H
        cross = s.K @ Xd
        H[sl, :nM] += cross
        H[:nM, sl] += cross.T
        H[:nM, :nM] += Xd.T @ s.H_bb @ Xd
        c[sl] = s.c
        c[:nM] += Xd.T @ s.c_b
        Fb[fr, sl] -= s.G_z
        Fb[fr, :nM] -= s.G_x @ Xd
        rhs_b[fr] += s.g0
        E = np.zeros((s.E_z.shape[0], n))
        E[:, sl] = s.E_z
        E[:, :nM] += s.E_x @ Xd
        eq_rows.append(E)
        eq_b.append(s.e)
        Fi = np.zeros((s.F_z.shape[0], n))
        Fi[:, sl] = s.F_z
        Fi[:, :nM] += s.F_x @ Xd
        in_rows.append(Fi)
        in_b.append(s.f)
    Aeq_m = np.hstack([master.A_eq, np.zeros((master.A_eq.shape[0], n - nM))])
    Ain_m = np.hstack([master.A_in, np.zeros((master.A_in.shape[0], n - nM))])
    A_eq = np.vstack([Aeq_m, Fb] + eq_rows)
    b_eq = np.concatenate([master.b_eq, rhs_b] + eq_b)
    A_in = np.vstack([Ain_m] + in_rows)
    b_in = np.concatenate([master.b_in] + in_b)
    return QpProblem(_sym(H), c, A_eq, b_eq, A_in, b_in), offs


@dataclass
class CoordSolution:
    """Assembled subproblem solutions on the undecomposed problem."""

    problem: QpProblem
    point: KktPoint
    master_z: np.ndarray
    slave_z: dict[int, np.ndarray]
    xi: BoundaryState
    y: BoundaryResponse
    lmps: dict[int, float] | None = None
    generation: dict[int, float] = field(default_factory=dict)   # generator index -> p
    estimate: dict[int, float] | None = None                      # bus -> angle (estimation)
    nu: np.ndarray | None = None
    objective: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    __hash__ = None  # type: ignore[assignment]


class QpCoordinatedProblem(CoordinatedProblem):
    def __init__(self, case: ItdCase, layout: BoundaryLayout, master: MasterQp,
                 slaves: dict[int, SlaveQp], xi0: BoundaryState, post=None):
        self.case = case
        self.layout = layout
        self.master = master
        self.slaves = slaves
        self.xi0 = xi0
        self.post = post
        self.tso = QpTsoSide(master, layout)
        self.dsos = {d: QpDsoSide(d, slaves[d], layout.sub(d)) for d in layout.dsos}

    def initial_state(self):
        return BoundaryState(self.xi0.x.copy(), self.xi0.lam.copy())

    def assemble(self, tso_result, dso_results):
        L = self.layout
        _, pt_m, master = tso_result.detail
        # the models actually solved (elastic wrappers replace the sides)
        slaves = {d: dso_results[d].detail.data for d in L.dsos}
        prob, offs = global_qp(master, slaves, L)
        me = master.A_eq.shape[0]
        nf = master.F.shape[0]
        z = np.zeros(prob.n)
        z[:master.n] = pt_m.z
        lam = [pt_m.lam[:me], pt_m.lam[me:me + nf]]
        om = [pt_m.omega]
        slave_z = {}
        for d in L.dsos:
            det: SlaveDetail = dso_results[d].detail
            z[offs[d]:offs[d] + slaves[d].n] = det.pt.z
            slave_z[d] = det.pt.z
            lam.append(det.pt.lam)
            om.append(det.pt.omega)
        point = KktPoint(z, np.concatenate(lam), np.concatenate(om), (), 0, prob.objective(z))
        y = BoundaryResponse.merge([(L.columns(d), dso_results[d].y) for d in L.dsos], L)
        sol = CoordSolution(prob, point, pt_m.z, slave_z, tso_result.xi, y)
        sol.extra["master"], sol.extra["slaves"] = master, slaves
        if self.post is not None:
            self.post(self, sol)
        return sol

    def global_kkt_residual(self, solution):
        return kkt_residual(solution.problem, solution.point)


def _variant(v) -> Variant:
    if isinstance(v, Variant):
        return v
    return Variant("modified-trans" if v == "modified" else v)


def _cfg(cfg: HgdConfig | None, variant, eta_mode: str | None = None) -> HgdConfig:
    cfg = cfg or HgdConfig()
    return HgdConfig(cfg.epsilon, cfg.max_iter, _variant(variant), cfg.start_side,
                     cfg.initial_state, cfg.initial_response, eta_mode or cfg.eta_mode)


# -- generator bookkeeping ---------------------------------------------------------------------

def _gens(case: ItdCase, side: Subsystem, buses=None) -> list[int]:
    out = []
    for k, g in enumerate(case.generators):
        if case.generator_side(g) is not side:
            continue
        if buses is not None and g.bus not in buses:
            continue
        out.append(k)
    return out


def _dso_gens(case: ItdCase, dso: int) -> list[int]:
    buses = set(case.dso_slave_ids(dso)) | set(case.dso_boundary(dso))
    return _gens(case, Subsystem.SLAVE, buses)


def _cost_blocks(case: ItdCase, gens: list[int]):
    c2 = np.array([case.generators[k].cost_c2 for k in gens])
    c1 = np.array([case.generators[k].cost_c1 for k in gens])
    return np.diag(2 * c2), c1


def _gen_bounds(case: ItdCase, gens: list[int], n: int, offset: int = 0):
    rows, rhs = [], []
    for j, k in enumerate(gens):
        g = case.generators[k]
        r = np.zeros(n)
        r[offset + j] = 1.0
        rows.append(r)
        rhs.append(g.p_min)
        rows.append(-r)
        rhs.append(-g.p_max)
    return rows, rhs


def _limited(branches: list[Branch]) -> list[int]:
    return [i for i, br in enumerate(branches) if br.flow_limit is not None]


def _marginal_cost(case: ItdCase) -> float:
    if not case.slack_ids:
        return 0.0
    for g in case.generators:
        if g.bus == case.slack_ids[0]:
            return g.cost_c1 + 2 * g.cost_c2 * g.p
    return 0.0


def _stack(rows, n):
    return np.array(rows, dtype=float).reshape(-1, n)


def _layout(case: ItdCase, x_names, f_names, **send) -> BoundaryLayout:
    B = case.boundary
    return BoundaryLayout(B, tuple(case.dso_assignment[b] for b in B), x_names, f_names, **send)


# -- shift-factor economic dispatch ------------------------------------------------------------

def _dso_components(case: ItdCase, dso: int):
    """(boundary bus, slave buses) per component of one DSO; one boundary bus each."""
    out = []
    for comp, attached in slave_components(case):
        if not attached or case.dso_assignment.get(attached[0]) != dso:
            continue
        if len(attached) != 1:
            raise DispatchError(
                f"reference-bus ambiguity: slave component {list(comp)} touches boundary buses "
                f"{list(attached)}; shift factors need a single reference")
        out.append((attached[0], list(comp)))
    return out


def _ced_layout(case: ItdCase) -> BoundaryLayout:
    return _layout(case, ("x",), ("p",), send_x=False, send_l=False)


def _ced_master(case: ItdCase, L: BoundaryLayout):
    """T-SP over [P_T, P_BT]; needs master and boundary data only."""
    nb = L.nb
    slack = case.slack_ids[0]
    mbus = list(case.master_ids + case.boundary)
    mbr = dc_branches(case, Subsystem.MASTER)
    tg = _gens(case, Subsystem.MASTER)
    nT = len(tg)
    n = nT + nb
    H = np.zeros((n, n))
    c = np.zeros(n)
    H[:nT, :nT], c[:nT] = _cost_blocks(case, tg)
    load = np.array([case.bus(b).p_load for b in mbus])
    A_eq = np.zeros((1, n))
    A_eq[0, :nT] = 1.0
    A_eq[0, nT:] = -1.0
    b_eq = np.array([load.sum()])
    rows, rhs = _gen_bounds(case, tg, n)
    pos = {b: i for i, b in enumerate(mbus)}
    Cg = np.zeros((len(mbus), n))
    for j, k in enumerate(tg):
        Cg[pos[case.generators[k].bus], j] = 1.0
    for j, b in enumerate(case.boundary):
        Cg[pos[b], nT + j] = -1.0
    P = ptdf(mbus, mbr, slack)
    for i in _limited(mbr):
        lim = mbr[i].flow_limit
        rows += [P[i] @ Cg, -(P[i] @ Cg)]
        rhs += [-lim + P[i] @ load, -lim - P[i] @ load]
    F = np.zeros((nb, n))
    F[:, nT:] = np.eye(nb)
    master = MasterQp(H, c, A_eq, b_eq, _stack(rows, n), np.array(rhs, float), F, np.zeros(nb),
                      np.zeros((nb, n)))
    meta = {"master_gens": tg, "master_buses": mbus, "master_ptdf": P, "master_limited": _limited(mbr)}
    xi0 = BoundaryState(np.zeros((1, nb)), np.full((1, nb), _marginal_cost(case)))
    return master, meta, xi0


def _ced_slave(case: ItdCase, dso: int):
    """D-SP over [P_D, P_BD]; needs this DSO's boundary and slave data only."""
    bd = list(case.dso_boundary(dso))
    comps = _dso_components(case, dso)
    dg = _dso_gens(case, dso)
    nD, nbd = len(dg), len(bd)
    n = nD + nbd
    H = np.zeros((n, n))
    c = np.zeros(n)
    H[:nD, :nD], c[:nD] = _cost_blocks(case, dg)
    E, e = [], []
    rows, rhs = _gen_bounds(case, dg, n)
    cinfo = []
    for b, comp in comps:
        r = np.zeros(n)
        r[nD + bd.index(b)] = 1.0
        for j, k in enumerate(dg):
            if case.generators[k].bus in comp or case.generators[k].bus == b:
                r[j] = 1.0
        E.append(r)
        e.append(sum(case.bus(s).p_load for s in comp))
        buses = [b] + comp
        brs = [br for br in dc_branches(case, Subsystem.SLAVE)
               if br.from_bus in buses and br.to_bus in buses]
        Ps = ptdf(buses, brs, b)
        sp = {s: i for i, s in enumerate(buses)}
        Cs = np.zeros((len(buses), n))
        for j, k in enumerate(dg):
            gb = case.generators[k].bus
            if gb in comp:
                Cs[sp[gb], j] = 1.0
        dl = np.array([case.bus(s).p_load if s != b else 0.0 for s in buses])
        first = len(rows)
        for i in _limited(brs):
            lim = brs[i].flow_limit
            rows += [Ps[i] @ Cs, -(Ps[i] @ Cs)]
            rhs += [-lim + Ps[i] @ dl, -lim - Ps[i] @ dl]
        cinfo.append({"boundary": b, "buses": buses, "ptdf": Ps, "limited": _limited(brs),
                      "row": len(E) - 1, "in_first": first})
    G_z = np.zeros((nbd, n))
    G_z[:, nD:] = np.eye(nbd)
    m_in = len(rows)
    slave = SlaveQp(H, c, np.zeros((n, nbd)), np.zeros((nbd, nbd)), np.zeros(nbd),
                    G_z, np.zeros((nbd, nbd)), np.zeros(nbd),
                    _stack(E, n), np.zeros((len(E), nbd)), np.array(e, float),
                    _stack(rows, n), np.zeros((m_in, nbd)), np.array(rhs, float))
    return slave, {"gens": dg, "components": cinfo}


def build_tdced(case: ItdCase) -> QpCoordinatedProblem:
    """Shift-factor dispatch: T-SP is a transmission ED with boundary load P_BD^sp."""
    L = _ced_layout(case)
    master, meta, xi0 = _ced_master(case, L)
    slaves, meta["dso"] = {}, {}
    for dso in L.dsos:
        slaves[dso], meta["dso"][dso] = _ced_slave(case, dso)

    def post(p, sol):
        _ced_post(case, L, meta, p, sol)

    prob = QpCoordinatedProblem(case, L, master, slaves, xi0, post)
    prob.meta = meta
    return prob


def _congestion(Pt, limited, omega, first=0):
    """sum_l PTDF[l, i] (omega_low - omega_high) over limited rows (pairs from `first`)."""
    out = np.zeros(Pt.shape[1])
    for k, i in enumerate(limited):
        lo, hi = omega[first + 2 * k], omega[first + 2 * k + 1]
        out += Pt[i] * (lo - hi)
    return out


def _ced_post(case, L, meta, p, sol: CoordSolution):
    tg = meta["master_gens"]
    zM = sol.master_z
    for j, k in enumerate(tg):
        sol.generation[k] = float(zM[j])
    pt = sol.point
    nT = len(tg)
    lam_sys = pt.lam[0]
    m_in_m = sol.extra["master"].A_in.shape[0]
    om_m = pt.omega[:m_in_m]
    nbounds = 2 * nT
    cong = _congestion(meta["master_ptdf"], meta["master_limited"], om_m, nbounds)
    lmps = {b: float(lam_sys + cong[i]) for i, b in enumerate(meta["master_buses"])}
    me_m = sol.extra["master"].A_eq.shape[0]
    nf = sol.extra["master"].F.shape[0]
    eq_off = me_m + nf
    in_off = m_in_m
    for dso in L.dsos:
        info = meta["dso"][dso]
        z = sol.slave_z[dso]
        for j, k in enumerate(info["gens"]):
            sol.generation[k] = float(z[j])
        s = sol.extra["slaves"][dso]
        lam_s = pt.lam[eq_off:eq_off + s.E_z.shape[0]]
        om_s = pt.omega[in_off:in_off + s.F_z.shape[0]]
        for ci in info["components"]:
            cong = _congestion(ci["ptdf"], ci["limited"], om_s, ci["in_first"])
            for i, bus in enumerate(ci["buses"]):
                if bus != ci["boundary"]:
                    lmps[bus] = float(lam_s[ci["row"]] + cong[i])
        eq_off += s.E_z.shape[0]
        in_off += s.F_z.shape[0]
    for j, b in enumerate(L.boundary):
        lmps[b] = float(sol.xi.lam[0, j])
    sol.lmps = lmps
    sol.objective = _gen_cost(case, sol.generation)
    sol.extra["P_BT"] = zM[nT:nT + L.nb].copy()
    sol.extra["P_BD"] = sol.y.f[0].copy()


def _gen_cost(case: ItdCase, gen: dict[int, float]) -> float:
    return float(sum(case.generators[k].cost(p) for k, p in gen.items()))


# -- angle-based DC optimal power flow -------------------------------------------------------------

def _flow_row(br: Branch, n: int, col: dict[int, int]) -> np.ndarray:
    r = np.zeros(n)
    b = susceptance(br)
    if br.from_bus in col:
        r[col[br.from_bus]] += b
    if br.to_bus in col:
        r[col[br.to_bus]] -= b
    return r


def _balance(case: ItdCase, bus: int, brs, n: int, col, gcols) -> np.ndarray:
    """Nodal balance row: sum of gens minus sum of b (theta_bus - theta_other)."""
    r = np.zeros(n)
    for j, k in gcols:
        if case.generators[k].bus == bus:
            r[j] = 1.0
    for br in brs:
        if bus not in (br.from_bus, br.to_bus):
            continue
        fr = _flow_row(br, n, col)
        r -= fr if br.from_bus == bus else -fr
    return r


def _opf_layout(case: ItdCase) -> BoundaryLayout:
    return _layout(case, ("theta",), ("p",))


def _opf_master(case: ItdCase, L: BoundaryLayout):
    """T-SP over [theta (master non-slack + boundary), P_T]."""
    nb = L.nb
    slack = case.slack_ids[0]
    mbr = dc_branches(case, Subsystem.MASTER)
    abus = [b for b in case.master_ids + case.boundary if b != slack]
    apos = {b: i for i, b in enumerate(abus)}
    tg = _gens(case, Subsystem.MASTER)
    nA, nT = len(abus), len(tg)
    n = nA + nT
    H = np.zeros((n, n))
    c = np.zeros(n)
    H[nA:, nA:], c[nA:] = _cost_blocks(case, tg)
    gcols = [(nA + j, k) for j, k in enumerate(tg)]
    A_eq = _stack([_balance(case, b, mbr, n, apos, gcols) for b in case.master_ids], n)
    b_eq = np.array([case.bus(b).p_load for b in case.master_ids])
    F = _stack([_balance(case, b, mbr, n, apos, gcols) for b in case.boundary], n)
    f0 = np.array([case.bus(b).p_load for b in case.boundary])
    X = np.zeros((nb, n))
    for j, b in enumerate(case.boundary):
        X[j, apos[b]] = 1.0
    rows, rhs = _gen_bounds(case, tg, n, nA)
    for br in mbr:
        if br.flow_limit is not None:
            fr = _flow_row(br, n, apos)
            rows += [fr, -fr]
            rhs += [-br.flow_limit, -br.flow_limit]
    master = MasterQp(H, c, A_eq, b_eq, _stack(rows, n), np.array(rhs, float), F, f0, X)
    xi0 = BoundaryState(np.zeros((1, nb)), np.full((1, nb), _marginal_cost(case)))
    return master, {"master_gens": tg, "angle_buses": abus}, xi0


def _opf_slave(case: ItdCase, dso: int):
    """D-SP over [theta_S, P_D] with the boundary angles as parameters."""
    bd = list(case.dso_boundary(dso))
    sb = list(case.dso_slave_ids(dso))
    spos = {b: i for i, b in enumerate(sb)}
    dg = _dso_gens(case, dso)
    nS, nD, nbd = len(sb), len(dg), len(bd)
    n = nS + nD
    brs = [br for br in dc_branches(case, Subsystem.SLAVE) if {br.from_bus, br.to_bus} & set(sb)]
    H = np.zeros((n, n))
    c = np.zeros(n)
    H[nS:, nS:], c[nS:] = _cost_blocks(case, dg)
    gz = [(nS + j, k) for j, k in enumerate(dg)]
    # rows are built over [z | p] and then split
    col = {**spos, **{b: n + i for i, b in enumerate(bd)}}
    E_z, E_x = [], []
    for s in sb:
        r = _balance(case, s, brs, n + nbd, col, gz)
        E_z.append(r[:n])
        E_x.append(r[n:])
    e = np.array([case.bus(s).p_load for s in sb])
    G_z, G_x = [], []
    for bb in bd:
        # power drawn by the slave side at bb: flows into slave branches minus DSO gens there
        r = -_balance(case, bb, brs, n + nbd, col, gz)
        G_z.append(r[:n])
        G_x.append(r[n:])
    Fz, Fx, fr_rhs = [], [], []
    for br in brs:
        if br.flow_limit is None:
            continue
        r = _flow_row(br, n + nbd, col)
        for sgn in (1.0, -1.0):
            Fz.append(sgn * r[:n])
            Fx.append(sgn * r[n:])
            fr_rhs.append(-br.flow_limit)
    bnd_rows, bnd_rhs = _gen_bounds(case, dg, n, nS)
    Fz = bnd_rows + Fz
    Fx = [np.zeros(nbd)] * len(bnd_rows) + Fx
    fr_rhs = bnd_rhs + fr_rhs
    slave = SlaveQp(H, c, np.zeros((n, nbd)), np.zeros((nbd, nbd)), np.zeros(nbd),
                    _stack(G_z, n), _stack(G_x, nbd), np.zeros(nbd),
                    _stack(E_z, n), _stack(E_x, nbd), e,
                    _stack(Fz, n), _stack(Fx, nbd), np.array(fr_rhs, float))
    return slave, {"gens": dg, "buses": sb}


def build_tdopf_dc(case: ItdCase) -> QpCoordinatedProblem:
    """Angle-based DC-OPF: x_B is the boundary angle, f_BS the power drawn at the boundary."""
    L = _opf_layout(case)
    master, meta, xi0 = _opf_master(case, L)
    slaves, meta["dso"] = {}, {}
    for dso in L.dsos:
        slaves[dso], meta["dso"][dso] = _opf_slave(case, dso)

    def post(p, sol):
        _opf_post(case, L, meta, p, sol)

    prob = QpCoordinatedProblem(case, L, master, slaves, xi0, post)
    prob.meta = meta
    return prob


def _opf_post(case, L, meta, p, sol: CoordSolution):
    zM, pt = sol.master_z, sol.point
    nA = len(meta["angle_buses"])
    ang = {case.slack_ids[0]: 0.0}
    ang.update({b: float(zM[i]) for i, b in enumerate(meta["angle_buses"])})
    for j, k in enumerate(meta["master_gens"]):
        sol.generation[k] = float(zM[nA + j])
    me = sol.extra["master"].A_eq.shape[0]
    nf = sol.extra["master"].F.shape[0]
    lmps = {b: float(pt.lam[i]) for i, b in enumerate(case.master_ids)}
    for j, b in enumerate(L.boundary):
        lmps[b] = float(pt.lam[me + j])
    off = me + nf
    for dso in L.dsos:
        info = meta["dso"][dso]
        z = sol.slave_z[dso]
        nS = len(info["buses"])
        for i, b in enumerate(info["buses"]):
            ang[b] = float(z[i])
            lmps[b] = float(pt.lam[off + i])
        for j, k in enumerate(info["gens"]):
            sol.generation[k] = float(z[nS + j])
        off += sol.extra["slaves"][dso].E_z.shape[0]
    sol.lmps = lmps
    sol.estimate = ang
    sol.objective = _gen_cost(case, sol.generation)


# -- linear state estimation ----------------------------------------------------------------------

@dataclass(frozen=True)
class SeModel:
    """Measurement split: rows of h over (master+boundary angles) and (slave angles, x_B)."""

    master_rows: tuple[int, ...]
    boundary_rows: tuple[int, ...]
    slave_rows: dict[int, tuple[int, ...]]


def measurement_row(case: ItdCase, m, col: dict[int, int], n: int) -> np.ndarray:
    """Linear measurement function h(theta) restricted to the given angle columns."""
    r = np.zeros(n)

    def add(bus, v):
        if bus in col:
            r[col[bus]] += v

    if m.kind == "angle":
        add(m.bus, 1.0)
    elif m.kind == "flow":
        br = case.branch(m.branch)
        b = susceptance(br)
        add(br.from_bus, b)
        add(br.to_bus, -b)
    elif m.kind == "injection":
        for br in case.active_branches:
            if m.bus not in (br.from_bus, br.to_bus):
                continue
            b = susceptance(br)
            other = br.to_bus if br.from_bus == m.bus else br.from_bus
            add(m.bus, b)
            add(other, -b)
    else:
        raise DispatchError(f"unknown measurement kind {m.kind!r}")
    return r


def _meas_side(case: ItdCase, m) -> str:
    if m.kind == "flow":
        br = case.branch(m.branch)
        return "slave" if case.branch_side(br) is Subsystem.SLAVE else "master"
    sub = case.bus(m.bus).subsystem
    if sub is Subsystem.BOUNDARY:
        return "boundary" if m.kind == "injection" else "master"
    return sub.value


def _injection_part(case: ItdCase, bus: int, side: Subsystem, col, n) -> np.ndarray:
    r = np.zeros(n)
    for br in case.active_branches:
        if bus not in (br.from_bus, br.to_bus) or case.branch_side(br) is not side:
            continue
        b = susceptance(br)
        other = br.to_bus if br.from_bus == bus else br.from_bus
        if bus in col:
            r[col[bus]] += b
        if other in col:
            r[col[other]] -= b
    return r


def _se_master(case: ItdCase, L: BoundaryLayout):
    """T-SP over [theta (master non-slack + boundary), nu_B]."""
    if not case.measurements:
        raise DispatchError("case has no measurements")
    nb = L.nb
    slack = case.slack_ids[0]
    meas = [(m, _meas_side(case, m)) for m in case.measurements]
    binj = {}
    for m, s in meas:
        if s == "boundary":
            if m.bus in binj:
                raise DispatchError(f"boundary bus {m.bus} has more than one injection measurement")
            binj[m.bus] = m
    missing = [b for b in case.boundary if b not in binj]
    if missing:
        raise DispatchError(f"boundary buses {missing} need exactly one injection measurement")
    abus = [b for b in case.master_ids + case.boundary if b != slack]
    apos = {b: i for i, b in enumerate(abus)}
    nA = len(abus)
    n = nA + nb
    mm = [m for m, s in meas if s == "master"]
    Hm = _stack([measurement_row(case, m, apos, nA) for m in mm], nA)
    zm = np.array([m.value for m in mm])
    wm = np.array([1 / m.sigma ** 2 for m in mm])
    if nA and (not mm or np.linalg.matrix_rank(Hm) < nA):
        raise UnobservableError("master subsystem is unobservable from its measurements")
    H = np.zeros((n, n))
    c = np.zeros(n)
    H[:nA, :nA] = Hm.T @ (wm[:, None] * Hm)
    c[:nA] = -Hm.T @ (wm * zm)
    H[nA:, nA:] = np.diag([1 / binj[b].sigma ** 2 for b in case.boundary])
    F = np.zeros((nb, n))
    for j, b in enumerate(case.boundary):
        F[j, :nA] = _injection_part(case, b, Subsystem.MASTER, apos, nA)
        F[j, nA + j] = 1.0
    f0 = np.array([binj[b].value for b in case.boundary])
    X = np.zeros((nb, n))
    for j, b in enumerate(case.boundary):
        X[j, apos[b]] = 1.0
    master = MasterQp(H, c, np.zeros((0, n)), np.zeros(0), np.zeros((0, n)), np.zeros(0), F, f0, X)
    return master, {"angle_buses": abus}, BoundaryState(np.zeros((1, nb)), np.zeros((1, nb)))


def _se_slave(case: ItdCase, dso: int):
    """D-SP over slave angles: weighted residuals of this DSO's meters."""
    bd = list(case.dso_boundary(dso))
    sb = list(case.dso_slave_ids(dso))
    nS, nbd = len(sb), len(bd)
    col = {**{b: i for i, b in enumerate(sb)}, **{b: nS + i for i, b in enumerate(bd)}}
    mine = [m for m in case.measurements
            if _meas_side(case, m) == "slave" and _meas_dso(case, m) == dso]
    Hs = _stack([measurement_row(case, m, col, nS + nbd) for m in mine], nS + nbd)
    zs = np.array([m.value for m in mine])
    ws = np.array([1 / m.sigma ** 2 for m in mine])
    Hz, Hx = Hs[:, :nS], Hs[:, nS:]
    if nS and (not mine or np.linalg.matrix_rank(Hz) < nS):
        raise UnobservableError(f"slave subsystem of DSO {dso} is unobservable from its measurements")
    W = ws[:, None]
    G = np.zeros((nbd, nS + nbd))
    for j, b in enumerate(bd):
        G[j] = -_injection_part(case, b, Subsystem.SLAVE, col, nS + nbd)
    slave = SlaveQp(Hz.T @ (W * Hz), -Hz.T @ (ws * zs), Hz.T @ (W * Hx),
                    Hx.T @ (W * Hx), -Hx.T @ (ws * zs),
                    G[:, :nS], G[:, nS:], np.zeros(nbd),
                    np.zeros((0, nS)), np.zeros((0, nbd)), np.zeros(0),
                    np.zeros((0, nS)), np.zeros((0, nbd)), np.zeros(0))
    return slave, {"buses": sb}


def build_tdse(case: ItdCase) -> QpCoordinatedProblem:
    """Linear WLS estimation as a coordinated problem with boundary residual nu_B."""
    L = _opf_layout(case)
    master, meta, xi0 = _se_master(case, L)
    slaves, meta["dso"] = {}, {}
    for dso in L.dsos:
        slaves[dso], meta["dso"][dso] = _se_slave(case, dso)
    nA, nb = len(meta["angle_buses"]), L.nb
    slack = case.slack_ids[0]

    def post(p, sol):
        zM = sol.master_z
        est = {slack: 0.0}
        est.update({b: float(zM[i]) for i, b in enumerate(meta["angle_buses"])})
        for dso in L.dsos:
            for i, b in enumerate(meta["dso"][dso]["buses"]):
                est[b] = float(sol.slave_z[dso][i])
        sol.estimate = est
        sol.nu = zM[nA:nA + nb].copy()
        sol.objective = 0.5 * sum(r * r for _, r in weighted_residuals(case, est))

    prob = QpCoordinatedProblem(case, L, master, slaves, xi0, post)
    prob.meta = meta
    return prob


# -- per-operator construction (distributed runs) -------------------------------------------------

_PARTS = {
    "ed": (_ced_layout, _ced_master, _ced_slave),
    "opf": (_opf_layout, _opf_master, _opf_slave),
    "se": (_opf_layout, _se_master, _se_slave),
}


def qp_tso_side(app: str, tso_case: ItdCase) -> tuple[QpTsoSide, BoundaryState]:
    """Transmission side of a QP app from the TSO's own view of the case."""
    layout_fn, master_fn, _ = _PARTS[app]
    L = layout_fn(tso_case)
    master, _, xi0 = master_fn(tso_case, L)
    return QpTsoSide(master, L), xi0


def qp_dso_side(app: str, dso_case: ItdCase, dso: int) -> QpDsoSide:
    """One distribution side from that DSO's own view of the case."""
    layout_fn, _, slave_fn = _PARTS[app]
    slave, _ = slave_fn(dso_case, dso)
    return QpDsoSide(dso, slave, layout_fn(dso_case))


def _meas_dso(case: ItdCase, m) -> int | None:
    if m.kind == "flow":
        br = case.branch(m.branch)
        for b in (br.from_bus, br.to_bus):
            if case.bus(b).subsystem is Subsystem.SLAVE:
                return case.dso_of_slave(b)
        return None
    return case.dso_of_slave(m.bus)


def weighted_residuals(case: ItdCase, estimate: dict[int, float]) -> list[tuple[int, float]]:
    """(measurement id, (z - h(theta)) / sigma) for every measurement."""
    ids = sorted(estimate)
    col = {b: i for i, b in enumerate(ids)}
    th = np.array([estimate[b] for b in ids])
    out = []
    for m in case.measurements:
        h = measurement_row(case, m, col, len(ids)) @ th
        out.append((m.id, float((m.value - h) / m.sigma)))
    return out


# -- runners and prices --------------------------------------------------------------------------

@dataclass(frozen=True)
class LmpVector:
    buses: tuple[int, ...]
    prices: np.ndarray
    boundary: tuple[int, ...]
    lambda_mb: np.ndarray

    __hash__ = None  # type: ignore[assignment]

    def price(self, bus: int) -> float:
        return float(self.prices[self.buses.index(bus)])

    def rows(self) -> list[dict]:
        return [{"bus": b, "lmp": float(p)} for b, p in zip(self.buses, self.prices)]


def compute_lmps(solution: CoordSolution) -> LmpVector:
    if solution is None or solution.lmps is None:
        raise DispatchError("solution carries no prices (missing duals)")
    buses = tuple(sorted(solution.lmps))
    prices = np.array([solution.lmps[b] for b in buses])
    if not np.isfinite(prices).all():
        raise DispatchError("non-finite price")
    boundary = tuple(solution.extra.get("boundary", ()))
    return LmpVector(buses, prices, boundary, solution.xi.lam[0].copy())


def _run(prob: QpCoordinatedProblem, variant, cfg, eta_mode=None):
    sol, trace = run_hgd(prob, _cfg(cfg, variant, eta_mode))
    if sol is not None:
        sol.extra["boundary"] = prob.layout.boundary
    return sol, trace


def run_tdced(case: ItdCase, variant: Variant | str = Variant.BASIC, cfg: HgdConfig | None = None,
              eta_mode: str | None = None) -> tuple[CoordSolution, LmpVector, HgdTrace]:
    prob = build_tdced(case)
    sol, trace = _run(prob, variant, cfg, eta_mode)
    return sol, compute_lmps(sol), trace


def run_tdopf_dc(case: ItdCase, variant: Variant | str = Variant.BASIC, cfg: HgdConfig | None = None,
                 eta_mode: str | None = None) -> tuple[CoordSolution, LmpVector, HgdTrace]:
    prob = build_tdopf_dc(case)
    sol, trace = _run(prob, variant, cfg, eta_mode)
    return sol, compute_lmps(sol), trace


def run_tdse(case: ItdCase, variant: Variant | str = Variant.BASIC,
             cfg: HgdConfig | None = None) -> tuple[CoordSolution, HgdTrace]:
    prob = build_tdse(case)
    return _run(prob, variant, cfg)


def centralized_qp(prob: QpCoordinatedProblem) -> tuple[QpProblem, KktPoint]:
    """Solve the undecomposed problem directly (used for diagnostics and reports)."""
    qp, _ = global_qp(prob.master, prob.slaves, prob.layout)
    try:
        pt = solve_qp(qp)
    except SolverError as exc:
        raise DispatchError(f"centralized problem failed: {exc}") from exc
    return qp, pt
