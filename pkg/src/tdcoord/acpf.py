"""Newton AC power flow for the whole network and for each side of the boundary.

Mismatch convention: r = S_calc - S_spec with S_calc = V * conj(Y V).  The
unknowns are the angles of non-reference buses followed by the magnitudes of
PQ buses.  Boundary injections f_BS are positive when power leaves the
boundary bus into the slave network.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .kkt import DivergenceError, SingularMatrixError, solve_linear
from .model import (BusKind, ItdCase, Owner, Subsystem, assemble_admittance, bus_shunt,
                    dso_view)

PF_TOL = 1e-10
MAX_NEWTON = 30
MAX_SWITCH_ROUNDS = 10


class PowerFlowError(DivergenceError):
    pass


@dataclass(frozen=True)
class PfState:
    ids: tuple[int, ...]
    v_mag: np.ndarray
    v_ang: np.ndarray
    iterations: int = 0

    __hash__ = None  # type: ignore[assignment]

    @property
    def V(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def index(self, bus_id: int) -> int:
        return self.ids.index(bus_id)

    def take(self, ids: Sequence[int]) -> "PfState":
        pos = [self.ids.index(i) for i in ids]
        return PfState(tuple(ids), self.v_mag[pos].copy(), self.v_ang[pos].copy(), self.iterations)

    def voltage(self, bus_id: int) -> complex:
        i = self.index(bus_id)
        return complex(self.v_mag[i] * np.exp(1j * self.v_ang[i]))

    @staticmethod
    def merge(*parts: "PfState", order: Sequence[int] | None = None) -> "PfState":
        vm, va = {}, {}
        for p in parts:
            for i, b in enumerate(p.ids):
                vm[b], va[b] = p.v_mag[i], p.v_ang[i]
        ids = tuple(order) if order is not None else tuple(vm)
        return PfState(ids, np.array([vm[b] for b in ids]), np.array([va[b] for b in ids]))

    @staticmethod
    def flat(ids: Sequence[int]) -> "PfState":
        return PfState(tuple(ids), np.ones(len(ids)), np.zeros(len(ids)))


@dataclass(frozen=True)
class BoundaryInjection:
    p: np.ndarray
    q: np.ndarray

    __hash__ = None  # type: ignore[assignment]

    @property
    def s(self) -> np.ndarray:
        return self.p + 1j * self.q

    def as_array(self) -> np.ndarray:
        """Shape (2, nb): rows are p and q."""
        return np.vstack([self.p, self.q])

    @staticmethod
    def from_complex(s) -> "BoundaryInjection":
        s = np.asarray(s, dtype=complex)
        return BoundaryInjection(s.real.copy(), s.imag.copy())

    @staticmethod
    def zeros(n: int) -> "BoundaryInjection":
        return BoundaryInjection(np.zeros(n), np.zeros(n))


# -- derivatives -------------------------------------------------------------------

def power_derivatives(Y: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dS/dVm and dS/dVa of S = V conj(Y V) (complex, dense)."""
    I = Y @ V
    Vn = V / np.abs(V)
    dVm = np.diag(V) @ np.conj(Y @ np.diag(Vn)) + np.diag(np.conj(I) * Vn)
    dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - Y @ np.diag(V))
    return dVm, dVa


# -- generic network solver ------------------------------------------------------------

# correction(vm, va) -> (value (n,) complex added to the mismatch, dvalue/dvm, dvalue/dva)
Correction = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class PfNetwork:
    """One set of buses with its own admittance, injections and bus types."""

    ids: tuple[int, ...]
    Y: np.ndarray
    s_spec: np.ndarray
    kind: list[BusKind]
    v_set: np.ndarray
    ang_set: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    q_load: np.ndarray

    @property
    def ref(self) -> np.ndarray:
        return np.array([k is BusKind.SLACK for k in self.kind])

    @property
    def pv(self) -> np.ndarray:
        return np.array([k is BusKind.PV for k in self.kind])

    @property
    def pq(self) -> np.ndarray:
        return np.array([k is BusKind.PQ for k in self.kind])

    def unknown_index(self) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(~self.ref), np.flatnonzero(self.pq)

    def mismatch(self, V: np.ndarray, correction: Correction | None = None) -> np.ndarray:
        r = V * np.conj(self.Y @ V) - self.s_spec
        if correction is not None:
            r = r + correction(np.abs(V), np.angle(V))[0]
        return r

    def residual(self, V, correction=None) -> np.ndarray:
        ang, mag = self.unknown_index()
        r = self.mismatch(V, correction)
        return np.concatenate([r.real[ang], r.imag[mag]])

    def jacobian(self, V, correction=None) -> np.ndarray:
        ang, mag = self.unknown_index()
        dVm, dVa = power_derivatives(self.Y, V)
        if correction is not None:
            _, cm, ca = correction(np.abs(V), np.angle(V))
            dVm, dVa = dVm + cm, dVa + ca
        return np.block([
            [dVa.real[np.ix_(ang, ang)], dVm.real[np.ix_(ang, mag)]],
            [dVa.imag[np.ix_(mag, ang)], dVm.imag[np.ix_(mag, mag)]],
        ])

    def initial(self, warm: PfState | None = None) -> np.ndarray:
        vm = np.ones(len(self.ids))
        va = np.zeros(len(self.ids))
        if warm is not None:
            pos = {b: i for i, b in enumerate(warm.ids)}
            for i, b in enumerate(self.ids):
                if b in pos:
                    vm[i], va[i] = warm.v_mag[pos[b]], warm.v_ang[pos[b]]
        fixed_mag = ~self.pq
        vm[fixed_mag] = self.v_set[fixed_mag]
        va[self.ref] = self.ang_set[self.ref]
        return vm * np.exp(1j * va)

    def newton(self, V0: np.ndarray, correction: Correction | None = None,
               tol: float = PF_TOL, max_iter: int = MAX_NEWTON) -> tuple[np.ndarray, int]:
        ang, mag = self.unknown_index()
        na = len(ang)
        vm, va = np.abs(V0).astype(float), np.angle(V0).astype(float)
        for it in range(max_iter + 1):
            V = vm * np.exp(1j * va)
            r = self.residual(V, correction)
            norm = np.abs(r).max(initial=0.0)
            if not np.isfinite(norm) or norm > 1e6:
                raise PowerFlowError(f"power flow diverged at Newton iteration {it} (mismatch {norm:.3g})")
            if norm <= tol:
                return V, it
            if it == max_iter:
                break
            try:
                dx = solve_linear(self.jacobian(V, correction), r)
            except SingularMatrixError as exc:
                raise PowerFlowError(f"singular power flow Jacobian at iteration {it}") from exc
            va[ang] -= dx[:na]
            vm[mag] -= dx[na:]
            if (vm[mag] <= 0).any():
                raise PowerFlowError("voltage magnitude collapsed to zero")
        raise PowerFlowError(f"power flow did not converge in {max_iter} iterations (mismatch {norm:.3g})")

    def solve(self, warm: PfState | None = None, correction: Correction | None = None,
              tol: float = PF_TOL) -> tuple[PfState, "PfNetwork"]:
        """Newton with PV-to-PQ switching on reactive limits.

        Returns the state and the network with its final bus types.
        """
        net = self
        total = 0
        V = net.initial(warm)
        for _ in range(MAX_SWITCH_ROUNDS + 1):
            V, it = net.newton(V, correction, tol=tol)
            total += it
            switched = net._switch_pv(V, correction)
            if switched is None:
                return PfState(self.ids, np.abs(V), np.angle(V), total), net
            net = switched
        raise PowerFlowError("reactive limit switching did not settle")

    def _switch_pv(self, V, correction) -> "PfNetwork | None":
        pv = np.flatnonzero(self.pv)
        if not pv.size:
            return None
        s = V * np.conj(self.Y @ V)
        if correction is not None:
            s = s + correction(np.abs(V), np.angle(V))[0]
        q_gen = s.imag + self.q_load
        kind = list(self.kind)
        s_spec = self.s_spec.copy()
        changed = False
        for i in pv:
            lim = None
            if q_gen[i] > self.q_max[i] + 1e-9:
                lim = self.q_max[i]
            elif q_gen[i] < self.q_min[i] - 1e-9:
                lim = self.q_min[i]
            if lim is not None:
                kind[i] = BusKind.PQ
                s_spec[i] = complex(s_spec[i].real, lim - self.q_load[i])
                changed = True
        if not changed:
            return None
        return replace(self, kind=kind, s_spec=s_spec)


# -- network construction per scope ---------------------------------------------------

def _gen_sums(case: ItdCase, ids, include) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = {b: i for i, b in enumerate(ids)}
    s = np.zeros(len(ids), dtype=complex)
    qmin = np.zeros(len(ids))
    qmax = np.zeros(len(ids))
    for g in case.generators:
        if g.bus in pos and include(g):
            i = pos[g.bus]
            s[i] += complex(g.p, g.q)
            qmin[i] += g.q_min
            qmax[i] += g.q_max
    return s, qmin, qmax


def _network(case: ItdCase, ids, branches, shunts, include_gen, kinds=None,
             load=True, fixed: dict[int, complex] | None = None) -> PfNetwork:
    ids = tuple(ids)
    Y = assemble_admittance(ids, branches, shunts)
    s_gen, qmin, qmax = _gen_sums(case, ids, include_gen)
    buses = [case.bus(b) for b in ids]
    s_load = np.array([complex(b.p_load, b.q_load) if load else 0j for b in buses])
    kind = list(kinds) if kinds is not None else [b.kind for b in buses]
    v_set = np.array([b.v_mag for b in buses], dtype=float)
    ang_set = np.array([b.v_ang for b in buses], dtype=float)
    for b, v in (fixed or {}).items():
        i = ids.index(b)
        kind[i] = BusKind.SLACK
        v_set[i], ang_set[i] = abs(v), np.angle(v)
    # a PV bus with no reactive range behaves as PQ
    for i, k in enumerate(kind):
        if k is BusKind.PV and qmax[i] <= qmin[i]:
            kind[i] = BusKind.PQ
    return PfNetwork(ids, Y, s_gen - s_load, kind, v_set, ang_set, qmin, qmax,
                     s_load.imag.copy())


def central_network(case: ItdCase) -> PfNetwork:
    shunts = {b.id: bus_shunt(b) for b in case.buses}
    return _network(case, case.bus_order, case.active_branches, shunts, lambda g: True)


def master_network(case: ItdCase, f_sp: BoundaryInjection | None = None,
                   y_eq: np.ndarray | None = None) -> PfNetwork:
    """Master and boundary buses; boundary buses are PQ injecting -f_sp."""
    ids = case.master_ids + case.boundary
    keep = set(ids)
    branches = [br for br in case.active_branches
                if br.from_bus in keep and br.to_bus in keep]
    shunts = {}
    for b in ids:
        bus = case.bus(b)
        if bus.subsystem is not Subsystem.BOUNDARY or bus.shunt_owner is Owner.TSO:
            shunts[b] = bus_shunt(bus)
    if y_eq is not None:
        for k, b in enumerate(case.boundary):
            shunts[b] = shunts.get(b, 0j) + complex(y_eq[k])
    net = _network(case, ids, branches, shunts,
                   lambda g: case.generator_side(g) is Subsystem.MASTER)
    if f_sp is not None:
        nm = len(case.master_ids)
        net.s_spec[nm:] -= f_sp.s
    return net


def slave_network(case: ItdCase, v_B: np.ndarray, dso: int | None = None) -> PfNetwork:
    """Slave buses with the boundary buses held as fixed-voltage sources."""
    boundary = case.boundary if dso is None else case.dso_boundary(dso)
    slaves = case.slave_ids if dso is None else case.dso_slave_ids(dso)
    ids = tuple(boundary) + tuple(slaves)
    sl = set(slaves)
    branches = [br for br in case.active_branches if br.from_bus in sl or br.to_bus in sl]
    shunts = {b: bus_shunt(case.bus(b)) for b in slaves}
    for b in boundary:
        if case.bus(b).shunt_owner is Owner.DSO:
            shunts[b] = bus_shunt(case.bus(b))
    pos = {b: k for k, b in enumerate(case.boundary)}
    fixed = {b: complex(v_B[pos[b]]) for b in boundary}
    net = _network(case, ids, branches, shunts,
                   lambda g: case.generator_side(g) is Subsystem.SLAVE, fixed=fixed)
    # boundary loads belong to the TSO; DSO-owned boundary gens stay in s_spec
    for k, b in enumerate(boundary):
        bus = case.bus(b)
        net.s_spec[k] += complex(bus.p_load, bus.q_load)
    return net


# -- public operations --------------------------------------------------------------------

def boundary_voltages(x_B: PfState | np.ndarray, case: ItdCase) -> np.ndarray:
    if isinstance(x_B, PfState):
        return np.array([x_B.voltage(b) for b in case.boundary])
    return np.asarray(x_B, dtype=complex)


def solve_slave_pf(case: ItdCase, x_B: PfState | np.ndarray, dso: int | None = None,
                   warm: PfState | None = None) -> PfState:
    """Slave state for given boundary voltages (all DSOs, or one)."""
    v_B = boundary_voltages(x_B, case)
    slaves = case.slave_ids if dso is None else case.dso_slave_ids(dso)
    if not slaves:
        return PfState((), np.zeros(0), np.zeros(0))
    net = slave_network(case, v_B, dso)
    state, _ = net.solve(warm=warm)
    return state.take(slaves)


def compute_fbs(case: ItdCase, x_B: PfState | np.ndarray, x_S: PfState,
                dso: int | None = None) -> BoundaryInjection:
    """Power leaving each boundary bus into its slave network (boundary order)."""
    v_B = boundary_voltages(x_B, case)
    boundary = case.boundary if dso is None else case.dso_boundary(dso)
    pos = {b: k for k, b in enumerate(case.boundary)}
    vb = np.array([v_B[pos[b]] for b in boundary])
    net = slave_network(case, v_B, dso)
    full = PfState.merge(PfState(tuple(boundary), np.abs(vb), np.angle(vb)), x_S,
                         order=net.ids)
    V = full.V
    s = V * np.conj(net.Y @ V)
    nb = len(boundary)
    # slave_network s_spec at boundary rows is DSO-owned generation only
    out = s[:nb] - net.s_spec[:nb]
    return BoundaryInjection.from_complex(out)


def solve_master_pf(case: ItdCase, f_sp: BoundaryInjection, *,
                    y_eq: np.ndarray | None = None, correction: Correction | None = None,
                    warm: PfState | None = None) -> tuple[PfState, PfState]:
    """(master state, boundary state) for a specified boundary injection."""
    net = master_network(case, f_sp, y_eq)
    corr = None
    if correction is not None:
        nm, nb = len(case.master_ids), len(case.boundary)
        corr = _embed_boundary_correction(correction, nm, nb)
    state, _ = net.solve(warm=warm, correction=corr)
    return state.take(case.master_ids), state.take(case.boundary)


def _embed_boundary_correction(correction: Correction, nm: int, nb: int) -> Correction:
    """Lift a correction on boundary (vm, va) to the master+boundary bus vector."""
    n = nm + nb

    def lifted(vm, va):
        val, dm, da = correction(vm[nm:], va[nm:])
        v = np.zeros(n, dtype=complex)
        v[nm:] = val
        Dm = np.zeros((n, n), dtype=complex)
        Da = np.zeros((n, n), dtype=complex)
        Dm[nm:, nm:] = dm
        Da[nm:, nm:] = da
        return v, Dm, Da

    return lifted


def solve_centralized_pf(case: ItdCase, warm: PfState | None = None,
                         tol: float = PF_TOL) -> PfState:
    net = central_network(case)
    try:
        state, _ = net.solve(warm=warm, tol=tol)
    except PowerFlowError as exc:
        J = net.jacobian(net.initial(warm))
        cond = np.linalg.cond(J)
        raise PowerFlowError(f"{exc} (flat-start Jacobian condition {cond:.3g})") from exc
    return state


def pf_jacobian(case: ItdCase, state: PfState, scope: str = "central",
                f_sp: BoundaryInjection | None = None) -> np.ndarray:
    """Analytic Jacobian of the mismatch equations of the given scope at `state`."""
    if scope == "central":
        net = central_network(case)
    elif scope == "master":
        net = master_network(case, f_sp)
    elif scope == "slave":
        vb = np.array([state.voltage(b) for b in case.boundary])
        net = slave_network(case, vb)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    V = state.take(net.ids).V
    return net.jacobian(V)


def pf_residual(case: ItdCase, state: PfState, scope: str = "central",
                f_sp: BoundaryInjection | None = None) -> np.ndarray:
    if scope == "central":
        net = central_network(case)
    elif scope == "master":
        net = master_network(case, f_sp)
    elif scope == "slave":
        vb = np.array([state.voltage(b) for b in case.boundary])
        net = slave_network(case, vb)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return net.residual(state.take(net.ids).V)


def max_mismatch(case: ItdCase, state: PfState, scope: str = "central",
                 f_sp: BoundaryInjection | None = None) -> float:
    """Largest bus power mismatch, honoring reactive limits of PV buses."""
    r = pf_residual(case, state, scope, f_sp)
    return float(np.abs(r).max(initial=0.0))


def slave_response_matrix(case: ItdCase, v_B: np.ndarray, x_S: PfState,
                          dso: int | None = None) -> np.ndarray:
    """Total derivative of f_BS = [p; q] with respect to x_B = [|v|; angle].

    Obtained by implicit differentiation of the slave mismatch equations.
    Rows and columns use the (2, nb) layouts flattened row-major.
    """
    boundary = case.boundary if dso is None else case.dso_boundary(dso)
    net = slave_network(case, v_B, dso)
    state, net = net.solve(warm=PfState.merge(x_S, order=x_S.ids) if x_S.ids else None)
    V = state.V
    dVm, dVa = power_derivatives(net.Y, V)
    nb = len(boundary)
    ang, mag = net.unknown_index()
    bidx = np.arange(nb)
    # boundary partials of f (p rows, q rows) w.r.t. boundary [vm, va]
    Fb = np.block([[dVm.real[np.ix_(bidx, bidx)], dVa.real[np.ix_(bidx, bidx)]],
                   [dVm.imag[np.ix_(bidx, bidx)], dVa.imag[np.ix_(bidx, bidx)]]])
    if len(ang) == 0:
        return Fb
    Fs = np.block([[dVa.real[np.ix_(bidx, ang)], dVm.real[np.ix_(bidx, mag)]],
                   [dVa.imag[np.ix_(bidx, ang)], dVm.imag[np.ix_(bidx, mag)]]])
    Jss = net.jacobian(V)
    Jsb = np.block([[dVm.real[np.ix_(ang, bidx)], dVa.real[np.ix_(ang, bidx)]],
                    [dVm.imag[np.ix_(mag, bidx)], dVa.imag[np.ix_(mag, bidx)]]])
    return Fb - Fs @ solve_linear(Jss, Jsb)
