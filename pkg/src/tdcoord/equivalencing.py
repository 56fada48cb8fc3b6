"""Static equivalent of a distribution network seen from its boundary buses.

The equivalent is the Kron reduction of the slave side onto the boundary:

    Y_eq = Y_BB(slave share) - Y_BS Y_SS^-1 Y_SB

It vanishes for shunt-free networks at nominal taps because every row of the
slave admittance sums to zero.  Under the linear power flow model

    v_S = u + Y_SS^-1 diag(conj(u))^-1 conj(s_S),   u = w v_B,   w = -Y_SS^-1 Y_SB

the boundary injection equals |v_B|^2 conj(Y_eq) plus a term independent of
v_B, so the response a_f(v_B) = |v_B|^2 conj(Y_eq) reproduces its derivative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acpf import BoundaryInjection, PfState, compute_fbs, solve_slave_pf
from .kkt import SingularMatrixError, solve_linear
from .model import AdmittanceBlocks, ItdCase, Owner, Subsystem, build_admittance, slave_components

FD_STEP = 1e-6


class EquivalencingError(ValueError):
    pass


@dataclass(frozen=True)
class SlaveEquivalent:
    boundary: tuple[int, ...]
    y_eq: np.ndarray        # per boundary bus (diagonal of the reduced matrix)
    matrix: np.ndarray      # full reduced matrix, boundary x boundary

    __hash__ = None  # type: ignore[assignment]


def equivalent_admittance(blocks: AdmittanceBlocks) -> SlaveEquivalent:
    Ybb = blocks.Y_BB_slave
    if len(blocks.slave_ids):
        try:
            red = solve_linear(blocks.Y_SS, blocks.Y_SB)
        except SingularMatrixError as exc:
            raise EquivalencingError("slave admittance block is singular") from exc
        Yeq = Ybb - blocks.Y_BS @ red
    else:
        Yeq = Ybb.copy()
    return SlaveEquivalent(tuple(blocks.boundary_ids), np.diag(Yeq).copy(), Yeq)


def case_equivalent(case: ItdCase) -> SlaveEquivalent:
    return equivalent_admittance(build_admittance(case))


def response_af(v_B: np.ndarray, eq: SlaveEquivalent | np.ndarray) -> np.ndarray:
    """(2, nb) array of [p; q] rows: |v_B|^2 conj(y_eq)."""
    y = eq.y_eq if isinstance(eq, SlaveEquivalent) else np.asarray(eq, dtype=complex)
    s = np.abs(np.asarray(v_B, dtype=complex)) ** 2 * np.conj(y)
    return np.vstack([s.real, s.imag])


def response_af_jacobian(v_B: np.ndarray, eq: SlaveEquivalent | np.ndarray) -> np.ndarray:
    """d[p; q]/d[|v|; angle] of response_af, shape (2nb, 2nb)."""
    y = eq.y_eq if isinstance(eq, SlaveEquivalent) else np.asarray(eq, dtype=complex)
    vm = np.abs(np.asarray(v_B, dtype=complex))
    nb = vm.size
    d = 2 * vm * np.conj(y)
    J = np.zeros((2 * nb, 2 * nb))
    J[:nb, :nb] = np.diag(d.real)
    J[nb:, :nb] = np.diag(d.imag)
    return J


def _slave_injections(case: ItdCase) -> np.ndarray:
    pos = {b: i for i, b in enumerate(case.slave_ids)}
    s = np.array([-complex(case.bus(b).p_load, case.bus(b).q_load) for b in case.slave_ids])
    for g in case.generators:
        if g.bus in pos:
            s[pos[g.bus]] += complex(g.p, g.q)
    return s


def open_circuit_ratio(blocks: AdmittanceBlocks) -> np.ndarray:
    """w = -Y_SS^-1 Y_SB: no-load slave voltages per unit boundary voltage."""
    return -solve_linear(blocks.Y_SS, blocks.Y_SB)


def linear_pf_slave(case: ItdCase, v_B: np.ndarray, blocks: AdmittanceBlocks | None = None) -> np.ndarray:
    """Slave voltages (case.slave_ids order) from the linear power flow model."""
    blocks = blocks or build_admittance(case)
    v_B = np.asarray(v_B, dtype=complex)
    if not len(case.slave_ids):
        return np.zeros(0, dtype=complex)
    try:
        w = open_circuit_ratio(blocks)
    except SingularMatrixError as exc:
        raise EquivalencingError("slave admittance block is singular") from exc
    u = w @ v_B
    if np.any(np.abs(u) < 1e-12):
        raise EquivalencingError("open-circuit voltage ratio has a zero component")
    s_S = _slave_injections(case)
    return u + solve_linear(blocks.Y_SS, np.conj(s_S) / np.conj(u))


def _single_boundary_check(case: ItdCase) -> None:
    for comp, attached in slave_components(case):
        if len(attached) != 1:
            raise EquivalencingError(
                f"slave component {list(comp)} is attached through {len(attached)} boundary buses; "
                "the linear-model identity needs exactly one")


def _fbs_linear(case: ItdCase, blocks: AdmittanceBlocks, v_B: np.ndarray) -> np.ndarray:
    v_S = linear_pf_slave(case, v_B, blocks)
    i_B = blocks.Y_BB_slave @ v_B + blocks.Y_BS @ v_S
    s = v_B * np.conj(i_B)
    for k, b in enumerate(case.boundary):
        for g in case.gens_at(b):
            if g.owner is Owner.DSO:
                s[k] -= complex(g.p, g.q)
    return s


def verify_af_exactness(case: ItdCase, v_B: np.ndarray | None = None, model: str = "linear",
                        step: float = FD_STEP) -> float:
    """Max |d f_BS/d x_B - d a_f/d x_B| with f_BS from the chosen slave model.

    model="linear" uses the linear power flow (where the identity is exact);
    model="ac" uses the full Newton slave solve (reported, not exact).
    """
    _single_boundary_check(case)
    blocks = build_admittance(case)
    eq = equivalent_admittance(blocks)
    if v_B is None:
        v_B = np.array([case.bus(b).v_mag * np.exp(1j * case.bus(b).v_ang) for b in case.boundary])
    v_B = np.asarray(v_B, dtype=complex)
    nb = v_B.size

    def fbs(x):
        vb = x[:nb] * np.exp(1j * x[nb:])
        if model == "linear":
            s = _fbs_linear(case, blocks, vb)
        elif model == "ac":
            xs = solve_slave_pf(case, vb)
            s = compute_fbs(case, vb, xs).s
        else:
            raise ValueError(f"unknown model {model!r}")
        return np.concatenate([s.real, s.imag])

    x0 = np.concatenate([np.abs(v_B), np.angle(v_B)])
    J = np.zeros((2 * nb, 2 * nb))
    for i in range(2 * nb):
        e = np.zeros(2 * nb)
        e[i] = step
        J[:, i] = (fbs(x0 + e) - fbs(x0 - e)) / (2 * step)
    return float(np.abs(J - response_af_jacobian(v_B, eq)).max())
