"""Heterogeneous decomposition (HGD) fixed-point iteration between one TSO and several DSOs.

The TSO maps a boundary response y = [f; l] to a boundary state xi = [x; lam];
each DSO maps its slice of xi to its slice of y.  The engine alternates the two
maps, optionally corrected by a distribution-response function a(xi) (the DSO
subtracts it from what it sends and the TSO adds it back inside its model) or
by a transmission-response slope eta (the DSO adds a proximal term around its
previous boundary injection).

Vector layouts: a state is stored as x with shape (n_x, nb) and lam with shape
(n_f, nb); a response as f with shape (n_f, nb) and l with shape (n_x, nb).
Flattened vectors are row-major concatenations [x.ravel(), lam.ravel()] and
[f.ravel(), l.ravel()].
"""
from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Sequence

import numpy as np

from .kkt import DegenerateError, SingularMatrixError, SolverError, solve_linear

FD_STEP = 1e-6


class Variant(str, Enum):
    BASIC = "basic"
    MODIFIED_DIST = "modified-dist"
    MODIFIED_TRANS = "modified-trans"


class StartSide(str, Enum):
    FROM_DSP = "dsp"
    FROM_TSP = "tsp"


class SubproblemError(RuntimeError):
    """A subproblem failed; carries the iteration and the side that failed."""

    def __init__(self, message: str, iteration: int | None = None, side: str | None = None):
        self.iteration = iteration
        self.side = side
        where = []
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if side is not None:
            where.append(side)
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class InsufficientDataError(ValueError):
    pass


class RateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class HgdConfig:
    epsilon: float = 1e-6
    max_iter: int = 50
    variant: Variant = Variant.BASIC
    start_side: StartSide = StartSide.FROM_DSP
    initial_state: "BoundaryState | None" = None
    initial_response: "BoundaryResponse | None" = None
    # transmission-response slope provider: "sensitivity" or "secant"
    eta_mode: str = "sensitivity"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "start_side", StartSide(self.start_side))
        if self.eta_mode not in ("sensitivity", "secant"):
            raise ValueError(f"unknown eta mode {self.eta_mode!r}")


# -- boundary data ---------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryLayout:
    """Shape of the exchanged data and which parts actually travel."""

    boundary: tuple[int, ...]
    dso_of: tuple[int, ...]          # DSO index per boundary position
    x_names: tuple[str, ...]
    f_names: tuple[str, ...]
    send_x: bool = True
    send_lam: bool = True
    send_f: bool = True
    send_l: bool = True

    @property
    def nb(self) -> int:
        return len(self.boundary)

    @property
    def n_x(self) -> int:
        return len(self.x_names)

    @property
    def n_f(self) -> int:
        return len(self.f_names)

    @property
    def dsos(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.dso_of)))

    def columns(self, dso: int) -> list[int]:
        return [j for j, d in enumerate(self.dso_of) if d == dso]

    def xi_index(self, cols: Sequence[int] | None = None) -> np.ndarray:
        """Positions of the given boundary columns inside a flattened state."""
        cols = range(self.nb) if cols is None else cols
        nb = self.nb
        idx = [r * nb + j for r in range(self.n_x) for j in cols]
        off = self.n_x * nb
        idx += [off + r * nb + j for r in range(self.n_f) for j in cols]
        return np.array(idx, dtype=int)

    def y_index(self, cols: Sequence[int] | None = None) -> np.ndarray:
        cols = range(self.nb) if cols is None else cols
        nb = self.nb
        idx = [r * nb + j for r in range(self.n_f) for j in cols]
        off = self.n_f * nb
        idx += [off + r * nb + j for r in range(self.n_x) for j in cols]
        return np.array(idx, dtype=int)

    def sent_xi_mask(self) -> np.ndarray:
        nb = self.nb
        return np.concatenate([np.full(self.n_x * nb, self.send_x),
                               np.full(self.n_f * nb, self.send_lam)])

    def scalars_per_round_trip(self) -> int:
        """Exchanged scalars per boundary bus for one TSO->DSO->TSO round."""
        return (self.n_x * self.send_x + self.n_f * self.send_lam
                + self.n_f * self.send_f + self.n_x * self.send_l)

    def sub(self, dso: int) -> "BoundaryLayout":
        cols = self.columns(dso)
        return BoundaryLayout(tuple(self.boundary[j] for j in cols), (dso,) * len(cols),
                              self.x_names, self.f_names, self.send_x, self.send_lam,
                              self.send_f, self.send_l)


@dataclass(frozen=True)
class BoundaryState:
    x: np.ndarray
    lam: np.ndarray

    __hash__ = None  # type: ignore[assignment]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.x.ravel(), self.lam.ravel()])

    @staticmethod
    def from_vector(v: np.ndarray, n_x: int, n_f: int, nb: int) -> "BoundaryState":
        v = np.asarray(v, dtype=float)
        return BoundaryState(v[:n_x * nb].reshape(n_x, nb).copy(),
                             v[n_x * nb:].reshape(n_f, nb).copy())

    def columns(self, cols: Sequence[int]) -> "BoundaryState":
        cols = list(cols)
        return BoundaryState(self.x[:, cols].copy(), self.lam[:, cols].copy())

    @staticmethod
    def zeros(layout: BoundaryLayout) -> "BoundaryState":
        return BoundaryState(np.zeros((layout.n_x, layout.nb)), np.zeros((layout.n_f, layout.nb)))


@dataclass(frozen=True)
class BoundaryResponse:
    f: np.ndarray
    l: np.ndarray

    __hash__ = None  # type: ignore[assignment]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.f.ravel(), self.l.ravel()])

    @staticmethod
    def from_vector(v: np.ndarray, n_x: int, n_f: int, nb: int) -> "BoundaryResponse":
        v = np.asarray(v, dtype=float)
        return BoundaryResponse(v[:n_f * nb].reshape(n_f, nb).copy(),
                                v[n_f * nb:].reshape(n_x, nb).copy())

    def columns(self, cols: Sequence[int]) -> "BoundaryResponse":
        cols = list(cols)
        return BoundaryResponse(self.f[:, cols].copy(), self.l[:, cols].copy())

    def __sub__(self, other: "BoundaryResponse") -> "BoundaryResponse":
        return BoundaryResponse(self.f - other.f, self.l - other.l)

    @staticmethod
    def zeros(layout: BoundaryLayout) -> "BoundaryResponse":
        return BoundaryResponse(np.zeros((layout.n_f, layout.nb)), np.zeros((layout.n_x, layout.nb)))

    @staticmethod
    def merge(parts: Sequence[tuple[Sequence[int], "BoundaryResponse"]],
              layout: BoundaryLayout) -> "BoundaryResponse":
        out = BoundaryResponse.zeros(layout)
        for cols, r in parts:
            out.f[:, list(cols)] = r.f
            out.l[:, list(cols)] = r.l
        return out


# -- response functions ------------------------------------------------------------------

class DistResponse:
    """A distribution-response function a(xi) = [a_f; a_l] on one DSO's columns."""

    def value(self, xi: BoundaryState) -> BoundaryResponse:
        raise NotImplementedError

    def jacobian(self, xi: BoundaryState) -> np.ndarray:
        """d[a_f; a_l]/d[x; lam] in flattened layouts."""
        raise NotImplementedError


@dataclass(frozen=True)
class LinearResponse(DistResponse):
    """a(xi) = D xi."""

    D: np.ndarray
    n_x: int
    n_f: int

    def value(self, xi):
        nb = xi.x.shape[1]
        return BoundaryResponse.from_vector(self.D @ xi.vector(), self.n_x, self.n_f, nb)

    def jacobian(self, xi):
        return self.D


@dataclass(frozen=True)
class EquivalentResponse(DistResponse):
    """a_f = |v|^2 conj(y_eq) split into (p, q) rows; a_l = 0.

    Only meaningful for power-flow layouts with x = (|v|, angle) and f = (p, q).
    """

    y_eq: np.ndarray

    def value(self, xi):
        vm = xi.x[0]
        s = vm ** 2 * np.conj(self.y_eq)
        return BoundaryResponse(np.vstack([s.real, s.imag]), np.zeros_like(xi.x))

    def jacobian(self, xi):
        nb = xi.x.shape[1]
        vm = xi.x[0]
        d = 2.0 * vm * np.conj(self.y_eq)
        J = np.zeros((4 * nb, 4 * nb))
        J[:nb, :nb] = np.diag(d.real)
        J[nb:2 * nb, :nb] = np.diag(d.imag)
        return J


@dataclass(frozen=True)
class ResponseSet(DistResponse):
    """Per-DSO responses placed on their boundary columns."""

    layout: BoundaryLayout
    parts: tuple[tuple[tuple[int, ...], DistResponse], ...]

    def value(self, xi):
        return BoundaryResponse.merge(
            [(cols, r.value(xi.columns(cols))) for cols, r in self.parts], self.layout)

    def jacobian(self, xi):
        L = self.layout
        n = (L.n_x + L.n_f) * L.nb
        J = np.zeros((n, n))
        for cols, r in self.parts:
            J[np.ix_(L.y_index(cols), L.xi_index(cols))] = r.jacobian(xi.columns(cols))
        return J

    @property
    def y_eq(self) -> np.ndarray | None:
        """Full equivalent admittance vector if every part is an equivalent."""
        if not all(isinstance(r, EquivalentResponse) for _, r in self.parts):
            return None
        y = np.zeros(self.layout.nb, dtype=complex)
        for cols, r in self.parts:
            y[list(cols)] = r.y_eq
        return y


@dataclass(frozen=True)
class DistCorrection:
    """What the TSO needs for the corrected transmission subproblem."""

    response: ResponseSet
    xi_prev: BoundaryState

    def linear_parts(self) -> tuple[np.ndarray, np.ndarray]:
        """(a0, D) with a(xi) ~= a0 + D xi around xi_prev (exact for linear a)."""
        D = self.response.jacobian(self.xi_prev)
        a_prev = self.response.value(self.xi_prev).vector()
        return a_prev - D @ self.xi_prev.vector(), D

    def affine_in_x(self) -> tuple[np.ndarray, np.ndarray]:
        """(const, D_x) with a(x, lam_prev) ~= const + D_x x.vec (rows in y layout)."""
        a0, D = self.linear_parts()
        nx = self.xi_prev.x.size
        const = a0 + D[:, nx:] @ self.xi_prev.lam.ravel()
        return const, D[:, :nx]


@dataclass(frozen=True)
class TransCorrection:
    """Transmission-response slope and the previous injection, for one DSO."""

    eta: np.ndarray       # (n_f*nb_d, n_f*nb_d)
    f_prev: np.ndarray    # (n_f, nb_d)


# -- side contracts ----------------------------------------------------------------------------

@dataclass
class TsoResult:
    xi: BoundaryState
    detail: Any = None
    status: str = "ok"
    signature: Any = None
    slack: float = 0.0


@dataclass
class DsoResult:
    y: BoundaryResponse
    detail: Any = None
    response: DistResponse | None = None
    status: str = "ok"
    signature: Any = None
    slack: float = 0.0


class TsoSide:
    def solve(self, y: BoundaryResponse, correction: DistCorrection | None = None) -> TsoResult:
        raise NotImplementedError

    def price_sensitivity(self, result: TsoResult) -> np.ndarray:
        """d lam / d f_sp at the last solution, flattened (n_f*nb square)."""
        raise DegenerateError("this transmission side provides no price sensitivity")


class DsoSide:
    """One distribution operator. submit/collect allow remote, concurrent solves."""

    dso: int = 0
    _pending: tuple | None = None

    def solve(self, xi: BoundaryState, trans: TransCorrection | None = None,
              want_response: bool = False) -> DsoResult:
        raise NotImplementedError

    def submit(self, k: int, xi: BoundaryState, trans: TransCorrection | None = None,
               want_response: bool = False) -> None:
        self._pending = (xi, trans, want_response)

    def collect(self, k: int) -> DsoResult:
        xi, trans, want = self._pending
        self._pending = None
        return self.solve(xi, trans, want)


class CoordinatedProblem:
    """A decomposed problem: one TSO side, DSO sides, and assembly hooks."""

    layout: BoundaryLayout
    tso: TsoSide
    dsos: dict[int, DsoSide]

    def initial_state(self) -> BoundaryState:
        return BoundaryState.zeros(self.layout)

    def initial_response(self) -> BoundaryResponse:
        return BoundaryResponse.zeros(self.layout)

    def assemble(self, tso_result: TsoResult, dso_results: dict[int, DsoResult]) -> Any:
        return {"tso": tso_result, "dsos": dso_results}

    def global_kkt_residual(self, solution: Any) -> float | None:
        return None

    def refresh_for_assembly(self) -> bool:
        """Whether assembly re-solves the DSO sides at the final state."""
        return True


# -- trace -----------------------------------------------------------------------------------

@dataclass
class HgdIteration:
    k: int
    xi: BoundaryState
    y: BoundaryResponse
    y_sent: BoundaryResponse
    residual: float
    status: str
    ms: float
    eta: np.ndarray | None = None
    slack: float = 0.0
    note: str = ""


@dataclass
class HgdTrace:
    variant: Variant
    layout: BoundaryLayout
    xi0: BoundaryState
    iterations: list[HgdIteration] = field(default_factory=list)
    converged: bool = False
    global_kkt_residual: float | None = None
    lam_scale: float = 1.0
    messages: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.iterations)

    @property
    def residuals(self) -> np.ndarray:
        return np.array([it.residual for it in self.iterations])

    @property
    def final_state(self) -> BoundaryState:
        return self.iterations[-1].xi if self.iterations else self.xi0

    def states(self) -> np.ndarray:
        return np.array([it.xi.vector() for it in self.iterations])

    def total_slack(self) -> float:
        return float(sum(it.slack for it in self.iterations))

    def to_csv(self, out: io.TextIOBase | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "residual", "status", "ms"])
        for it in self.iterations:
            w.writerow([it.k, repr(float(it.residual)), it.status, f"{it.ms:.3f}"])
        text = buf.getvalue()
        if out is not None:
            out.write(text)
        return text

    def to_csv_deterministic(self) -> str:
        """CSV without wall-clock columns, for byte-identical comparisons."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "residual", "status"] + [f"xi{i}" for i in range(self.xi0.vector().size)])
        for it in self.iterations:
            w.writerow([it.k, repr(float(it.residual)), it.status]
                       + [repr(float(v)) for v in it.xi.vector()])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "boundary": list(self.layout.boundary),
            "converged": self.converged,
            "iterations": self.n_iter,
            "messages": self.messages,
            "global_kkt_residual": self.global_kkt_residual,
            "notes": list(self.notes),
            "trace": [{
                "k": it.k, "residual": it.residual, "status": it.status, "ms": it.ms,
                "x_B": it.xi.x.tolist(), "lambda_MB": it.xi.lam.tolist(),
                "f_BS": it.y.f.tolist(), "l_BS": it.y.l.tolist(),
                "f_sent": it.y_sent.f.tolist(), "l_sent": it.y_sent.l.tolist(),
                "slack": it.slack, "note": it.note,
            } for it in self.iterations],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


# -- engine ----------------------------------------------------------------------------------

def _residual(layout: BoundaryLayout, a: BoundaryState, b: BoundaryState, lam_scale: float) -> float:
    d = np.concatenate([(a.x - b.x).ravel(), lam_scale * (a.lam - b.lam).ravel()])
    d = d[layout.sent_xi_mask()]
    return float(np.abs(d).max(initial=0.0))


def _lam_scale(xi0: BoundaryState) -> float:
    return 1.0 / max(1.0, float(np.abs(xi0.lam).max(initial=0.0)))


class _Loop:
    """State carried across iterations of one run."""

    def __init__(self, p: CoordinatedProblem, cfg: HgdConfig):
        self.p = p
        self.cfg = cfg
        self.layout = p.layout
        self.eta: np.ndarray | None = None
        self.history: list[tuple[np.ndarray, np.ndarray]] = []   # (lam, f) pairs
        self.f_prev: BoundaryResponse | None = None
        self.messages = 0
        self.notes: list[str] = []
        self.secant_noted = False

    # one DSO round
    def solve_dsos(self, k: int, xi: BoundaryState) -> tuple[BoundaryResponse, dict[int, DsoResult]]:
        L = self.layout
        want = self.cfg.variant is Variant.MODIFIED_DIST
        # blocks the layout does not exchange never reach a DSO
        sent = BoundaryState(xi.x if L.send_x else np.zeros_like(xi.x),
                             xi.lam if L.send_lam else np.zeros_like(xi.lam))
        for d in L.dsos:
            cols = L.columns(d)
            trans = None
            if self.cfg.variant is Variant.MODIFIED_TRANS and self.eta is not None and self.f_prev is not None:
                yi = L.y_index(cols)[: L.n_f * len(cols)]
                trans = TransCorrection(self.eta[np.ix_(yi, yi)], self.f_prev.f[:, cols])
            try:
                self.p.dsos[d].submit(k, sent.columns(cols), trans, want)
            except SolverError as exc:
                raise SubproblemError(str(exc), k, f"DSO {d}") from exc
            self.messages += 1
        results: dict[int, DsoResult] = {}
        for d in L.dsos:
            try:
                results[d] = self.p.dsos[d].collect(k)
            except SubproblemError:
                raise
            except (SolverError, ArithmeticError) as exc:
                raise SubproblemError(str(exc), k, f"DSO {d}") from exc
            self.messages += 1
        y = BoundaryResponse.merge([(L.columns(d), results[d].y) for d in L.dsos], L)
        return y, results

    def solve_tso(self, k: int, y: BoundaryResponse, corr: DistCorrection | None) -> TsoResult:
        try:
            return self.p.tso.solve(y, corr)
        except (SolverError, ArithmeticError) as exc:
            raise SubproblemError(str(exc), k, "TSO") from exc

    def update_eta(self, k: int, tso_res: TsoResult, xi: BoundaryState, y_sent: BoundaryResponse):
        L = self.layout
        nf = L.n_f * L.nb
        self.history.append((xi.lam.ravel().copy(), y_sent.f.ravel().copy()))
        if self.cfg.eta_mode == "sensitivity":
            try:
                eta = self.p.tso.price_sensitivity(tso_res)
                self.eta = _psd_part(eta)
                return
            except (DegenerateError, SingularMatrixError) as exc:
                if not self.secant_noted:
                    self.notes.append(f"iteration {k}: price sensitivity unavailable ({exc}); secant used")
                    self.secant_noted = True
        # secant on the last two (lam, f) pairs; zero until two pairs exist
        if len(self.history) < 2:
            self.eta = np.zeros((nf, nf))
            return
        (l0, f0), (l1, f1) = self.history[-2], self.history[-1]
        prev = np.zeros(nf) if self.eta is None else np.diag(self.eta).copy()
        df, dl = f1 - f0, l1 - l0
        ok = np.abs(df) > 1e-9
        est = prev.copy()
        est[ok] = dl[ok] / df[ok]
        self.eta = np.diag(np.maximum(est, 0.0))


def _psd_part(M: np.ndarray) -> np.ndarray:
    S = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(S)
    return (V * np.maximum(w, 0.0)) @ V.T


def run_hgd(p: CoordinatedProblem, cfg: HgdConfig) -> tuple[Any, HgdTrace]:
    loop = _Loop(p, cfg)
    L = p.layout
    variant = cfg.variant
    k0_state = cfg.initial_state
    if cfg.start_side is StartSide.FROM_TSP:
        y0 = cfg.initial_response if cfg.initial_response is not None else p.initial_response()
        tso0 = loop.solve_tso(0, y0, None)
        xi = tso0.xi
    else:
        xi = k0_state if k0_state is not None else p.initial_state()
    trace = HgdTrace(variant, L, xi, lam_scale=_lam_scale(xi))
    tso_res: TsoResult | None = None
    dso_res: dict[int, DsoResult] = {}
    for k in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        y, dso_res = loop.solve_dsos(k, xi)
        y_sent = y
        corr = None
        note = ""
        if variant is Variant.MODIFIED_DIST:
            parts = []
            for d in L.dsos:
                r = dso_res[d].response
                if r is None:
                    raise SubproblemError("DSO provided no response function", k, f"DSO {d}")
                parts.append((tuple(L.columns(d)), r))
            rs = ResponseSet(L, tuple(parts))
            y_sent = y - rs.value(xi)
            corr = DistCorrection(rs, xi)
        tso_res = loop.solve_tso(k, y_sent, corr)
        new = tso_res.xi
        res = _residual(L, new, xi, trace.lam_scale)
        if variant is Variant.MODIFIED_TRANS:
            loop.update_eta(k, tso_res, new, y_sent)
            loop.f_prev = y_sent
        statuses = [tso_res.status] + [dso_res[d].status for d in L.dsos]
        status = "ok" if all(s == "ok" for s in statuses) else ";".join(statuses)
        slack = tso_res.slack + sum(r.slack for r in dso_res.values())
        trace.iterations.append(HgdIteration(
            k, new, y, y_sent, res, status, 1e3 * (time.perf_counter() - t0),
            eta=None if loop.eta is None else loop.eta.copy(), slack=slack, note=note))
        xi = new
        if res < cfg.epsilon:
            trace.converged = True
            break
    trace.messages = loop.messages
    trace.notes.extend(loop.notes)
    if tso_res is not None and p.refresh_for_assembly():
        # assembly only: slave parts re-evaluated at the final boundary state
        try:
            dso_res = {d: p.dsos[d].solve(xi.columns(L.columns(d)), None, False) for d in L.dsos}
        except (SolverError, ArithmeticError) as exc:
            trace.notes.append(f"assembly refresh failed: {exc}")
    solution = p.assemble(tso_res, dso_res) if tso_res is not None else None
    if solution is not None:
        trace.global_kkt_residual = p.global_kkt_residual(solution)
    return solution, trace


def _with_variant(cfg: HgdConfig | None, variant: Variant) -> HgdConfig:
    cfg = cfg or HgdConfig()
    return HgdConfig(cfg.epsilon, cfg.max_iter, variant, cfg.start_side, cfg.initial_state,
                     cfg.initial_response, cfg.eta_mode)


def run_basic_hgd(p: CoordinatedProblem, cfg: HgdConfig | None = None):
    return run_hgd(p, _with_variant(cfg, Variant.BASIC))


def run_modified_hgd_dist(p: CoordinatedProblem, cfg: HgdConfig | None = None):
    return run_hgd(p, _with_variant(cfg, Variant.MODIFIED_DIST))


def run_modified_hgd_trans(p: CoordinatedProblem, cfg: HgdConfig | None = None):
    return run_hgd(p, _with_variant(cfg, Variant.MODIFIED_TRANS))


# -- diagnostics --------------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralDiagnostic:
    rho: float
    jacobian: np.ndarray
    reliable: bool
    coordinates: np.ndarray   # positions in the flattened state that were probed

    __hash__ = None  # type: ignore[assignment]


def composite_sweep(p: CoordinatedProblem, xi: BoundaryState,
                    variant: Variant = Variant.BASIC) -> tuple[BoundaryState, list]:
    """One D-SP -> T-SP sweep from xi; returns the new state and subproblem signatures."""
    L = p.layout
    results = {d: p.dsos[d].solve(xi.columns(L.columns(d)), None,
                                  variant is Variant.MODIFIED_DIST) for d in L.dsos}
    y = BoundaryResponse.merge([(L.columns(d), results[d].y) for d in L.dsos], L)
    corr = None
    if variant is Variant.MODIFIED_DIST:
        rs = ResponseSet(L, tuple((tuple(L.columns(d)), results[d].response) for d in L.dsos))
        y = y - rs.value(xi)
        corr = DistCorrection(rs, xi)
    t = p.tso.solve(y, corr)
    sig = [t.signature] + [results[d].signature for d in L.dsos]
    return t.xi, sig


def composite_map_spectral_radius(p: CoordinatedProblem, xi_star: BoundaryState,
                                  variant: Variant = Variant.BASIC,
                                  step: float = FD_STEP) -> SpectralDiagnostic:
    """Spectral radius of the finite-difference Jacobian of one sweep at xi_star.

    Only exchanged state components are probed (dummy states are constant).
    """
    L = p.layout
    mask = L.sent_xi_mask()
    coords = np.flatnonzero(mask)
    v0 = xi_star.vector()
    _, sig0 = composite_sweep(p, xi_star, variant)
    J = np.zeros((coords.size, coords.size))
    reliable = True
    for c, i in enumerate(coords):
        outs = []
        for s in (+step, -step):
            v = v0.copy()
            v[i] += s
            xi = BoundaryState.from_vector(v, L.n_x, L.n_f, L.nb)
            try:
                out, sig = composite_sweep(p, xi, variant)
            except (SolverError, ArithmeticError) as exc:
                raise SubproblemError(f"probe failed: {exc}", None, "diagnostic") from exc
            if not _same_signature(sig, sig0):
                reliable = False
            outs.append(out.vector()[coords])
        J[:, c] = (outs[0] - outs[1]) / (2 * step)
    rho = float(np.abs(np.linalg.eigvals(J)).max(initial=0.0)) if J.size else 0.0
    return SpectralDiagnostic(rho, J, reliable, coords)


def _same_signature(a, b) -> bool:
    try:
        return all(np.array_equal(np.asarray(x, dtype=object), np.asarray(y, dtype=object))
                   if x is not None or y is not None else True for x, y in zip(a, b))
    except Exception:
        return a == b


def estimate_rate(trace: HgdTrace | Sequence[float]) -> float:
    """Geometric mean of successive residual ratios over the last half of the run."""
    r = trace.residuals if isinstance(trace, HgdTrace) else np.asarray(trace, dtype=float)
    if r.size < 4:
        raise InsufficientDataError(f"need at least 4 iterations, have {r.size}")
    tail = r[-(r.size // 2 + 1):]
    if (tail <= 0).any():
        raise InsufficientDataError("residual tail contains zeros")
    ratios = tail[1:] / tail[:-1]
    if (ratios >= 1).any():
        warnings.warn("residual tail is not monotonically decreasing", RateWarning, stacklevel=2)
    return float(np.exp(np.mean(np.log(ratios))))


# -- elastic slacks --------------------------------------------------------------------------------

class _ElasticProblem(CoordinatedProblem):
    def __init__(self, inner: CoordinatedProblem, penalty: float):
        self.inner = inner
        self.penalty = penalty
        self.layout = inner.layout
        self.tso = inner.tso.with_elastic(penalty) if hasattr(inner.tso, "with_elastic") else inner.tso
        self.dsos = {d: (s.with_elastic(penalty) if hasattr(s, "with_elastic") else s)
                     for d, s in inner.dsos.items()}

    def initial_state(self):
        return self.inner.initial_state()

    def initial_response(self):
        return self.inner.initial_response()

    def assemble(self, tso_result, dso_results):
        return self.inner.assemble(tso_result, dso_results)

    def global_kkt_residual(self, solution):
        return self.inner.global_kkt_residual(solution)

    def refresh_for_assembly(self):
        return self.inner.refresh_for_assembly()


def wrap_with_elastic_slacks(p: CoordinatedProblem, penalty: float) -> CoordinatedProblem:
    """Give every inequality system a nonnegative slack priced at `penalty` per unit.

    Sides without inequalities are left unchanged.  Slack usage appears in the
    trace (HgdIteration.slack).
    """
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    return _ElasticProblem(p, penalty)


# -- synthetic affine problem ----------------------------------------------------------------------

class _AffineTso(TsoSide):
    def __init__(self, M, m0, layout):
        self.M, self.m0, self.layout = M, m0, layout

    def solve(self, y, correction=None):
        L = self.layout
        rhs = y.vector() - self.m0
        A = self.M
        if correction is not None:
            a0, D = correction.linear_parts()
            # corrected map: M xi + m0 - (a0 + D xi) = y'
            A = self.M - D
            rhs = rhs + a0
        xi = solve_linear(A, rhs)
        return TsoResult(BoundaryState.from_vector(xi, L.n_x, L.n_f, L.nb))


class _AffineDso(DsoSide):
    def __init__(self, dso, A, a0, layout, cols, exact_response):
        self.dso, self.A, self.a0, self.layout, self.cols = dso, A, a0, layout, cols
        self.exact_response = exact_response

    def solve(self, xi, trans=None, want_response=False):
        L = self.layout
        nb = len(self.cols)
        y = self.A @ xi.vector() + self.a0
        resp = None
        if want_response:
            D = self.A if self.exact_response else np.zeros_like(self.A)
            resp = LinearResponse(D, L.n_x, L.n_f)
        return DsoResult(BoundaryResponse.from_vector(y, L.n_x, L.n_f, nb), response=resp)


class AffineCoordinatedProblem(CoordinatedProblem):
    """h_MB(xi) = M xi + m0 and h_BS(xi) = A xi + a0; fixed point solves (M - A) xi = a0 - m0.

    One DSO per boundary column group; A must be block-diagonal over DSOs.
    The sweep map is xi -> M^{-1}(A xi + a0 - m0).
    """

    def __init__(self, M, A, m0=None, a0=None, n_x=1, n_f=1, dso_of=None,
                 exact_response=True):
        M = np.asarray(M, float)
        A = np.asarray(A, float)
        n = M.shape[0]
        nb = n // (n_x + n_f)
        dso_of = tuple(dso_of) if dso_of is not None else (1,) * nb
        self.layout = BoundaryLayout(tuple(range(1, nb + 1)), dso_of,
                                     tuple(f"x{i}" for i in range(n_x)),
                                     tuple(f"f{i}" for i in range(n_f)))
        self.M, self.A = M, A
        self.m0 = np.zeros(n) if m0 is None else np.asarray(m0, float)
        self.a0 = np.zeros(n) if a0 is None else np.asarray(a0, float)
        self.tso = _AffineTso(M, self.m0, self.layout)
        self.dsos = {}
        L = self.layout
        for d in L.dsos:
            cols = L.columns(d)
            Ad = A[np.ix_(L.y_index(cols), L.xi_index(cols))]
            self.dsos[d] = _AffineDso(d, Ad, self.a0[L.y_index(cols)], L, cols, exact_response)

    def fixed_point(self) -> BoundaryState:
        L = self.layout
        v = np.linalg.solve(self.M - self.A, self.a0 - self.m0)
        return BoundaryState.from_vector(v, L.n_x, L.n_f, L.nb)

    def sweep_matrix(self) -> np.ndarray:
        return np.linalg.solve(self.M, self.A)

    def global_kkt_residual(self, solution):
        t, ds = solution["tso"], solution["dsos"]
        xi = t.xi.vector()
        return float(np.abs((self.M - self.A) @ xi - (self.a0 - self.m0)).max())
