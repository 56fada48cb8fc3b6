"""Dense numerical kernels: linear solves, Newton iteration, convex QP and KKT sensitivity.

Sign convention for every QP in the package::

    min  1/2 z'Hz + c'z   s.t.  A_eq z = b_eq  [lam],   A_in z >= b_in  [omega >= 0]

    stationarity:  H z + c - A_eq' lam - A_in' omega = 0
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve


class SolverError(RuntimeError):
    pass


class SingularMatrixError(SolverError):
    pass


class DivergenceError(SolverError):
    pass


class InfeasibleError(SolverError):
    pass


class UnboundedError(SolverError):
    pass


class CycleError(SolverError):
    pass


class DegenerateError(SolverError):
    pass


# -- linear algebra --------------------------------------------------------------

def solve_linear(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LU with partial pivoting; raises on a pivot below 1e-12 of the matrix scale."""
    A = np.asarray(A)
    b = np.asarray(b)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"square matrix required, got shape {A.shape}")
    if A.shape[0] == 0:
        return np.zeros_like(b, dtype=np.result_type(A, b, float))
    scale = max(np.abs(A).max(), 1e-300)
    if not np.all(np.isfinite(A)):
        raise SingularMatrixError("matrix has non-finite entries")
    with warnings.catch_warnings():
        # exact zero pivots are reported below as SingularMatrixError
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(A, check_finite=False)
    if np.abs(np.diag(lu)).min() < 1e-12 * scale:
        raise SingularMatrixError("matrix is singular to working precision")
    x = lu_solve((lu, piv), b, check_finite=False)
    # one step of iterative refinement keeps residuals at round-off level
    r = b - A @ x
    x = x + lu_solve((lu, piv), r, check_finite=False)
    return x


def solve_newton(residual: Callable[[np.ndarray], np.ndarray],
                 jacobian: Callable[[np.ndarray], np.ndarray],
                 x0: np.ndarray, tol: float = 1e-10, max_iter: int = 30,
                 max_norm: float = 1e8) -> tuple[np.ndarray, int]:
    """Plain Newton iteration. Returns (x, iterations)."""
    x = np.array(x0, dtype=float)
    for it in range(max_iter + 1):
        r = np.asarray(residual(x), dtype=float)
        norm = np.abs(r).max() if r.size else 0.0
        if not np.isfinite(norm) or norm > max_norm:
            raise DivergenceError(f"Newton diverged at iteration {it} (|r| = {norm:.3g})")
        if norm <= tol:
            return x, it
        if it == max_iter:
            break
        dx = solve_linear(jacobian(x), r)
        x = x - dx
    raise DivergenceError(f"Newton did not converge in {max_iter} iterations (|r| = {norm:.3g})")


# -- QP data -------------------------------------------------------------------

def _mat(a, n):
    a = np.zeros((0, n)) if a is None else np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        a = a.reshape(0, n)
    return a


def _vec(b, m):
    b = np.zeros(m) if b is None else np.asarray(b, dtype=float).reshape(-1)
    return b


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        c = _vec(self.c, n)
        A_eq = _mat(self.A_eq, n)
        A_in = _mat(self.A_in, n)
        b_eq = _vec(self.b_eq, A_eq.shape[0])
        b_in = _vec(self.b_in, A_in.shape[0])
        if H.shape != (n, n) or c.shape != (n,):
            raise ValueError("H must be n x n and c length n")
        if A_eq.shape[1] != n or A_in.shape[1] != n:
            raise ValueError("constraint matrices must have n columns")
        if b_eq.shape[0] != A_eq.shape[0] or b_in.shape[0] != A_in.shape[0]:
            raise ValueError("right-hand sides do not match constraint rows")
        if np.abs(H - H.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(H).max(initial=0.0)):
            raise ValueError("H must be symmetric")
        for name, val in (("H", H), ("c", c), ("A_eq", A_eq), ("b_eq", b_eq),
                          ("A_in", A_in), ("b_in", b_in)):
            object.__setattr__(self, name, val)

    __hash__ = None  # type: ignore[assignment]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def m_in(self) -> int:
        return self.A_in.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.c @ z)


@dataclass(frozen=True)
class KktPoint:
    z: np.ndarray
    lam: np.ndarray
    omega: np.ndarray
    active_set: tuple[int, ...] = ()
    iterations: int = 0
    objective: float = float("nan")

    __hash__ = None  # type: ignore[assignment]


def kkt_residual(p: QpProblem, pt: KktPoint) -> float:
    """Largest violation among stationarity, feasibility, sign and complementarity."""
    z, lam, om = pt.z, pt.lam, pt.omega
    parts = [np.abs(p.H @ z + p.c - p.A_eq.T @ lam - p.A_in.T @ om).max(initial=0.0)]
    parts.append(np.abs(p.A_eq @ z - p.b_eq).max(initial=0.0))
    slack = p.A_in @ z - p.b_in
    parts.append(np.maximum(-slack, 0.0).max(initial=0.0))
    parts.append(np.maximum(-om, 0.0).max(initial=0.0))
    parts.append(np.abs(om * slack).max(initial=0.0))
    return float(max(parts))


# -- active-set QP ----------------------------------------------------------------

def _independent_rows(A: np.ndarray, b: np.ndarray, tol: float) -> tuple[np.ndarray, bool]:
    """Indices of a maximal independent row subset and whether the rest is consistent."""
    keep: list[int] = []
    for i in range(A.shape[0]):
        trial = keep + [i]
        sub = A[trial]
        s = np.linalg.svd(sub, compute_uv=False)
        if s.size and s[-1] > tol * max(1.0, s[0]):
            keep = trial
    consistent = True
    if len(keep) < A.shape[0]:
        z = np.linalg.lstsq(A[keep], b[keep], rcond=None)[0] if keep else np.zeros(A.shape[1])
        consistent = np.abs(A @ z - b).max() <= 1e-9 * max(1.0, np.abs(b).max())
    return np.array(keep, dtype=int), consistent


def _null_space(A: np.ndarray, n: int) -> np.ndarray:
    if A.shape[0] == 0:
        return np.eye(n)
    u, s, vt = np.linalg.svd(A)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0) * 10
    rank = int((s > tol).sum())
    return vt[rank:].T


class _Result(NamedTuple):
    z: np.ndarray
    work: list[int]
    iterations: int


def _active_set(H, c, Aeq, beq, Ain, bin_, z, work, max_iter, tol) -> _Result:
    """Primal active-set iterations from a feasible z with working set `work`."""
    n = H.shape[0]
    scale = max(1.0, np.abs(H).max(initial=0.0), np.abs(c).max(initial=0.0))
    for it in range(1, max_iter + 1):
        Aw = np.vstack([Aeq, Ain[work]]) if work else Aeq
        Z = _null_space(Aw, n)
        g = H @ z + c
        step = np.zeros(n)
        ray = False
        if Z.shape[1]:
            Hr = Z.T @ H @ Z
            Hr = 0.5 * (Hr + Hr.T)
            gr = Z.T @ g
            d, V = np.linalg.eigh(Hr)
            flat = d <= 1e-10 * scale
            gv = V.T @ gr
            if flat.any() and np.abs(gv[flat]).max() > 1e-11 * scale:
                # zero-curvature descent direction: move to the nearest blocking constraint
                step = -Z @ (V[:, flat] @ gv[flat])
                ray = True
            else:
                pos = ~flat
                step = -Z @ (V[:, pos] @ (gv[pos] / d[pos]))
        if not ray and np.abs(step).max(initial=0.0) <= 1e-12 * max(1.0, np.abs(z).max(initial=0.0)):
            mult = _multipliers(Aw, g)
            om_w = mult[Aeq.shape[0]:]
            if om_w.size == 0 or om_w.min() >= -tol * scale:
                return _Result(z, work, it)
            # drop the most negative multiplier, lowest index on ties
            worst = om_w.min()
            cand = [work[j] for j in range(len(work)) if om_w[j] <= worst + 1e-14 * scale]
            work = [w for w in work if w != min(cand)]
            continue
        alpha = np.inf if ray else 1.0
        block = -1
        Ap = Ain @ step
        slack = Ain @ z - bin_
        for i in range(Ain.shape[0]):
            if i in work or Ap[i] >= -1e-14 * max(1.0, np.abs(step).max()):
                continue
            a_i = max(slack[i], 0.0) / -Ap[i]
            if a_i < alpha - 1e-15:
                alpha, block = a_i, i
        if not np.isfinite(alpha):
            raise UnboundedError("objective is unbounded below on the feasible set")
        z = z + alpha * step
        if block >= 0:
            work = sorted(work + [block])
    raise CycleError(f"active-set iteration limit {max_iter} reached")


def _multipliers(Aw: np.ndarray, g: np.ndarray) -> np.ndarray:
    if Aw.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(Aw.T, g, rcond=None)[0]


def _initial_working_set(Aeq, Ain, bin_, z, tol) -> list[int]:
    work: list[int] = []
    slack = Ain @ z - bin_
    for i in np.argsort(np.abs(slack), kind="stable"):
        if abs(slack[i]) > tol * max(1.0, abs(bin_[i])):
            break
        trial = np.vstack([Aeq, Ain[work + [int(i)]]])
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] > 1e-9 * max(1.0, s[0]) and trial.shape[0] <= Ain.shape[1]:
            work.append(int(i))
    return sorted(work)


def _phase_one(Aeq, beq, Ain, bin_, max_iter) -> np.ndarray:
    n = Aeq.shape[1]
    z0 = np.linalg.lstsq(Aeq, beq, rcond=None)[0] if Aeq.shape[0] else np.zeros(n)
    if Ain.shape[0] == 0:
        return z0
    viol = bin_ - Ain @ z0
    t0 = max(0.0, float(viol.max()))
    if t0 <= 1e-12 * max(1.0, np.abs(bin_).max()):
        return z0
    # min t  s.t.  A_eq z = b_eq,  A_in z + t >= b_in,  t >= 0
    H = np.zeros((n + 1, n + 1))
    c = np.zeros(n + 1)
    c[-1] = 1.0
    Aeq1 = np.hstack([Aeq, np.zeros((Aeq.shape[0], 1))])
    Ain1 = np.vstack([np.hstack([Ain, np.ones((Ain.shape[0], 1))]),
                      np.eye(1, n + 1, n)])
    bin1 = np.concatenate([bin_, [0.0]])
    y0 = np.concatenate([z0, [t0]])
    work = _initial_working_set(Aeq1, Ain1, bin1, y0, 1e-12)
    res = _active_set(H, c, Aeq1, beq, Ain1, bin1, y0, work, max_iter, 1e-12)
    t = res.z[-1]
    if t > 1e-8 * max(1.0, np.abs(bin_).max(), np.abs(beq).max(initial=0.0)):
        raise InfeasibleError(f"no point satisfies the constraints (violation {t:.3g})")
    return res.z[:-1]


def solve_qp(p: QpProblem, max_iter: int | None = None, tol: float = 1e-10) -> KktPoint:
    """Primal active-set method for convex (possibly only PSD) QPs."""
    n = p.n
    if max_iter is None:
        max_iter = 50 * (n + p.m_in) + 100
    if n and np.linalg.eigvalsh(p.H).min() < -1e-9 * max(1.0, np.abs(p.H).max()):
        raise ValueError("H is not positive semidefinite")
    keep, consistent = _independent_rows(p.A_eq, p.b_eq, 1e-10)
    if not consistent:
        raise InfeasibleError("equality constraints are inconsistent")
    Aeq, beq = p.A_eq[keep], p.b_eq[keep]
    z = _phase_one(Aeq, beq, p.A_in, p.b_in, max_iter)
    work = _initial_working_set(Aeq, p.A_in, p.b_in, z, 1e-10)
    res = _active_set(p.H, p.c, Aeq, beq, p.A_in, p.b_in, z, work, max_iter, tol)
    z, work = _polish(p, Aeq, beq, res.z, res.work)
    Aw = np.vstack([Aeq, p.A_in[work]]) if work else Aeq
    mult = _multipliers(Aw, p.H @ z + p.c)
    lam = np.zeros(p.m_eq)
    lam[keep] = mult[:len(keep)]
    omega = np.zeros(p.m_in)
    omega[work] = np.maximum(mult[len(keep):], 0.0)
    slack = p.A_in @ z - p.b_in
    tight = tuple(int(i) for i in np.flatnonzero(np.abs(slack) <= 1e-9 * np.maximum(1.0, np.abs(p.b_in))))
    active = tuple(sorted(set(tight) | set(work)))
    return KktPoint(z=z, lam=lam, omega=omega, active_set=active,
                    iterations=res.iterations, objective=p.objective(z))


def _polish(p: QpProblem, Aeq, beq, z, work):
    """Re-solve the final equality-constrained KKT system to clean up round-off."""
    Aw = np.vstack([Aeq, p.A_in[work]]) if work else Aeq
    bw = np.concatenate([beq, p.b_in[work]])
    m = Aw.shape[0]
    K = np.block([[p.H, -Aw.T], [Aw, np.zeros((m, m))]])
    rhs = np.concatenate([-p.c, bw])
    try:
        sol = solve_linear(K, rhs)
    except SingularMatrixError:
        return z, work
    zn = sol[:p.n]
    slack = p.A_in @ zn - p.b_in
    if slack.size and slack.min() < -1e-9 * max(1.0, np.abs(p.b_in).max()):
        return z, work
    return zn, work


# -- sensitivity -----------------------------------------------------------------

class KktSensitivity(NamedTuple):
    dz: np.ndarray
    dlam: np.ndarray
    domega: np.ndarray


def kkt_sensitivity(p: QpProblem, pt: KktPoint, d_c: np.ndarray | None = None,
                    d_b_eq: np.ndarray | None = None, d_b_in: np.ndarray | None = None,
                    tol: float = 1e-9) -> KktSensitivity:
    """Directional derivatives of (z, lam, omega) for perturbations of c, b_eq, b_in.

    Each direction may be a vector or a matrix with one column per direction.
    Tight inequalities are held as equalities; a tight inequality with a zero
    multiplier (weak activity) makes the derivative one-sided and is rejected.
    """
    active = list(pt.active_set)
    scale = max(1.0, np.abs(pt.omega).max(initial=0.0))
    weak = [i for i in active if pt.omega[i] <= tol * scale]
    if weak:
        raise DegenerateError(f"strict complementarity fails on constraints {weak}")
    n, me = p.n, p.m_eq
    Aw = np.vstack([p.A_eq, p.A_in[active]])
    m = Aw.shape[0]

    def cols(v, rows):
        if v is None:
            return None
        v = np.asarray(v, dtype=float)
        return v.reshape(rows, 1) if v.ndim <= 1 else v.reshape(rows, v.shape[-1])

    dc, dbe, dbi = cols(d_c, n), cols(d_b_eq, me), cols(d_b_in, p.m_in)
    k = next((v.shape[1] for v in (dc, dbe, dbi) if v is not None), 1)
    dc = np.zeros((n, k)) if dc is None else dc
    dbe = np.zeros((me, k)) if dbe is None else dbe
    dbi = np.zeros((p.m_in, k)) if dbi is None else dbi
    K = np.block([[p.H, -Aw.T], [Aw, np.zeros((m, m))]])
    rhs = np.vstack([-dc, dbe, dbi[active]])
    sol = solve_linear(K, rhs)
    dz = sol[:n]
    dlam = sol[n:n + me]
    dom = np.zeros((p.m_in, k))
    dom[active] = sol[n + me:]
    squeeze = all(np.ndim(v) <= 1 for v in (d_c, d_b_eq, d_b_in) if v is not None)
    if squeeze:
        dz, dlam, dom = dz[:, 0], dlam[:, 0], dom[:, 0]
    return KktSensitivity(dz, dlam, dom)
