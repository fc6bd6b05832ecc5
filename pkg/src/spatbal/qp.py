"""Quadratic programming: direct KKT solves and an operator-splitting solver.

Two entry points:

* :func:`solve_eq` handles equality-constrained programs by factorizing the
  KKT system directly (one refinement pass); used for the minimal-dispersion
  weighting problem.
* :func:`solve_ineq` handles two-sided linear inequalities, equalities, and a
  nonnegativity bound via an ADMM scheme (proximal quadratic step alternated
  with projection onto the constraint box), followed by an active-set polish;
  used for the simplex-constrained weighting estimator.

Problems here are small (a few thousand variables at most), so dense
factorizations are used throughout and solves are deterministic given the
inputs and tolerances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateError, InfeasibleError, ValidationError

_EQ_RHO_FACTOR = 1e3
_RHO_MIN = 1e-8
_RHO_MAX = 1e8


@dataclass
class QPProblem:
    """min x'Qx + c'x subject to Aeq x = beq, lo <= Aineq x <= hi, x >= 0.

    Q must be symmetric PSD; any constraint block may be omitted. Use
    -inf/inf entries in lo/hi for one-sided rows.
    """

    Q: np.ndarray
    c: np.ndarray | None = None
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Aineq: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    nonneg: bool = False

    def dim(self) -> int:
        return self.Q.shape[0]

    def validate(self) -> None:
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValidationError("Q must be square")
        scale = 1.0 + np.abs(Q).max(initial=0.0)
        if np.abs(Q - Q.T).max(initial=0.0) > 1e-8 * scale:
            raise ValidationError("Q must be symmetric")
        m = Q.shape[0]
        if self.c is not None and np.shape(self.c) != (m,):
            raise ValidationError("c has wrong length")
        if (self.Aeq is None) != (self.beq is None):
            raise ValidationError("Aeq and beq must be supplied together")
        if self.Aeq is not None:
            if np.shape(self.Aeq)[1] != m or np.shape(self.Aeq)[0] != len(self.beq):
                raise ValidationError("equality constraint dimensions inconsistent")
        if self.Aineq is not None:
            k = np.shape(self.Aineq)[0]
            if np.shape(self.Aineq)[1] != m:
                raise ValidationError("inequality constraint dimensions inconsistent")
            if self.lo is None or self.hi is None:
                raise ValidationError("Aineq requires lo and hi")
            if np.shape(self.lo) != (k,) or np.shape(self.hi) != (k,):
                raise ValidationError("lo/hi have wrong length")
            if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
                raise ValidationError("lo > hi in some inequality row")


@dataclass
class QPSolution:
    x: np.ndarray
    objective: float
    kkt_stationarity_residual: float
    primal_feasibility_residual: float
    dual_eq: np.ndarray | None
    dual_ineq: np.ndarray | None
    dual_bound: np.ndarray | None
    iterations: int
    status: str  # optimal | max_iter | infeasible
    meta: dict = field(default_factory=dict)


def _objective(p: QPProblem, x: np.ndarray) -> float:
    val = float(x @ (p.Q @ x))
    if p.c is not None:
        val += float(np.asarray(p.c) @ x)
    return val


def solve_eq(p: QPProblem) -> QPSolution:
    """Direct KKT solve for an equality-constrained program.

    Requires Q positive definite on the nullspace of Aeq; a singular KKT
    system raises DegenerateError.
    """
    p.validate()
    if p.Aineq is not None or p.nonneg:
        raise ValidationError("solve_eq accepts equality constraints only")
    if p.Aeq is None:
        raise ValidationError("solve_eq requires equality constraints")
    m = p.dim()
    Aeq = np.asarray(p.Aeq, dtype=float)
    beq = np.asarray(p.beq, dtype=float)
    c = np.zeros(m) if p.c is None else np.asarray(p.c, dtype=float)
    k = Aeq.shape[0]
    K = np.zeros((m + k, m + k))
    K[:m, :m] = 2.0 * p.Q
    K[:m, m:] = Aeq.T
    K[m:, :m] = Aeq
    rhs = np.concatenate([-c, beq])
    try:
        lu = sla.lu_factor(K)
        sol = sla.lu_solve(lu, rhs)
        sol += sla.lu_solve(lu, rhs - K @ sol)  # one refinement pass
    except (np.linalg.LinAlgError, ValueError):
        raise DegenerateError("degenerate program")
    if not np.all(np.isfinite(sol)):
        raise DegenerateError("degenerate program")
    x, nu = sol[:m], sol[m:]
    stat = np.abs(2.0 * p.Q @ x + c + Aeq.T @ nu).max(initial=0.0)
    prim = np.abs(Aeq @ x - beq).max(initial=0.0)
    scale = 1.0 + np.abs(2.0 * p.Q @ x).max(initial=0.0) + np.abs(c).max(initial=0.0)
    if stat > 1e-8 * scale or prim > 1e-8 * (1.0 + np.abs(beq).max(initial=0.0)):
        raise DegenerateError("degenerate program")
    return QPSolution(
        x=x,
        objective=_objective(p, x),
        kkt_stationarity_residual=float(stat),
        primal_feasibility_residual=float(prim),
        dual_eq=nu,
        dual_ineq=None,
        dual_bound=None,
        iterations=1,
        status="optimal",
    )


def _stack_constraints(p: QPProblem):
    """Rows of A with box bounds [L, U]; returns (A, L, U, slices per block)."""
    m = p.dim()
    blocks, lows, highs = [], [], []
    slices = {}
    pos = 0
    if p.Aineq is not None:
        k = np.shape(p.Aineq)[0]
        blocks.append(np.asarray(p.Aineq, dtype=float))
        lows.append(np.asarray(p.lo, dtype=float))
        highs.append(np.asarray(p.hi, dtype=float))
        slices["ineq"] = slice(pos, pos + k)
        pos += k
    if p.Aeq is not None:
        k = np.shape(p.Aeq)[0]
        beq = np.asarray(p.beq, dtype=float)
        blocks.append(np.asarray(p.Aeq, dtype=float))
        lows.append(beq)
        highs.append(beq)
        slices["eq"] = slice(pos, pos + k)
        pos += k
    if p.nonneg:
        blocks.append(np.eye(m))
        lows.append(np.zeros(m))
        highs.append(np.full(m, np.inf))
        slices["bound"] = slice(pos, pos + m)
        pos += m
    if not blocks:
        return np.zeros((0, m)), np.zeros(0), np.zeros(0), slices
    return np.vstack(blocks), np.concatenate(lows), np.concatenate(highs), slices


def _polish(P, q, A, L, U, x, y):
    """Active-set refinement: equality-solve on the detected active rows.

    Returns (x, y, ok); ok is False when the polished point is worse or the
    reduced system could not be solved.
    """
    m = len(x)
    ytol = 1e-9 * (1.0 + np.abs(y).max(initial=0.0))
    eq_row = L == U
    low_act = (~eq_row) & (y < -ytol)
    up_act = (~eq_row) & (y > ytol)
    act = eq_row | low_act | up_act
    E = A[act]
    e = np.where(eq_row | low_act, L, U)[act]
    k = E.shape[0]
    K = np.zeros((m + k, m + k))
    K[:m, :m] = P
    K[:m, m:] = E.T
    K[m:, :m] = E
    rhs = np.concatenate([-q, e])
    try:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    except np.linalg.LinAlgError:
        return x, y, False
    if not np.all(np.isfinite(sol)):
        return x, y, False
    x_pol = sol[:m]
    y_pol = np.zeros_like(y)
    y_pol[act] = sol[m:]
    Ax = A @ x_pol
    viol = np.maximum(L - Ax, Ax - U)
    prim_pol = max(0.0, viol.max(initial=0.0))
    dual_pol = np.abs(P @ x_pol + q + A.T @ y_pol).max(initial=0.0)
    Ax_old = A @ x
    prim_old = max(
        0.0, np.maximum(L - Ax_old, Ax_old - U).max(initial=0.0)
    )
    dual_old = np.abs(P @ x + q + A.T @ y).max(initial=0.0)
    if max(prim_pol, dual_pol) <= max(prim_old, dual_old, 1e-12):
        return x_pol, y_pol, True
    return x, y, False


def solve_ineq(
    p: QPProblem,
    eps_primal: float = 1e-8,
    eps_dual: float = 1e-8,
    max_iter: int = 200_000,
    stall_window: int = 10_000,
) -> QPSolution:
    """ADMM solve of the boxed program, with residual-balanced step size.

    The penalty parameter is doubled/halved whenever the primal and dual
    residuals differ by a factor of ten. Primal residual stagnating above
    tolerance for ``stall_window`` iterations is treated as an infeasibility
    certificate and raises InfeasibleError. Degenerate flat optima resolve to
    the minimum-norm optimum of the proximal scheme (recorded in meta).
    """
    p.validate()
    m = p.dim()
    P = 2.0 * np.asarray(p.Q, dtype=float)
    q = np.zeros(m) if p.c is None else np.asarray(p.c, dtype=float)
    A, L, U, slices = _stack_constraints(p)
    n_rows = A.shape[0]
    if n_rows == 0:
        try:
            x = sla.solve(P, -q, assume_a="pos")
        except np.linalg.LinAlgError:
            raise DegenerateError("unconstrained objective is singular")
        return QPSolution(
            x=x,
            objective=_objective(p, x),
            kkt_stationarity_residual=float(np.abs(P @ x + q).max(initial=0.0)),
            primal_feasibility_residual=0.0,
            dual_eq=None,
            dual_ineq=None,
            dual_bound=None,
            iterations=0,
            status="optimal",
        )

    sigma = 1e-6
    alpha = 1.6
    rho0 = 0.1
    rho = np.full(n_rows, rho0)
    rho[L == U] = _EQ_RHO_FACTOR * rho0

    def factor(rho_vec):
        Kmat = P + sigma * np.eye(m) + (A.T * rho_vec) @ A
        return sla.cho_factor(Kmat, lower=True)

    cho = factor(rho)
    x = np.zeros(m)
    z = np.clip(np.zeros(n_rows), L, U)
    y = np.zeros(n_rows)

    status = "max_iter"
    best_rp = np.inf
    last_improve = 0
    it = 0
    check = 25
    adapt = 200
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + A.T @ (rho * z - y)
        x_t = sla.cho_solve(cho, rhs)
        Ax_t = A @ x_t
        x = alpha * x_t + (1.0 - alpha) * x
        z_rel = alpha * Ax_t + (1.0 - alpha) * z
        z_new = np.clip(z_rel + y / rho, L, U)
        y = y + rho * (z_rel - z_new)
        z = z_new
        if it % check == 0 or it == max_iter:
            Ax = A @ x
            r_p = np.abs(Ax - z).max(initial=0.0)
            r_d = np.abs(P @ x + q + A.T @ y).max(initial=0.0)
            if r_p <= eps_primal and r_d <= eps_dual:
                status = "optimal"
                break
            if r_p < best_rp * (1.0 - 1e-6):
                best_rp = r_p
                last_improve = it
            if r_p > eps_primal and it - last_improve >= stall_window:
                raise InfeasibleError("infeasible: loosen delta")
            if it % adapt == 0:
                if r_p > 10.0 * r_d and np.all(rho < _RHO_MAX):
                    rho = np.minimum(rho * 2.0, _RHO_MAX)
                    cho = factor(rho)
                elif r_d > 10.0 * r_p and np.all(rho > _RHO_MIN):
                    rho = np.maximum(rho / 2.0, _RHO_MIN)
                    cho = factor(rho)

    x, y, polished = _polish(P, q, A, L, U, x, y)
    Ax = A @ x
    prim = max(0.0, np.maximum(L - Ax, Ax - U).max(initial=0.0))
    stat = float(np.abs(P @ x + q + A.T @ y).max(initial=0.0))
    min_x = float(x.min(initial=0.0))
    if p.nonneg:
        x = np.maximum(x, 0.0)
    duals = {name: y[sl].copy() for name, sl in slices.items()}
    return QPSolution(
        x=x,
        objective=_objective(p, x),
        kkt_stationarity_residual=stat,
        primal_feasibility_residual=float(prim),
        dual_eq=duals.get("eq"),
        dual_ineq=duals.get("ineq"),
        dual_bound=duals.get("bound"),
        iterations=it,
        status=status,
        meta={"polished": polished, "min_x_before_clamp": min_x,
              "tie_break": "minimum-norm optimum of the proximal scheme"},
    )


def problem_to_json(p: QPProblem, sol: QPSolution | None = None, dense_limit: int = 500) -> str:
    """Debug dump of a problem (and optionally its solution) as JSON.

    Matrices are inlined for dimensions up to ``dense_limit`` and summarized
    beyond that.
    """

    def enc(a):
        if a is None:
            return None
        a = np.asarray(a)
        if a.size <= dense_limit * dense_limit and max(a.shape, default=0) <= dense_limit:
            return a.tolist()
        return {"shape": list(a.shape), "frobenius": float(np.linalg.norm(a))}

    doc = {
        "Q": enc(p.Q),
        "c": enc(p.c),
        "Aeq": enc(p.Aeq),
        "beq": enc(p.beq),
        "Aineq": enc(p.Aineq),
        "lo": enc(p.lo),
        "hi": enc(p.hi),
        "nonneg": p.nonneg,
    }
    if sol is not None:
        doc["solution"] = {
            "x": enc(sol.x),
            "objective": sol.objective,
            "status": sol.status,
            "iterations": sol.iterations,
            "kkt_stationarity_residual": sol.kkt_stationarity_residual,
            "primal_feasibility_residual": sol.primal_feasibility_residual,
        }
    return json.dumps(doc, sort_keys=True)
