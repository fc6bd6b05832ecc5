"""Generalized least squares as a weighting estimator.

Fits the linear model of the outcome on covariates and a binary treatment
under error covariance ``Sigma = sigma2 * I + rho2 * S``, computes the
implied unit-level weights in closed form,

    w = M (I - Sigma^-1 X (X' Sigma^-1 X)^-1 X') Sigma^-1 Z / denom,
    denom = Z' Sigma^-1 (I - X (X' Sigma^-1 X)^-1 X' Sigma^-1) Z,

with M = diag(2Z - 1), and exposes the ridge-equivalent fit and the
balance-dispersion curve. All solves go through a single symmetric
positive-definite factorization of Sigma; Sigma is never inverted
explicitly on the coefficient path.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla

from .data import SpatialDataset
from .errors import DegenerateError, ValidationError
from .structures import SpatialStructure

_DENOM_REL_TOL = 1e-12
_RIDGE_EIG_REL_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImpliedWeights:
    """Unit-level weights such that tau-hat is a weighted outcome contrast.

    ``w`` sums to one over each treatment arm; ``l`` is the signed version
    (l_i = w_i on treated, -w_i on controls) so that any linear functional
    imbalance is a plain inner product with ``l``. Weights may be negative.
    """

    w: np.ndarray
    l: np.ndarray
    dispersion: float
    covariate_imbalance: np.ndarray
    eigvec_imbalance: np.ndarray
    sum_treated: float
    sum_control: float
    objective_form: str  # "additive" when sigma2 > 0, else "general"

    def __post_init__(self):
        object.__setattr__(self, "w", _readonly(np.asarray(self.w, dtype=float)))
        object.__setattr__(self, "l", _readonly(np.asarray(self.l, dtype=float)))


@dataclass(frozen=True)
class GlsFit:
    beta_hat: np.ndarray
    tau_hat: float
    weights: ImpliedWeights
    sigma2: float
    rho2: float
    kind: str

    def __post_init__(self):
        object.__setattr__(
            self, "beta_hat", _readonly(np.asarray(self.beta_hat, dtype=float))
        )


def _sigma_cho(st: SpatialStructure):
    cov = st.covariance()
    try:
        return sla.cho_factor(cov, lower=True)
    except np.linalg.LinAlgError:
        raise DegenerateError("error covariance is not positive definite")


def _weights_core(cho, X: np.ndarray, Z: np.ndarray):
    """Signed weights l and the closed-form denominator, given chol(Sigma)."""
    Zf = Z.astype(float)
    SiX = sla.cho_solve(cho, X)
    SiZ = sla.cho_solve(cho, Zf)
    G = X.T @ SiX
    try:
        G_cho = sla.cho_factor(G, lower=True)
    except np.linalg.LinAlgError:
        raise DegenerateError("collinear design")
    u = SiZ - SiX @ sla.cho_solve(G_cho, X.T @ SiZ)
    denom = float(Zf @ u)
    if denom <= _DENOM_REL_TOL * float(Zf @ Zf):
        raise DegenerateError("treatment collinear with covariates")
    return u / denom, denom


def implied_weights(
    ds: SpatialDataset, st: SpatialStructure, n_eig_report: int = 10
) -> ImpliedWeights:
    """Closed-form implied weights of the GLS treatment coefficient.

    Available at the design stage: the outcome is not used. The returned
    weights exactly balance the covariate means between arms and sum to one
    in each arm.
    """
    if st.n != ds.n:
        raise ValidationError("structure size does not match dataset")
    cho = _sigma_cho(st)
    l, _ = _weights_core(cho, ds.X, ds.Z)
    M = 2.0 * ds.Z - 1.0
    w = M * l
    k = min(n_eig_report, st.n)
    return ImpliedWeights(
        w=w,
        l=l,
        dispersion=float(w @ w),
        covariate_imbalance=ds.X.T @ l,
        eigvec_imbalance=st.eigvecs[:, :k].T @ l,
        sum_treated=float(w[ds.Z == 1].sum()),
        sum_control=float(w[ds.Z == 0].sum()),
        objective_form="additive" if st.sigma2 > 0 else "general",
    )


def gls_fit(ds: SpatialDataset, st: SpatialStructure) -> GlsFit:
    """GLS coefficients via the normal equations, with implied weights attached."""
    if ds.Y is None:
        raise ValidationError("outcome required for fitting")
    cho = _sigma_cho(st)
    A = np.column_stack([ds.X, ds.Z.astype(float)])
    SiA = sla.cho_solve(cho, A)
    H = A.T @ SiA
    rhs = SiA.T @ ds.Y
    try:
        theta = sla.solve(H, rhs, assume_a="pos")
    except np.linalg.LinAlgError:
        raise DegenerateError("collinear design")
    weights = implied_weights(ds, st)
    return GlsFit(
        beta_hat=theta[:-1],
        tau_hat=float(theta[-1]),
        weights=weights,
        sigma2=st.sigma2,
        rho2=st.rho2,
        kind=st.kind,
    )


def ridge_fit(ds: SpatialDataset, st: SpatialStructure) -> GlsFit:
    """Equivalent penalized regression: outcome on (X, Z, eigenvectors of S).

    The coefficient of eigenvector v_j carries ridge penalty
    sigma2 / (rho2 * lambda_j); zero-eigenvalue directions have infinite
    penalty and are excluded. Solved by row augmentation and least squares
    rather than normal equations, for stability across the penalty range.
    """
    if ds.Y is None:
        raise ValidationError("outcome required for fitting")
    X, Z, Y = ds.X, ds.Z.astype(float), ds.Y
    n, p = X.shape
    lam = st.eigvals
    keep = (
        np.zeros(0, dtype=bool)
        if st.rho2 == 0.0
        else lam > _RIDGE_EIG_REL_TOL * max(lam[0], 0.0)
    )
    if st.rho2 == 0.0 or not np.any(keep):
        design = np.column_stack([X, Z])
        theta, *_ = np.linalg.lstsq(design, Y, rcond=None)
    else:
        Vk = st.eigvecs[:, keep]
        pen = np.sqrt(st.sigma2 / (st.rho2 * lam[keep]))
        r = Vk.shape[1]
        top = np.column_stack([X, Z, Vk])
        bottom = np.column_stack([np.zeros((r, p + 1)), np.diag(pen)])
        theta, *_ = np.linalg.lstsq(
            np.vstack([top, bottom]), np.concatenate([Y, np.zeros(r)]), rcond=None
        )
    weights = implied_weights(ds, st)
    return GlsFit(
        beta_hat=theta[:p],
        tau_hat=float(theta[p]),
        weights=weights,
        sigma2=st.sigma2,
        rho2=st.rho2,
        kind=f"ridge:{st.kind}",
    )


def complement_basis(X: np.ndarray, mix: np.ndarray | None = None) -> np.ndarray:
    """Columns spanning the orthogonal complement of col(X).

    Any basis of the complement yields the same projected quantities below;
    ``mix`` (an invertible matrix) produces an alternative basis for
    cross-checks.
    """
    n, p = X.shape
    Q, _ = np.linalg.qr(X, mode="complete")
    V0 = Q[:, p:]
    if mix is not None:
        V0 = V0 @ mix
    return V0


def _soft_balance_point(
    Z: np.ndarray,
    S: np.ndarray,
    sigma2: float,
    rho2: float,
    V0: np.ndarray,
) -> tuple[float, float]:
    """(balance budget, weight dispersion) at one rho2 via M = V0 (V0' Sigma V0)^-1 V0'."""
    cov = rho2 * S
    cov[np.diag_indices_from(cov)] += sigma2
    T = V0.T @ cov @ V0
    try:
        T_cho = sla.cho_factor(T, lower=True)
    except np.linalg.LinAlgError:
        raise DegenerateError("projected covariance not positive definite")
    u = V0 @ sla.cho_solve(T_cho, V0.T @ Z)  # = M Z
    zmz = float(Z @ u)
    if zmz <= 0:
        raise DegenerateError("treatment collinear with covariates")
    delta = float(u @ (S @ u)) / zmz**2
    dispersion = float(u @ u) / zmz**2
    return delta, dispersion


def balance_dispersion_curve(
    ds: SpatialDataset,
    st: SpatialStructure,
    rho2_grid,
    basis: np.ndarray | None = None,
    threads: int = 1,
) -> pd.DataFrame:
    """Soft-balance budget and weight dispersion along a rho2 grid.

    The budget column is the weighted sum of squared eigenvector imbalances
    achieved by the implied weights at each rho2 (non-increasing in rho2);
    the dispersion column is the sum of squared weights (non-decreasing and
    equal to the centered sum of squares plus 4/n).
    """
    grid = np.asarray(list(rho2_grid), dtype=float)
    if grid.size == 0:
        raise ValidationError("rho2 grid is empty")
    if np.any(grid <= 0):
        raise ValidationError("rho2 grid must be strictly positive")
    if np.any(np.diff(grid) < 0):
        raise ValidationError("rho2 grid must be sorted ascending")
    V0 = complement_basis(ds.X) if basis is None else basis
    Z = ds.Z.astype(float)

    def point(r2: float):
        return _soft_balance_point(Z, st.S, st.sigma2, r2, V0)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(point, grid))
    else:
        rows = [point(r2) for r2 in grid]
    return pd.DataFrame(
        {
            "rho2": grid,
            "balance_budget": [r[0] for r in rows],
            "dispersion": [r[1] for r in rows],
        }
    )


def minimal_dispersion_problem(ds: SpatialDataset, st: SpatialStructure) -> "QPProblem":
    """The equality-constrained QP whose solution is the implied weights.

    Objective: w' (M Sigma M) w with M = diag(2Z - 1), which expands to the
    weighted sum of the squared weights and the squared eigenvector
    imbalances. Constraints: weights sum to one in each arm and the signed
    covariate imbalances vanish (the intercept row is implied by the two sum
    constraints and dropped to keep the KKT system nonsingular).
    """
    from .qp import QPProblem

    Z = ds.Z.astype(float)
    M = 2.0 * Z - 1.0
    cov = st.covariance()
    Q = cov * np.outer(M, M)
    rows = [Z, 1.0 - Z]
    beq = [1.0, 1.0]
    for j in range(1, ds.p):
        rows.append(M * ds.X[:, j])
        beq.append(0.0)
    return QPProblem(Q=Q, Aeq=np.array(rows), beq=np.array(beq))


def fit_meta(fit: GlsFit, ds: SpatialDataset) -> dict:
    """JSON-serializable fit summary: named coefficients, tau, dispersion, ESS."""
    iw = fit.weights
    return {
        "kind": fit.kind,
        "sigma2": fit.sigma2,
        "rho2": fit.rho2,
        "beta": {name: float(b) for name, b in zip(ds.covariate_names, fit.beta_hat)},
        "tau": fit.tau_hat,
        "dispersion": iw.dispersion,
        "ess": 1.0 / iw.dispersion if iw.dispersion > 0 else None,
        "sum_w_treated": iw.sum_treated,
        "sum_w_control": iw.sum_control,
        "max_covariate_imbalance": float(np.abs(iw.covariate_imbalance).max()),
        "objective_form": iw.objective_form,
    }
