"""Spatial-confounding diagnostics.

* Moran's I in its normalized-to-[0,1] form, with an internal eigen-sum
  cross-check.
* The closed-form bound on the conditional bias from a spatially structured
  unmeasured confounder, and the tighter max-bias curve obtained by
  maximizing the realized imbalance over confounders with a fixed Moran's I
  (a two-multiplier eigenbasis program validated against a projected-gradient
  multistart oracle).
* Balance, localization, and effective-sample-size reports.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy.optimize import brentq, minimize_scalar

from .data import SpatialDataset, distances_for
from .errors import ValidationError
from .estimator import AugmentedDesign
from .gls import implied_weights
from .structures import RE, SpatialStructure

_SUPPORT_REL_TOL = 1e-13


@dataclass(frozen=True)
class MoranResult:
    value: float
    centered: bool
    kind: str


def morans_i(U: np.ndarray, st: SpatialStructure) -> MoranResult:
    """Normalized Moran's I of U with respect to S: in [0, 1], 1 = perfectly
    spatially autocorrelated.

    Computed from the quadratic form of the centered vector and cross-checked
    against the eigenvalue-weighted sum of squared eigenvector loadings.
    Undefined (raises) for constant input or a null structure.
    """
    U = np.asarray(U, dtype=float)
    if U.shape != (st.n,):
        raise ValidationError("U must have one entry per unit")
    Uc = U - U.mean()
    ss = float(Uc @ Uc)
    if ss <= 1e-12 * st.n * max(np.abs(U).max(initial=0.0) ** 2, 1e-300):
        raise ValidationError("Moran's I undefined for a constant vector")
    lam1 = float(st.eigvals[0])
    if lam1 <= 0:
        raise ValidationError("Moran's I undefined for a null structure")
    value = float(Uc @ (st.S @ Uc)) / (lam1 * ss)
    coeffs = st.eigvecs.T @ Uc
    value_eig = float(st.eigvals @ coeffs**2) / (lam1 * ss)
    if abs(value - value_eig) > 1e-8 * (1.0 + abs(value)):
        raise ValidationError(
            "inconsistent structure: quadratic-form and eigen-sum Moran's I differ"
        )
    if value > 1.0 + 1e-10 or value < -1e-10:
        raise ValidationError(f"Moran's I {value} outside [0, 1]")
    return MoranResult(value=max(value, 0.0), centered=True, kind=st.kind)


@dataclass(frozen=True)
class BiasBoundInput:
    """Inputs to the closed-form bias bound.

    gamma: confounder coefficient in the outcome model; moran: Moran's I of
    the confounder; ss_u: its centered sum of squares; c0: the weighting
    objective value sigma2*sum(w^2) + rho2*sum(lam_k * imbalance_k^2),
    equal to l' Sigma l for the signed weights l.
    """

    gamma: float
    moran: float
    ss_u: float
    c0: float

    def __post_init__(self):
        if self.c0 < 0 or self.ss_u < 0:
            raise ValidationError("c0 and ss_u must be nonnegative")


def weighting_objective_constant(l: np.ndarray, st: SpatialStructure) -> float:
    """c0 = l' (sigma2 I + rho2 S) l for signed weights l."""
    l = np.asarray(l, dtype=float)
    return float(st.sigma2 * (l @ l) + st.rho2 * (l @ (st.S @ l)))


def bias_bound_input(
    U: np.ndarray, gamma: float, l: np.ndarray, st: SpatialStructure
) -> BiasBoundInput:
    Uc = np.asarray(U, float) - np.mean(U)
    return BiasBoundInput(
        gamma=gamma,
        moran=morans_i(U, st).value,
        ss_u=float(Uc @ Uc),
        c0=weighting_objective_constant(l, st),
    )


def bias_bound(inp: BiasBoundInput, st: SpatialStructure) -> float:
    """Closed-form bound on |gamma * (weighted imbalance of U)|.

    Evaluates
        |gamma| * sqrt( c0 * (2 s + r l1 + r ln)^2 /
                        (4 (s + r l1)(s + r ln)(s + r l1 I)) * ss_u )
    with s = sigma2, r = rho2, l1/ln the extreme eigenvalues of S, and I the
    confounder's Moran's I. Positive sigma2 keeps every factor positive.
    """
    if st.sigma2 <= 0:
        raise ValidationError("bias bound requires sigma2 > 0")
    s, r = st.sigma2, st.rho2
    l1, ln = float(st.eigvals[0]), float(st.eigvals[-1])
    num = inp.c0 * (2.0 * s + r * l1 + r * ln) ** 2
    den = 4.0 * (s + r * l1) * (s + r * ln) * (s + r * l1 * inp.moran)
    return abs(inp.gamma) * math.sqrt(num / den * inp.ss_u)


def _centering_basis(n: int) -> np.ndarray:
    """Orthonormal columns spanning the complement of the all-ones vector."""
    return sla.null_space(np.ones((1, n)))


def _centered_spectrum(st: SpatialStructure):
    """Eigen-setup of S restricted to the centered subspace.

    Returns (E, eta) where the columns of E are centered orthonormal
    directions and eta are the corresponding Rayleigh quotients of S divided
    by lam1 (the attainable Moran's I values), descending.
    """
    C = _centering_basis(st.n)
    S_c = C.T @ st.S @ C
    mu, W = np.linalg.eigh(0.5 * (S_c + S_c.T))
    mu = np.clip(mu[::-1], 0.0, None)
    W = W[:, ::-1]
    lam1 = float(st.eigvals[0])
    if lam1 <= 0:
        raise ValidationError("max-bias curve undefined for a null structure")
    return C @ W, mu / lam1


def _family_dir(b, eta, theta):
    """Unit vector of the stationary family a_k ~ b_k / (cos(t) + sin(t)*eta_k).

    The angle sweeps the full arc of multiplier pairs with nonnegative
    denominators; a vanishing denominator concentrates mass on the affected
    coordinates (handled by the overflow guard).
    """
    d = math.cos(theta) + math.sin(theta) * eta
    with np.errstate(over="ignore", divide="ignore"):
        g = b / d
    if not np.all(np.isfinite(g)):
        g = np.where(np.isfinite(g), 0.0, np.sign(b))
    nrm = np.linalg.norm(g)
    if nrm == 0:
        return None
    return g / nrm


def _solve_support(b, eta, target):
    """Root-find the multiplier angle so the family hits the target alignment.

    The alignment h(theta) decreases continuously from the largest to the
    smallest eta on the support of b as theta sweeps its valid arc, so a
    bracketing root-find suffices. Returns (value, alignment) or None when
    the target is outside the support's range.
    """
    sup = np.abs(b) > _SUPPORT_REL_TOL * np.abs(b).max(initial=0.0)
    bs, es = b[sup], eta[sup]
    if bs.size == 0:
        return None
    e_hi, e_lo = float(es.max()), float(es.min())

    def h(theta):
        a = _family_dir(bs, es, theta)
        return float(es @ a**2)

    def value(theta):
        a = _family_dir(bs, es, theta)
        return float(np.abs(bs @ a))

    if e_hi - e_lo <= 1e-12:
        if abs(target - e_hi) <= 1e-9:
            return value(0.0), e_hi
        return None
    if target > e_hi + 1e-12 or target < e_lo - 1e-12:
        return None
    # Denominators stay positive for theta in (th_lo, th_hi).
    th_lo = -math.atan2(1.0, e_hi)
    th_hi = math.pi - math.atan2(1.0, e_lo) if e_lo > 0 else 0.5 * math.pi
    h0 = h(0.0)
    if abs(h0 - target) <= 1e-15:
        return value(0.0), h0
    if target > h0:
        lo_br = None
        for k in range(1, 60):
            cand = th_lo + (0.0 - th_lo) * 10.0 ** (-float(k))
            if h(cand) >= target:
                lo_br = cand
                break
        if lo_br is None:
            return None
        hi_br = 0.0
    else:
        hi_br = None
        for k in range(1, 60):
            cand = th_hi - (th_hi - 0.0) * 10.0 ** (-float(k))
            if h(cand) <= target:
                hi_br = cand
                break
        if hi_br is None:
            return None
        lo_br = 0.0
    if h(lo_br) == target:
        root = lo_br
    elif h(hi_br) == target:
        root = hi_br
    else:
        root = brentq(lambda t: h(t) - target, lo_br, hi_br, xtol=1e-14, rtol=8.9e-16)
    return value(root), h(root)


def _max_alignment_point(b, eta, target):
    """Max |b'a| subject to ||a|| = 1 and eta-weighted alignment = target.

    Stationary solutions have a_k proportional to b_k / (alpha + beta*eta_k);
    a one-dimensional root-find over the multiplier ratio covers targets within
    the range spanned by the support of b. Targets beyond that range (b has no
    loading on extreme directions) are handled by mixing in mass on a
    zero-loading direction, optimized by a scalar search.
    """
    e_max, e_min = float(eta.max()), float(eta.min())
    tol = 1e-9 * max(1.0, e_max)
    if target > e_max + tol or target < e_min - tol:
        return None
    target = min(max(target, e_min), e_max)
    direct = _solve_support(b, eta, target)
    if direct is not None:
        return direct[0]
    sup = np.abs(b) > _SUPPORT_REL_TOL * np.abs(b).max(initial=0.0)
    free_eta = eta[~sup]
    if free_eta.size == 0:
        return None
    es = eta[sup]
    e_sup_hi, e_sup_lo = es.max(initial=-np.inf), es.min(initial=np.inf)
    # Mix mass m^2 on a free direction to move the alignment across the gap.
    e_free = float(free_eta.max()) if target > e_sup_hi else float(free_eta.min())

    def neg_mixed(msq):
        if msq >= 1.0:
            return 0.0
        sub_target = (target - msq * e_free) / (1.0 - msq)
        sub = _solve_support(b, eta, sub_target)
        if sub is None:
            return 0.0
        return -math.sqrt(1.0 - msq) * sub[0]

    denom = e_free - (e_sup_hi if target > e_sup_hi else e_sup_lo)
    msq_min = (target - (e_sup_hi if target > e_sup_hi else e_sup_lo)) / denom
    msq_min = min(max(msq_min, 0.0), 1.0 - 1e-12)
    res = minimize_scalar(
        neg_mixed, bounds=(msq_min, 1.0 - 1e-12), method="bounded",
        options={"xatol": 1e-12},
    )
    best = -res.fun
    return best if best > 0 else None


def _ellipsoid_project(y, eta, target):
    """Nearest point with eta-weighted squared coordinates summing to target.

    Stationarity gives x = y / (1 + t * eta) with t solving a monotone
    secular equation; solved by safeguarded Newton.
    """
    e_max = float(eta.max(initial=0.0))
    if e_max <= 0:
        return None
    mass = eta * y**2
    if float(mass.sum()) <= 0:
        j = int(np.argmax(eta))
        y = y.copy()
        y[j] += 1e-8 if y[j] >= 0 else -1e-8
        mass = eta * y**2

    lo = -(1.0 / e_max) * (1.0 - 1e-12)
    hi = None

    def phi(t):
        return float((mass / (1.0 + t * eta) ** 2).sum()) - target

    if phi(lo) < 0:
        return None  # insufficient mass on the top directions
    if phi(0.0) >= 0:
        lo, cap = 0.0, 1.0
        while phi(cap) > 0:
            lo = cap
            cap = cap * 4.0 + 1.0
            if cap > 1e18:
                return None
        hi = cap
    else:
        hi = 0.0
    t = 0.5 * (lo + hi)
    for _ in range(60):
        d = 1.0 + t * eta
        val = float((mass / d**2).sum()) - target
        if val > 0:
            lo = t
        else:
            hi = t
        deriv = float((-2.0 * eta * mass / d**3).sum())
        t_new = t - val / deriv if deriv != 0 else 0.5 * (lo + hi)
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= 1e-15 * (1.0 + abs(t)):
            t = t_new
            break
        t = t_new
    return y / (1.0 + t * eta)


def _project_both(a, eta, target, rounds=30):
    """Alternate sphere normalization and quadric projection.

    Targets at the extreme attainable alignments collapse the feasible set to
    the unit sphere of the extreme eigenspace; those are projected directly.
    """
    e_max, e_min = float(eta.max()), float(eta.min())
    span_tol = 1e-12 * max(1.0, e_max)
    mask = None
    if target >= e_max - span_tol:
        mask = eta >= e_max - span_tol
    elif target <= e_min + span_tol:
        mask = eta <= e_min + span_tol
    if mask is not None:
        y = np.where(mask, a, 0.0)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            y = mask.astype(float)
            nrm = np.linalg.norm(y)
        return y / nrm
    for _ in range(rounds):
        nrm = np.linalg.norm(a)
        if nrm == 0:
            return None
        a = a / nrm
        if abs(float(eta @ a**2) - target) < 1e-12:
            return a
        proj = _ellipsoid_project(a, eta, target)
        if proj is None:
            return None
        a = proj
    # Newton correction along the two constraint normals; the alternating
    # phase converges slowly when the manifolds meet at a shallow angle.
    for _ in range(40):
        ea = eta * a
        f1 = float(a @ a) - 1.0
        f2 = float(eta @ a**2) - target
        if abs(f1) < 1e-13 and abs(f2) < 1e-13:
            break
        j11, j12 = 2.0 * float(a @ a), 2.0 * float(a @ ea)
        j21, j22 = j12, 2.0 * float(ea @ ea)
        det = j11 * j22 - j12 * j21
        if abs(det) <= 1e-14 * max(abs(j11 * j22), 1e-300):
            break
        s = (-f1 * j22 + f2 * j12) / det
        r = (-f2 * j11 + f1 * j21) / det
        a = a + s * a + r * ea
    nrm = np.linalg.norm(a)
    if nrm == 0:
        return None
    a = a / nrm
    if abs(float(eta @ a**2) - target) > 1e-10:
        return None
    return a


def pg_oracle(b, eta, target, restarts=20, iters=200, seed=0):
    """Projected-gradient multistart oracle for the max-alignment program.

    From random feasible starts, ascends b'a along the tangent of the two
    constraints with a backtracking step, re-projecting onto the manifold
    after every step. Returns the best value over the restarts, or None if
    no feasible point was found.
    """
    rng = np.random.default_rng([int(seed), 1])
    best = None
    b_norm = float(np.linalg.norm(b))
    starts = [b.copy()] + [rng.standard_normal(len(b)) for _ in range(restarts - 1)]
    for start in starts:
        a = _project_both(start, eta, target, rounds=60)
        if a is None:
            continue
        val = float(b @ a)
        step = 0.5
        for _ in range(iters):
            n1, n2 = a, eta * a
            g11, g12, g22 = float(n1 @ n1), float(n1 @ n2), float(n2 @ n2)
            det = g11 * g22 - g12 * g12
            r1, r2 = float(b @ n1), float(b @ n2)
            if abs(det) > 1e-14 * max(g11 * g22, 1e-300):
                c1 = (r1 * g22 - r2 * g12) / det
                c2 = (r2 * g11 - r1 * g12) / det
                grad = b - c1 * n1 - c2 * n2
            else:
                grad = b - r1 * n1  # constraints locally parallel
            gn = float(np.linalg.norm(grad))
            if gn <= 1e-12 * (1.0 + b_norm):
                break
            cand = _project_both(a + step * grad / gn, eta, target, rounds=12)
            if cand is None or float(b @ cand) <= val:
                step *= 0.5
                if step < 1e-13:
                    break
                continue
            a = cand
            val = float(b @ cand)
            step = min(step * 1.3, 1.0)
        val = abs(val)
        if best is None or val > best:
            best = val
    return best


def max_bias_curve(
    ds: SpatialDataset,
    st: SpatialStructure,
    moran_grid,
    gamma_grid=(1.0,),
    validate: bool = True,
    oracle_restarts: int = 20,
    seed: int = 0,
    threads: int = 1,
) -> pd.DataFrame:
    """Worst-case conditional bias as a function of the confounder's Moran's I.

    For each grid value I0, maximizes |l'U| over centered unit-norm U with
    Moran's I equal to I0, where l are the implied signed weights. Each point
    is solved in the eigenbasis of the centered-and-projected structure and,
    when ``validate`` is set, checked against the projected-gradient oracle
    (mismatch above 1e-4 relative raises). Unattainable I0 values are
    reported with feasible=False rather than raising.
    """
    l = implied_weights(ds, st).l
    E, eta = _centered_spectrum(st)
    b = E.T @ l
    e_lo, e_hi = float(eta.min()), float(eta.max())

    def point(i0: float):
        # Snap float-boundary targets onto the attainable range so the solver
        # and the oracle see the same problem.
        tol = 1e-9 * max(1.0, e_hi)
        target = min(max(i0, e_lo), e_hi) if e_lo - tol <= i0 <= e_hi + tol else i0
        val = _max_alignment_point(b, eta, target)
        if val is None:
            return i0, math.nan, False
        if validate:
            ref = pg_oracle(b, eta, target, restarts=oracle_restarts, seed=seed)
            if ref is not None and ref > val * (1.0 + 1e-4) + 1e-12:
                raise ValidationError(
                    f"max-bias solver mismatch at I0={i0}: {val} vs oracle {ref}"
                )
        return i0, val, True

    grid = list(moran_grid)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pts = list(pool.map(point, grid))
    else:
        pts = [point(i0) for i0 in grid]
    rows = []
    for i0, val, feas in pts:
        for g in gamma_grid:
            rows.append(
                {
                    "moran": i0,
                    "gamma_abs": abs(g),
                    "max_bias": abs(g) * val if feas else math.nan,
                    "feasible": feas,
                }
            )
    return pd.DataFrame(rows)


def balance_report(
    ds: SpatialDataset, w: np.ndarray, aug: AugmentedDesign | None = None
) -> pd.DataFrame:
    """Per-column treated mean, unweighted control mean, weighted control mean.

    ``w`` is a full-length weight vector normalized within each arm (GLS
    implied weights, or the spatial weighting vector with 1/n_t on treated).
    """
    w = np.asarray(w, dtype=float)
    cols = aug.B if aug is not None else ds.X
    names = list(aug.names) if aug is not None else list(ds.covariate_names)
    t, c = ds.Z == 1, ds.Z == 0
    treated = w[t] @ cols[t]
    before = cols[c].mean(axis=0)
    after = w[c] @ cols[c]
    return pd.DataFrame(
        {
            "name": names,
            "treated": treated,
            "control_before": before,
            "control_after": after,
            "imbalance": after - treated,
        }
    )


@dataclass(frozen=True)
class LocalizationReport:
    table: pd.DataFrame
    moran_l: float | None


def localization_report(
    ds: SpatialDataset, w: np.ndarray, st: SpatialStructure | None = None
) -> LocalizationReport:
    """Per-unit weight magnitude against proximity to the opposite arm.

    Proximity is the distance in meters to the nearest unit of the opposite
    treatment group; for a random-effects structure it is instead the
    proportion of opposite-group units within the unit's own cluster. When a
    structure is supplied, the Moran's I of the signed weights is attached.
    """
    w = np.asarray(w, dtype=float)
    l = np.where(ds.Z == 1, w, -w)
    if st is not None and st.kind == RE:
        prox = np.empty(ds.n)
        for i in range(ds.n):
            same = ds.cluster == ds.cluster[i]
            other = ds.Z[same] != ds.Z[i]
            prox[i] = other.mean()
        prox_name = "opposite_share_in_cluster"
    else:
        d = distances_for(ds).d
        opp = ds.Z[None, :] != ds.Z[:, None]
        masked = np.where(opp, d, np.inf)
        prox = masked.min(axis=1)
        prox_name = "meters_to_opposite"
    table = pd.DataFrame(
        {
            "id": list(ds.ids),
            "z": ds.Z,
            "w": w,
            "abs_w": np.abs(w),
            prox_name: prox,
        }
    )
    moran_l = morans_i(l, st).value if st is not None else None
    return LocalizationReport(table=table, moran_l=moran_l)


def effective_sample_size(w: np.ndarray) -> float:
    """(sum of squared weights)^-1."""
    w = np.asarray(w, dtype=float)
    ssq = float(w @ w)
    if ssq <= 0:
        raise ValidationError("effective sample size undefined for zero weights")
    return 1.0 / ssq
