"""Spatial weighting ATT estimator.

Augments the covariates with leading eigenvectors drawn from one or more
spatial structures, solves for nonnegative control-group weights of minimal
dispersion subject to per-function balance tolerances, and estimates the
average treatment effect on the treated as the difference between the treated
outcome mean and the weighted control outcome mean. Includes the causal risk
ratio, a unit-resampling bootstrap, and the finite-sample bias/variance bound.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import SpatialDataset
from .errors import InfeasibleError, ValidationError
from .gls import implied_weights
from .qp import QPProblem, QPSolution, solve_ineq
from .structures import SpatialStructure

_RR_GUARD = 1e-12
_POS_EIG_REL_TOL = 1e-12  # an eigenvalue this far below the top is noise

BASIS_CHOICES = ("linear", "quad", "interact")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _fix_sign(v: np.ndarray) -> np.ndarray:
    """Deterministic orientation: first nonzero coordinate positive."""
    tol = 1e-12 * np.abs(v).max(initial=0.0)
    for val in v:
        if abs(val) > tol:
            return -v if val < 0 else v
    return v


def select_eigenvectors(
    structures: list[SpatialStructure], counts: list[int]
) -> tuple[np.ndarray, list[str], list[dict]]:
    """Top eigenvectors (by eigenvalue, descending) from each structure.

    Requests that reach into the zero-eigenvalue tail are truncated with a
    warning: those directions carry no spatial signal under their structure.
    Returns (columns, names, provenance).
    """
    if len(structures) != len(counts):
        raise ValidationError("one count per structure required")
    cols, names, prov = [], [], []
    for st, count in zip(structures, counts):
        if count < 0:
            raise ValidationError("eigenvector counts must be nonnegative")
        n_pos = int(np.sum(st.eigvals > _POS_EIG_REL_TOL * max(st.eigvals[0], 0.0)))
        take = min(count, n_pos)
        if take < count:
            warnings.warn(
                f"{st.kind}: requested {count} eigenvectors but only {n_pos} have "
                "positive eigenvalues; zero-eigenvalue directions dropped"
            )
        for k in range(take):
            cols.append(_fix_sign(st.eigvecs[:, k].copy()))
            names.append(f"v{k + 1}_{st.kind}")
            prov.append(
                {"kind": st.kind, "index": k + 1, "eigval": float(st.eigvals[k])}
            )
    V = np.column_stack(cols) if cols else np.zeros((structures[0].n, 0))
    return V, names, prov


@dataclass(frozen=True)
class AugmentedDesign:
    """Covariates plus selected eigenvectors, with evaluated balance functions.

    ``B`` holds one column per balance function: the identity on every
    column of (X, V) and, depending on ``basis``, standardized squares
    ("quad") or squares plus pairwise interactions ("interact") of the
    non-intercept covariates. ``groups`` tags each column as "covariate",
    "eigenvector", or "poly" for tolerance defaults.
    """

    X_aug: np.ndarray
    B: np.ndarray
    names: tuple[str, ...]
    groups: tuple[str, ...]
    provenance: tuple[dict | None, ...]
    basis: str

    def __post_init__(self):
        object.__setattr__(self, "X_aug", _readonly(np.asarray(self.X_aug, float)))
        object.__setattr__(self, "B", _readonly(np.asarray(self.B, float)))
        if self.B.shape[1] < self.X_aug.shape[1]:
            raise ValidationError("basis must cover every augmented column")

    @property
    def n_functions(self) -> int:
        return self.B.shape[1]


def _standardize(col: np.ndarray) -> np.ndarray:
    sd = col.std()
    return (col - col.mean()) / (sd if sd > 0 else 1.0)


def augment(
    ds: SpatialDataset,
    structures: list[SpatialStructure],
    counts: list[int],
    basis: str = "linear",
) -> AugmentedDesign:
    """Build the augmented design and its balance functions."""
    if basis not in BASIS_CHOICES:
        raise ValidationError(f"basis must be one of {BASIS_CHOICES}")
    if structures:
        V, vnames, vprov = select_eigenvectors(structures, counts)
    else:
        V, vnames, vprov = np.zeros((ds.n, 0)), [], []
    X_aug = np.column_stack([ds.X, V]) if V.shape[1] else ds.X.copy()
    names = list(ds.covariate_names) + vnames
    groups = ["covariate"] * ds.p + ["eigenvector"] * V.shape[1]
    prov: list[dict | None] = [None] * ds.p + list(vprov)
    B_cols = [X_aug[:, j] for j in range(X_aug.shape[1])]
    if basis in ("quad", "interact"):
        for j in range(1, ds.p):
            sj = _standardize(ds.X[:, j])
            B_cols.append(_standardize(sj**2))
            names.append(f"{ds.covariate_names[j]}^2")
            groups.append("poly")
            prov.append(None)
        if basis == "interact":
            for j in range(1, ds.p):
                for k in range(j + 1, ds.p):
                    sj = _standardize(ds.X[:, j])
                    sk = _standardize(ds.X[:, k])
                    B_cols.append(_standardize(sj * sk))
                    names.append(f"{ds.covariate_names[j]}*{ds.covariate_names[k]}")
                    groups.append("poly")
                    prov.append(None)
    return AugmentedDesign(
        X_aug=X_aug,
        B=np.column_stack(B_cols),
        names=tuple(names),
        groups=tuple(groups),
        provenance=tuple(prov),
        basis=basis,
    )


def auto_deltas(
    ds: SpatialDataset,
    structures: list[SpatialStructure],
    aug: AugmentedDesign,
    poly_delta: float = 0.5,
    reference_kind: str | None = None,
) -> np.ndarray:
    """Model-suggested balance tolerances per balance function.

    Covariate columns get 0 (exact balance). Each eigenvector column from
    structure m with eigenvalue lambda_k gets
    sqrt(l' S_m l / (n * lambda_k)) where l is the signed implied-weights
    vector of the GLS fit under structure m (or under ``reference_kind`` for
    every column when given). Polynomial columns get ``poly_delta`` (they
    are standardized).
    """
    by_kind = {st.kind: st for st in structures}
    if reference_kind is not None and reference_kind not in by_kind:
        raise ValidationError(f"no structure of kind {reference_kind!r} supplied")
    numerators: dict[str, float] = {}
    deltas = np.zeros(aug.n_functions)
    for j, (group, prov) in enumerate(zip(aug.groups, aug.provenance)):
        if group == "covariate":
            deltas[j] = 0.0
        elif group == "poly":
            deltas[j] = poly_delta
        else:
            kind = reference_kind or prov["kind"]
            if kind not in numerators:
                st = by_kind[kind]
                l = implied_weights(ds, st).l
                numerators[kind] = float(l @ (st.S @ l))
            lam = prov["eigval"]
            deltas[j] = math.sqrt(numerators[kind] / (ds.n * lam))
    return deltas


def resolve_deltas(
    ds: SpatialDataset,
    structures: list[SpatialStructure],
    aug: AugmentedDesign,
    delta,
) -> np.ndarray:
    """Normalize a delta spec: "auto", "auto:<kind>", a scalar, or an array."""
    if isinstance(delta, str):
        if delta == "auto":
            return auto_deltas(ds, structures, aug)
        if delta.startswith("auto:"):
            return auto_deltas(ds, structures, aug, reference_kind=delta[5:])
        raise ValidationError(f"unknown delta spec {delta!r}")
    arr = np.asarray(delta, dtype=float)
    if arr.ndim == 0:
        out = np.full(aug.n_functions, float(arr))
        out[np.array(aug.groups) == "covariate"] = 0.0
        return out
    if arr.shape != (aug.n_functions,):
        raise ValidationError(
            f"delta must be scalar or length {aug.n_functions}, got {arr.shape}"
        )
    return arr


@dataclass(frozen=True)
class SWFit:
    """Spatial weighting fit: simplex control weights and the ATT estimate."""

    w_control: np.ndarray
    w_full: np.ndarray  # treated entries 1/n_t, control entries w
    tau_att: float | None
    risk_ratio: float | None
    ess: float
    deltas: np.ndarray
    balance: pd.DataFrame
    qp_status: str
    qp_iterations: int
    bootstrap: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "w_control", _readonly(np.asarray(self.w_control, float)))
        object.__setattr__(self, "w_full", _readonly(np.asarray(self.w_full, float)))


def _sw_weights(
    B: np.ndarray, Z: np.ndarray, deltas: np.ndarray
) -> tuple[np.ndarray, QPSolution]:
    """Solve the control-group balance QP for one (possibly resampled) sample."""
    ctrl = Z == 0
    Bc = B[ctrl]
    targets = B[Z == 1].mean(axis=0)
    m = int(ctrl.sum())
    finite = np.isfinite(deltas)
    prob = QPProblem(
        Q=np.eye(m),
        Aeq=np.ones((1, m)),
        beq=np.array([1.0]),
        Aineq=Bc[:, finite].T if np.any(finite) else None,
        lo=(targets[finite] - deltas[finite]) if np.any(finite) else None,
        hi=(targets[finite] + deltas[finite]) if np.any(finite) else None,
        nonneg=True,
    )
    sol = solve_ineq(prob)
    return sol.x, sol


def smallest_feasible_inflation(
    B: np.ndarray, Z: np.ndarray, deltas: np.ndarray, tol: float = 1e-3
) -> float:
    """Bisect for the smallest uniform additive delta-inflation (in units of
    each function's standard deviation) that makes the program feasible."""
    sd = B.std(axis=0)
    sd[sd == 0] = 1.0

    def feasible(f: float) -> bool:
        try:
            _sw_weights(B, Z, deltas + f * sd)
            return True
        except InfeasibleError:
            return False

    hi = 1e-3
    while not feasible(hi):
        hi *= 4.0
        if hi > 1e3:
            raise InfeasibleError(
                "program infeasible even under extreme tolerance inflation"
            )
    lo = 0.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _balance_table(
    B: np.ndarray, Z: np.ndarray, w: np.ndarray, aug: AugmentedDesign, deltas
) -> pd.DataFrame:
    treated = B[Z == 1].mean(axis=0)
    before = B[Z == 0].mean(axis=0)
    after = w @ B[Z == 0]
    return pd.DataFrame(
        {
            "name": list(aug.names),
            "group": list(aug.groups),
            "treated": treated,
            "control_before": before,
            "control_after": after,
            "imbalance": after - treated,
            "delta": deltas,
        }
    )


def sw_fit(
    ds: SpatialDataset,
    aug: AugmentedDesign,
    delta,
    bootstrap_b: int = 0,
    seed: int | None = None,
    structures: list[SpatialStructure] | None = None,
    threads: int = 1,
) -> SWFit:
    """Fit the spatial weighting estimator.

    ``delta`` may be "auto" (requires ``structures``), a scalar, or an array
    with one tolerance per balance function. With ``bootstrap_b`` > 0, units
    are resampled with replacement ``bootstrap_b`` times (eigenvectors kept
    as fixed unit attributes) and percentile intervals are attached;
    replicates with an infeasible program or a missing arm are dropped and
    counted. Per-replicate seeds derive from (seed, replicate index), so
    results do not depend on the thread count.
    """
    if isinstance(delta, str):
        if structures is None:
            raise ValidationError('delta="auto" requires the source structures')
        deltas = resolve_deltas(ds, structures, aug, delta)
    else:
        deltas = resolve_deltas(ds, structures or [], aug, delta)
    try:
        w, sol = _sw_weights(aug.B, ds.Z, deltas)
    except InfeasibleError:
        f = smallest_feasible_inflation(aug.B, ds.Z, deltas)
        raise InfeasibleError(
            "balance constraints infeasible at the given tolerances; smallest "
            f"uniform inflation restoring feasibility: about {f:.4g} standard "
            "deviations per function"
        )
    n_t = ds.n_treated
    w_full = np.where(ds.Z == 1, 1.0 / n_t, 0.0)
    w_full[ds.Z == 0] = w
    ess = 1.0 / float(w_full @ w_full)

    tau = rr = None
    if ds.Y is not None:
        y1 = float(ds.Y[ds.Z == 1].mean())
        tau = y1 - float(w @ ds.Y[ds.Z == 0])
        denom = y1 - tau
        rr = y1 / denom if abs(denom) > _RR_GUARD * (1.0 + abs(y1)) else None

    boot = None
    if bootstrap_b > 0:
        if ds.Y is None:
            raise ValidationError("bootstrap requires the outcome")
        if seed is None:
            raise ValidationError("bootstrap requires a seed")
        boot = _bootstrap(ds, aug, deltas, bootstrap_b, seed, threads)

    return SWFit(
        w_control=w,
        w_full=w_full,
        tau_att=tau,
        risk_ratio=rr,
        ess=ess,
        deltas=deltas,
        balance=_balance_table(aug.B, ds.Z, w, aug, deltas),
        qp_status=sol.status,
        qp_iterations=sol.iterations,
        bootstrap=boot,
    )


def _bootstrap_one(args):
    B, Z, Y, deltas, seed_pair = args
    rng = np.random.default_rng(seed_pair)
    n = len(Z)
    idx = rng.integers(0, n, size=n)
    Zb, Yb, Bb = Z[idx], Y[idx], B[idx]
    if Zb.sum() == 0 or Zb.sum() == n:
        return None
    try:
        wb, _ = _sw_weights(Bb, Zb, deltas)
    except InfeasibleError:
        return None
    y1 = float(Yb[Zb == 1].mean())
    tau = y1 - float(wb @ Yb[Zb == 0])
    denom = y1 - tau
    rr = y1 / denom if abs(denom) > _RR_GUARD * (1.0 + abs(y1)) else np.nan
    return tau, rr


def _bootstrap(ds, aug, deltas, n_reps, seed, threads):
    tasks = [
        (aug.B, ds.Z, ds.Y, deltas, [int(seed), rep]) for rep in range(n_reps)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_bootstrap_one, tasks))
    else:
        results = [_bootstrap_one(t) for t in tasks]
    kept = [r for r in results if r is not None]
    dropped = n_reps - len(kept)
    if dropped > 0.05 * n_reps:
        warnings.warn(
            f"bootstrap dropped {dropped}/{n_reps} replicates "
            "(infeasible program or single-arm resample)"
        )
    taus = np.array([r[0] for r in kept])
    rrs = np.array([r[1] for r in kept])
    out = {
        "n_reps": n_reps,
        "n_dropped": int(dropped),
        "tau_se": float(taus.std(ddof=1)) if len(taus) > 1 else None,
        "tau_ci": [float(np.percentile(taus, 2.5)), float(np.percentile(taus, 97.5))]
        if len(taus) > 1
        else None,
        "tau_estimates": taus,
    }
    rr_ok = rrs[np.isfinite(rrs)]
    if len(rr_ok) > 1:
        out["risk_ratio_se"] = float(rr_ok.std(ddof=1))
        out["risk_ratio_ci"] = [
            float(np.percentile(rr_ok, 2.5)),
            float(np.percentile(rr_ok, 97.5)),
        ]
    return out


@dataclass(frozen=True)
class BiasVarianceBound:
    bias_bound: float
    variance: float
    note: str = ""


def sw_bias_variance_bound(
    st_conf: SpatialStructure,
    moran_i: float,
    eps1: float,
    eps2: float,
    eps3: float,
    n_top: int,
    w_control: np.ndarray | None = None,
    n_treated: int | None = None,
    sigma0_sq: float = 1.0,
    sigma1_sq: float = 1.0,
) -> BiasVarianceBound:
    """Finite-sample bias bound and exact conditional variance.

    The bound is eps3 + 2 * (eps2 + eps1 * sqrt(lam1 * (1 - I) / (lam1 -
    lam_{H+1}))) for a centered unit-norm confounder with alignment ``moran_i``
    whose structure contributes its top ``n_top`` eigenvectors to the
    augmentation. When lam1 equals lam_{H+1} the bound is undefined and
    reported as +inf. Variance requires the fitted control weights and n_t.
    """
    if min(eps1, eps2, eps3) < 0:
        raise ValidationError("epsilon terms must be nonnegative")
    if not (0 <= n_top < st_conf.n):
        raise ValidationError("n_top must be in [0, n)")
    lam1 = float(st_conf.eigvals[0])
    lam_next = float(st_conf.eigvals[n_top])
    gap = lam1 - lam_next
    if gap <= 0:
        bound = math.inf
        note = (
            "top eigenvalue equals the first excluded eigenvalue; the tail "
            "alignment of the confounder is unconstrained and the bound is +inf"
        )
    else:
        frac = max(lam1 * (1.0 - min(moran_i, 1.0)), 0.0) / gap
        bound = eps3 + 2.0 * (eps2 + eps1 * math.sqrt(frac))
        note = ""
    variance = math.nan
    if w_control is not None and n_treated is not None:
        variance = sigma1_sq / n_treated + sigma0_sq * float(
            np.asarray(w_control) @ np.asarray(w_control)
        )
    return BiasVarianceBound(bias_bound=bound, variance=variance, note=note)


def j_sweep(
    ds: SpatialDataset,
    structures: list[SpatialStructure],
    j_values,
    delta="auto",
    basis: str = "linear",
) -> pd.DataFrame:
    """Point estimates across augmentation sizes (J eigenvectors per structure).

    Plot-ready: the plateau is left to the analyst.
    """
    rows = []
    for j in j_values:
        aug = augment(ds, structures, [int(j)] * len(structures), basis=basis)
        fit = sw_fit(ds, aug, delta, structures=structures)
        rows.append(
            {
                "j_per_structure": int(j),
                "n_hidden": int(j) * len(structures),
                "tau": fit.tau_att,
                "risk_ratio": fit.risk_ratio,
                "ess": fit.ess,
            }
        )
    return pd.DataFrame(rows)
