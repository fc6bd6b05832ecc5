"""Spatial covariance structures and their eigendecompositions.

Three families of the unit-level correlation matrix S are provided:

* random effects: S_ij = 1 if units i and j share a cluster (block all-ones);
* intrinsic autoregressive: S is the Moore-Penrose pseudoinverse of the graph
  Laplacian of the symmetrized k-nearest-neighbor adjacency;
* Gaussian process: S is a Matern kernel of the pairwise distances.

Each structure stores S together with its eigendecomposition (descending,
eigenvalues clamped at zero) and the variance scales (sigma2, rho2) defining
the error covariance ``sigma2 * I + rho2 * S``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .data import SpatialDataset, distances_for
from .errors import ValidationError

RE = "RE"
ICAR = "ICAR"
GP = "GP"
CUSTOM = "Custom"

_NEG_EIG_REL_TOL = 1e-10


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpatialStructure:
    """A PSD matrix S with eigendecomposition and variance scales.

    eigvecs has orthonormal columns; eigvals is descending with all entries
    >= 0 (tiny negative eigenvalues from floating point are clamped). The
    error covariance is ``sigma2 * I + rho2 * S``, positive definite whenever
    sigma2 > 0.
    """

    kind: str
    S: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    sigma2: float
    rho2: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sigma2 < 0 or self.rho2 < 0:
            raise ValidationError("sigma2 and rho2 must be nonnegative")
        if self.sigma2 == 0 and self.rho2 == 0:
            raise ValidationError("sigma2 and rho2 cannot both be zero")
        object.__setattr__(self, "S", _readonly(np.asarray(self.S, dtype=float)))
        object.__setattr__(self, "eigvecs", _readonly(np.asarray(self.eigvecs, dtype=float)))
        object.__setattr__(self, "eigvals", _readonly(np.asarray(self.eigvals, dtype=float)))

    @property
    def n(self) -> int:
        return self.S.shape[0]

    def covariance(self, rho2: float | None = None) -> np.ndarray:
        """sigma2 * I + rho2 * S (rho2 overridable for curve evaluations)."""
        r2 = self.rho2 if rho2 is None else rho2
        cov = r2 * self.S
        cov[np.diag_indices_from(cov)] += self.sigma2
        return cov

    def with_scales(self, sigma2: float | None = None, rho2: float | None = None):
        return SpatialStructure(
            kind=self.kind,
            S=self.S,
            eigvecs=self.eigvecs,
            eigvals=self.eigvals,
            sigma2=self.sigma2 if sigma2 is None else sigma2,
            rho2=self.rho2 if rho2 is None else rho2,
            params=dict(self.params),
        )


def eig_psd(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric PSD matrix.

    Returns (V, lam) with descending eigenvalues. Eigenvalues in
    [-1e-10 * lam_max, 0) are clamped to 0; anything more negative raises
    because the matrix is not PSD. Requires ``S`` symmetric within
    1e-8 * (1 + max|S|).
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValidationError("S must be a square matrix")
    scale = 1.0 + np.abs(S).max(initial=0.0)
    if np.abs(S - S.T).max(initial=0.0) > 1e-8 * scale:
        raise ValidationError("matrix is not symmetric")
    lam_asc, V_asc = np.linalg.eigh(0.5 * (S + S.T))
    lam = lam_asc[::-1].copy()
    V = V_asc[:, ::-1].copy()
    lam_max = max(lam[0], 0.0)
    if lam[-1] < -_NEG_EIG_REL_TOL * lam_max - 1e-300:
        raise ValidationError(
            f"matrix not PSD: eigenvalue {lam[-1]:.3e} below tolerance"
        )
    np.clip(lam, 0.0, None, out=lam)
    return V, lam


def _finish(kind, S, sigma2, rho2, params, eig=None) -> SpatialStructure:
    S = 0.5 * (S + S.T)
    if eig is None:
        V, lam = eig_psd(S)
    else:
        V, lam = eig
    resid = np.abs(S - (V * lam) @ V.T).max()
    if resid > 1e-8 * (1.0 + lam[0]):
        raise ValidationError(f"eigendecomposition reconstruction residual {resid:.3e}")
    return SpatialStructure(
        kind=kind, S=S, eigvecs=V, eigvals=lam, sigma2=sigma2, rho2=rho2, params=params
    )


def build_re(ds: SpatialDataset, sigma2: float, rho2: float) -> SpatialStructure:
    """Block all-ones structure from cluster membership.

    Nonzero eigenvalues are the cluster sizes, with eigenvectors proportional
    to the cluster indicators.
    """
    if sigma2 <= 0:
        raise ValidationError("sigma2 must be positive")
    same = ds.cluster[:, None] == ds.cluster[None, :]
    S = same.astype(float)
    params = {"n_clusters": len(ds.cluster_labels)}
    return _finish(RE, S, sigma2, rho2, params)


def knn_adjacency(ds: SpatialDataset, k_neighbors: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbor 0/1 adjacency.

    A_ij = 1 if j is among the k nearest neighbors of i or vice versa.
    Distance ties are broken by smallest index (stable sort) so the graph is
    deterministic; a warning is emitted when ties at the k-th neighbor make
    the choice order-dependent.
    """
    n = ds.n
    if k_neighbors < 1:
        raise ValidationError("k_neighbors must be >= 1")
    if n <= k_neighbors:
        raise ValidationError("need more units than neighbors")
    d = distances_for(ds).d
    A = np.zeros((n, n))
    n_ties = 0
    for i in range(n):
        row = d[i].copy()
        row[i] = np.inf
        order = np.argsort(row, kind="stable")
        chosen = order[:k_neighbors]
        if row[order[k_neighbors - 1]] == row[order[k_neighbors]]:
            n_ties += 1
        A[i, chosen] = 1.0
    if n_ties:
        warnings.warn(
            f"kNN distance ties at the neighborhood boundary for {n_ties} units; "
            "resolved by smallest index"
        )
    return np.maximum(A, A.T)


def build_icar(
    ds: SpatialDataset, k_neighbors: int, sigma2: float, rho2: float
) -> SpatialStructure:
    """Intrinsic autoregressive structure: S = pinv(D - A) for the kNN graph.

    The graph Laplacian has one zero eigenvalue per connected component;
    those directions map to zero eigenvalues of S (Moore-Penrose convention).
    """
    if sigma2 <= 0:
        raise ValidationError("sigma2 must be positive")
    A = knn_adjacency(ds, k_neighbors)
    L = np.diag(A.sum(axis=1)) - A
    n_comp, _ = connected_components(csr_matrix(A), directed=False)
    mu_asc, Q_asc = np.linalg.eigh(L)
    # Exactly n_comp null directions; zero them out rather than trusting
    # floating-point magnitudes.
    if mu_asc[n_comp - 1] > 1e-8 * max(mu_asc[-1], 1.0):
        raise ValidationError("Laplacian null space does not match graph components")
    pos = mu_asc[n_comp:]  # ascending, so 1/pos is descending
    lam = np.concatenate([1.0 / pos, np.zeros(n_comp)])
    V = np.concatenate([Q_asc[:, n_comp:], Q_asc[:, :n_comp]], axis=1)
    S = (V * lam) @ V.T
    params = {
        "k_neighbors": k_neighbors,
        "n_components": int(n_comp),
        "generalized_inverse": "moore-penrose",
    }
    return _finish(ICAR, S, sigma2, rho2, params, eig=(V, lam))


def matern_kernel(d: np.ndarray, kappa: float, phi: float) -> np.ndarray:
    """Matern correlation 2^(1-kappa)/Gamma(kappa) * (d/phi)^kappa * K_kappa(d/phi).

    The value at d = 0 is the limit 1. kappa outside (0.01, 10] is rejected
    (Bessel evaluation is unreliable there).
    """
    if not (0.01 < kappa <= 10.0):
        raise ValidationError("kappa must lie in (0.01, 10]")
    if phi <= 0:
        raise ValidationError("phi must be positive")
    t = np.asarray(d, dtype=float) / phi
    coef = 2.0 ** (1.0 - kappa) / gamma_fn(kappa)
    small = t < 1e-10
    ts = np.where(small, 1.0, t)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        K = coef * ts**kappa * kv(kappa, ts)
    K = np.where(small, 1.0, K)
    K = np.where(np.isfinite(K), K, 0.0)  # kv underflow at large distances
    return np.clip(K, 0.0, 1.0)


def build_gp_matern(
    ds: SpatialDataset, kappa: float, phi: float, sigma2: float, rho2: float
) -> SpatialStructure:
    """Gaussian-process structure: S is the Matern kernel of pairwise distances."""
    if sigma2 <= 0:
        raise ValidationError("sigma2 must be positive")
    d = distances_for(ds).d
    K = matern_kernel(d, kappa, phi)
    np.fill_diagonal(K, 1.0)
    params = {"kappa": kappa, "phi": phi}
    return _finish(GP, K, sigma2, rho2, params)


def build_custom(S: np.ndarray, sigma2: float, rho2: float, params: dict | None = None):
    """Wrap a user-supplied PSD matrix.

    With sigma2 = 0 the error covariance is rho2 * S itself (the matrix must
    then be positive definite); this is the path for covariances that do not
    decompose into iid plus spatial parts.
    """
    return _finish(CUSTOM, np.asarray(S, dtype=float), sigma2, rho2, dict(params or {}))


def load_structure_csv(path, sigma2: float, rho2: float) -> SpatialStructure:
    """Custom S from a dense n-by-n CSV (no header)."""
    try:
        S = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    except OSError:
        raise ValidationError(f"structure file not found: {path}")
    return build_custom(S, sigma2, rho2, params={"source": str(path)})


def identity_structure(n: int, sigma2: float = 1.0) -> SpatialStructure:
    """Sigma = sigma2 * I; GLS with this structure is ordinary least squares."""
    eye = np.eye(n)
    return SpatialStructure(
        kind=CUSTOM,
        S=eye,
        eigvecs=eye.copy(),
        eigvals=np.ones(n),
        sigma2=sigma2,
        rho2=0.0,
        params={"identity": True},
    )


def structure_meta(st: SpatialStructure) -> dict:
    return {
        "kind": st.kind,
        "n": st.n,
        "sigma2": st.sigma2,
        "rho2": st.rho2,
        "eig_max": float(st.eigvals[0]),
        "eig_min": float(st.eigvals[-1]),
        "n_zero_eigvals": int(np.sum(st.eigvals == 0.0)),
        "params": st.params,
    }


def export_structure(st: SpatialStructure, prefix, eigvecs: bool = False) -> list:
    """Write <prefix>.json (metadata), <prefix>_eigvals.csv, and optionally
    <prefix>_eigvecs.csv. Returns the list of paths written."""
    prefix = str(prefix)
    paths = []
    meta_path = prefix + ".json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(structure_meta(st), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(meta_path)
    ev_path = prefix + "_eigvals.csv"
    pd.DataFrame({"k": np.arange(1, st.n + 1), "eigval": st.eigvals}).to_csv(
        ev_path, index=False
    )
    paths.append(ev_path)
    if eigvecs:
        vec_path = prefix + "_eigvecs.csv"
        np.savetxt(vec_path, st.eigvecs, delimiter=",")
        paths.append(vec_path)
    return paths
