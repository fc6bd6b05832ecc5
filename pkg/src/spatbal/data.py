"""Spatial dataset ingestion, validation, and pairwise distances.

CSV contract: UTF-8 with a header row. Required columns: ``id`` (string),
``lat``/``lon`` (decimal degrees) or ``px``/``py`` (planar meters), ``cluster``
(string), ``z`` (0/1 integer). Optional: ``y`` (float outcome) and any number
of ``x_<name>`` covariate columns (float). Column order in the file does not
matter; covariates are ordered by name. An intercept column of ones is always
prepended to the covariate matrix, so input files must not carry their own
column of ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ValidationError

EARTH_RADIUS_M = 6_371_000.0

GEOGRAPHIC = "latlon"
PLANAR = "planar"

_SPECIAL_COLUMNS = ("id", "lat", "lon", "px", "py", "cluster", "z", "y")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpatialDataset:
    """Immutable unit-level dataset shared by all estimators.

    Fields
    ------
    coords : (n, 2) array, (lat, lon) degrees or (x, y) meters per ``frame``.
    frame : "latlon" or "planar".
    cluster : (n,) integer codes, dense, in first-appearance order of labels.
    cluster_labels : label for each code.
    X : (n, p) covariate matrix whose first column is the intercept.
    Z : (n,) binary treatment.
    Y : (n,) outcome, or None at the design stage.
    """

    coords: np.ndarray
    frame: str
    cluster: np.ndarray
    cluster_labels: tuple[str, ...]
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray | None = None
    ids: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z)
        cluster = np.asarray(self.cluster, dtype=int)
        n = X.shape[0]
        if self.frame not in (GEOGRAPHIC, PLANAR):
            raise ValidationError(f"unknown coordinate frame {self.frame!r}")
        if coords.shape != (n, 2):
            raise ValidationError("coords must be an (n, 2) array")
        if not np.all(np.isfinite(coords)):
            raise ValidationError("non-finite value in coords")
        if not np.all(np.isfinite(X)):
            raise ValidationError("non-finite value in covariate matrix")
        if not np.all(X[:, 0] == 1.0):
            raise ValidationError("first column of X must be the intercept (all ones)")
        zvals = np.unique(Z)
        if not np.all(np.isin(zvals, (0, 1))):
            raise ValidationError("treatment must be binary 0/1")
        if len(zvals) < 2:
            raise ValidationError("treatment must contain both 0 and 1")
        if cluster.shape != (n,):
            raise ValidationError("cluster must be an (n,) vector")
        p = X.shape[1]
        if n < p + 2:
            raise ValidationError(f"need n >= p + 2 rows (n={n}, p={p})")
        Y = self.Y
        if Y is not None:
            Y = np.asarray(Y, dtype=float)
            if Y.shape != (n,):
                raise ValidationError("Y must be an (n,) vector")
            if not np.all(np.isfinite(Y)):
                raise ValidationError("non-finite value in Y")
            object.__setattr__(self, "Y", _readonly(Y))
        ids = self.ids or tuple(str(i) for i in range(n))
        names = self.covariate_names or ("intercept",) + tuple(
            f"x{j}" for j in range(1, p)
        )
        if len(names) != p:
            raise ValidationError("covariate_names length must match X columns")
        object.__setattr__(self, "coords", _readonly(coords))
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "Z", _readonly(Z.astype(int)))
        object.__setattr__(self, "cluster", _readonly(cluster))
        object.__setattr__(self, "ids", tuple(ids))
        object.__setattr__(self, "covariate_names", tuple(names))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.Z.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    def with_outcome(self, Y: np.ndarray) -> "SpatialDataset":
        return SpatialDataset(
            coords=self.coords,
            frame=self.frame,
            cluster=self.cluster,
            cluster_labels=self.cluster_labels,
            X=self.X,
            Z=self.Z,
            Y=Y,
            ids=self.ids,
            covariate_names=self.covariate_names,
        )

    def take(self, idx: np.ndarray) -> "SpatialDataset":
        """Row subset / resample (used by the bootstrap)."""
        idx = np.asarray(idx, dtype=int)
        return SpatialDataset(
            coords=self.coords[idx],
            frame=self.frame,
            cluster=self.cluster[idx],
            cluster_labels=self.cluster_labels,
            X=self.X[idx],
            Z=self.Z[idx],
            Y=None if self.Y is None else self.Y[idx],
            ids=tuple(self.ids[i] for i in idx),
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative pairwise distance matrix, meters, zero diagonal."""

    d: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        object.__setattr__(self, "d", _readonly(np.asarray(self.d, dtype=float)))


def load_dataset(path, schema: dict | None = None) -> SpatialDataset:
    """Load and validate a dataset from CSV.

    ``schema`` optionally remaps logical column names ("id", "lat", "lon",
    "px", "py", "cluster", "z", "y") to the names actually present in the
    file. Errors report the offending 0-based data row.
    """
    names = {c: c for c in _SPECIAL_COLUMNS}
    if schema:
        unknown = set(schema) - set(_SPECIAL_COLUMNS)
        if unknown:
            raise ValidationError(f"unknown schema keys: {sorted(unknown)}")
        names.update(schema)
    try:
        df = pd.read_csv(path, comment="#")
    except FileNotFoundError:
        raise ValidationError(f"dataset file not found: {path}")

    def require(logical: str) -> str:
        col = names[logical]
        if col not in df.columns:
            raise ValidationError(f"missing column {col!r}")
        return col

    if names["lat"] in df.columns and names["lon"] in df.columns:
        frame = GEOGRAPHIC
        c1, c2 = require("lat"), require("lon")
    elif names["px"] in df.columns and names["py"] in df.columns:
        frame = PLANAR
        c1, c2 = require("px"), require("py")
    else:
        raise ValidationError(
            f"missing coordinate columns: need {names['lat']!r}/{names['lon']!r} "
            f"or {names['px']!r}/{names['py']!r}"
        )
    id_col = require("id")
    cluster_col = require("cluster")
    z_col = require("z")

    ids = df[id_col].astype(str).tolist()
    seen: dict[str, int] = {}
    for k, ident in enumerate(ids):
        if ident in seen:
            raise ValidationError(f"duplicate id {ident!r} at row {k}")
        seen[ident] = k

    z_raw = pd.to_numeric(df[z_col], errors="coerce").to_numpy()
    for k, v in enumerate(z_raw):
        if not np.isfinite(v) or v not in (0.0, 1.0):
            raise ValidationError(f"non-binary treatment at row {k}")
    Z = z_raw.astype(int)

    def numeric(col: str) -> np.ndarray:
        vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise ValidationError(
                f"non-finite value in column {col!r} at row {bad[0]}"
            )
        return vals

    coords = np.column_stack([numeric(c1), numeric(c2)])

    special = {names[c] for c in _SPECIAL_COLUMNS}
    x_cols = sorted(c for c in df.columns if c.startswith("x_") and c not in special)
    cov_list = []
    cov_names = ["intercept"]
    for col in x_cols:
        vals = numeric(col)
        if np.all(vals == 1.0):
            raise ValidationError(
                f"covariate column {col!r} is constant 1; the intercept is added "
                "automatically and must not appear in the file"
            )
        cov_list.append(vals)
        cov_names.append(col[len("x_"):])
    n = len(df)
    X = np.column_stack([np.ones(n)] + cov_list) if cov_list else np.ones((n, 1))

    labels = df[cluster_col].astype(str).tolist()
    codebook: dict[str, int] = {}
    codes = np.empty(n, dtype=int)
    for k, lab in enumerate(labels):
        codes[k] = codebook.setdefault(lab, len(codebook))

    Y = None
    if names["y"] in df.columns:
        Y = numeric(names["y"])

    return SpatialDataset(
        coords=coords,
        frame=frame,
        cluster=codes,
        cluster_labels=tuple(codebook),
        X=X,
        Z=Z,
        Y=Y,
        ids=tuple(ids),
        covariate_names=tuple(cov_names),
    )


def save_dataset(ds: SpatialDataset, path) -> None:
    """Write a dataset back to CSV; load(save(ds)) round-trips exactly."""
    cols: dict[str, object] = {"id": list(ds.ids)}
    if ds.frame == GEOGRAPHIC:
        cols["lat"], cols["lon"] = ds.coords[:, 0], ds.coords[:, 1]
    else:
        cols["px"], cols["py"] = ds.coords[:, 0], ds.coords[:, 1]
    cols["cluster"] = [ds.cluster_labels[c] for c in ds.cluster]
    cols["z"] = ds.Z
    if ds.Y is not None:
        cols["y"] = ds.Y
    for j, name in enumerate(ds.covariate_names):
        if j == 0:
            continue
        cols[f"x_{name}"] = ds.X[:, j]
    pd.DataFrame(cols).to_csv(path, index=False)


def dataset_meta(ds: SpatialDataset) -> dict:
    """Metadata echo (JSON-serializable) for reproducibility."""
    return {
        "n": ds.n,
        "p": ds.p,
        "n_treated": ds.n_treated,
        "n_control": ds.n_control,
        "frame": ds.frame,
        "covariates": list(ds.covariate_names),
        "cluster_codes": {lab: i for i, lab in enumerate(ds.cluster_labels)},
        "has_outcome": ds.Y is not None,
    }


def pairwise_distances(ds: SpatialDataset, metric: str) -> DistanceMatrix:
    """All-pairs distances in meters.

    ``haversine`` (great-circle on a sphere of mean radius 6,371,000 m)
    requires lat/lon coordinates; ``euclidean`` requires planar meters.
    The result is symmetrized exactly via d = (d + d.T) / 2.
    """
    if metric == "haversine":
        if ds.frame != GEOGRAPHIC:
            raise ValidationError("haversine distance requires lat/lon coordinates")
        lat = np.radians(ds.coords[:, 0])
        lon = np.radians(ds.coords[:, 1])
        dlat = lat[:, None] - lat[None, :]
        dlon = lon[:, None] - lon[None, :]
        a = (
            np.sin(dlat / 2.0) ** 2
            + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
        )
        d = 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    elif metric == "euclidean":
        if ds.frame != PLANAR:
            raise ValidationError("euclidean distance requires planar coordinates")
        diff = ds.coords[:, None, :] - ds.coords[None, :, :]
        d = np.sqrt((diff**2).sum(axis=2))
    else:
        raise ValidationError(f"unknown distance metric {metric!r}")
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d=d, metric=metric)


def distances_for(ds: SpatialDataset) -> DistanceMatrix:
    """Distances under the metric implied by the coordinate frame."""
    return pairwise_distances(
        ds, "haversine" if ds.frame == GEOGRAPHIC else "euclidean"
    )
