"""Command-line interface.

Subcommands: ``weights`` (implied GLS weights and balance), ``diagnose``
(balance / localization / max-bias / Moran reports), ``estimate`` (the
spatial weighting ATT estimator with bootstrap), ``simulate`` (the scenario
battery), and ``selftest`` (the oracle-equivalence suite).

All runs are driven by a resolved configuration: a JSON config file plus
command-line overrides. Outputs are pure functions of (input files, config,
seed): every file carries a header with the config hash, seed, and library
version, reruns are byte-identical, and existing files are never overwritten
without --force. Exit codes: 0 success, 2 validation error, 3 numerical
degeneracy, 4 infeasible program.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import dataset_meta, load_dataset
from .diagnostics import (
    balance_report,
    effective_sample_size,
    localization_report,
    max_bias_curve,
    morans_i,
)
from .errors import DegenerateError, InfeasibleError, ValidationError
from .estimator import augment, j_sweep, sw_fit
from .gls import balance_dispersion_curve, implied_weights
from .simulate import (
    CONFOUNDER_CLASSES,
    OUTCOME_MODELS,
    SimulationConfig,
    run_battery,
)
from .structures import (
    build_gp_matern,
    build_icar,
    build_re,
    load_structure_csv,
)

_PAPER_GP_PHI = 30.0 / (2.0 * 0.2**0.5)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Outputs:
    """Output directory with overwrite protection and stamped headers."""

    def __init__(self, out_dir: str, force: bool, cfg: dict):
        self.dir = Path(out_dir)
        self.force = force
        self.meta = {
            "config_hash": _config_hash(cfg),
            "seed": cfg.get("seed"),
            "version": __version__,
        }
        self.written: list[str] = []

    def _path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        if path.exists() and not self.force:
            raise ValidationError(f"output file exists (use --force): {path}")
        self.written.append(str(path))
        return path

    def csv(self, name: str, frame) -> None:
        path = self._path(name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for k in sorted(self.meta):
                fh.write(f"# {k}: {self.meta[k]}\n")
            cols = list(frame.columns)
            fh.write(",".join(cols) + "\n")
            for row in frame.itertuples(index=False):
                fh.write(",".join(_fmt(v) for v in row) + "\n")

    def json(self, name: str, payload: dict) -> None:
        path = self._path(name)
        doc = {"_meta": self.meta, **payload}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _load_config(args) -> dict:
    cfg: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}")
    for key, val in vars(args).items():
        if key in ("func", "config") or val is None:
            continue
        cfg[key] = val
    return cfg


def _parse_structure_token(token: str, cfg: dict) -> dict:
    token = token.strip()
    if token.startswith("custom:"):
        return {
            "kind": "custom",
            "path": token[len("custom:"):],
            "sigma2": cfg.get("sigma2", 0.0),
            "rho2": cfg.get("rho2", 1.0),
        }
    kind = token.lower()
    if kind not in ("re", "icar", "gp"):
        raise ValidationError(f"unknown structure {token!r}")
    spec = {
        "kind": kind,
        "sigma2": cfg.get("sigma2", 1.0),
        "rho2": cfg.get("rho2", 10.0),
    }
    if kind == "icar":
        spec["k_neighbors"] = cfg.get("k_neighbors", 5)
    if kind == "gp":
        spec["kappa"] = cfg.get("kappa", 0.2)
        spec["phi"] = cfg.get("phi", _PAPER_GP_PHI)
    return spec


def _build_structure(ds, spec: dict):
    kind = spec["kind"].lower()
    if kind == "re":
        return build_re(ds, spec["sigma2"], spec["rho2"])
    if kind == "icar":
        return build_icar(ds, spec.get("k_neighbors", 5), spec["sigma2"], spec["rho2"])
    if kind == "gp":
        return build_gp_matern(
            ds,
            spec.get("kappa", 0.2),
            spec.get("phi", _PAPER_GP_PHI),
            spec["sigma2"],
            spec["rho2"],
        )
    if kind == "custom":
        return load_structure_csv(spec["path"], spec["sigma2"], spec["rho2"])
    raise ValidationError(f"unknown structure kind {spec['kind']!r}")


def _structures_from_cfg(ds, cfg: dict) -> list:
    if "structure_specs" in cfg:
        specs = cfg["structure_specs"]
    elif "structures" in cfg:
        specs = [_parse_structure_token(t, cfg) for t in str(cfg["structures"]).split(",")]
    elif "structure" in cfg:
        specs = [_parse_structure_token(str(cfg["structure"]), cfg)]
    else:
        raise ValidationError("no structure specified")
    return [_build_structure(ds, s) for s in specs]


def _dataset_from_cfg(cfg: dict):
    if "data" not in cfg:
        raise ValidationError("no dataset specified (--data)")
    return load_dataset(cfg["data"], schema=cfg.get("schema"))


def _delta_from_cfg(cfg: dict):
    raw = cfg.get("delta", "auto")
    if isinstance(raw, (int, float)):
        return float(raw)
    raw = str(raw)
    if raw == "auto" or raw.startswith("auto:"):
        return raw
    try:
        return float(raw)
    except ValueError:
        pass
    path = Path(raw)
    if not path.exists():
        raise ValidationError(f"delta file not found: {raw}")
    if path.suffix == ".json":
        with open(path, "r", encoding="utf-8") as fh:
            return np.asarray(json.load(fh), dtype=float)
    return np.loadtxt(path, delimiter=",", ndmin=1)


def _grid(cfg: dict, key: str, default: list) -> list:
    raw = cfg.get(key)
    if raw is None:
        return default
    if isinstance(raw, (list, tuple)):
        return [float(v) for v in raw]
    return [float(v) for v in str(raw).split(",")]


def cmd_weights(args) -> int:
    cfg = _load_config(args)
    ds = _dataset_from_cfg(cfg)
    sts = _structures_from_cfg(ds, cfg)
    if len(sts) != 1:
        raise ValidationError("weights takes exactly one structure")
    st = sts[0]
    iw = implied_weights(ds, st)
    out = Outputs(cfg.get("out", "out"), cfg.get("force", False), cfg)
    import pandas as pd

    out.csv(
        "weights.csv",
        pd.DataFrame({"id": list(ds.ids), "z": ds.Z, "w": iw.w, "l": iw.l}),
    )
    out.json(
        "balance.json",
        {
            "covariate_imbalance": {
                name: float(v)
                for name, v in zip(ds.covariate_names, iw.covariate_imbalance)
            },
            "eigvec_imbalance": iw.eigvec_imbalance,
            "sum_w_treated": iw.sum_treated,
            "sum_w_control": iw.sum_control,
            "objective_form": iw.objective_form,
        },
    )
    out.json(
        "summary.json",
        {
            "dispersion": iw.dispersion,
            "ess": effective_sample_size(iw.w),
            "structure": {"kind": st.kind, "sigma2": st.sigma2, "rho2": st.rho2,
                          "params": st.params},
            "dataset": dataset_meta(ds),
        },
    )
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    ds = _dataset_from_cfg(cfg)
    sts = _structures_from_cfg(ds, cfg)
    st = sts[0]
    report = cfg.get("report", "balance")
    threads = int(cfg.get("threads", 1))
    out = Outputs(cfg.get("out", "out"), cfg.get("force", False), cfg)
    iw = implied_weights(ds, st)
    if report == "balance":
        out.csv("balance.csv", balance_report(ds, iw.w))
    elif report == "localization":
        loc = localization_report(ds, iw.w, st)
        out.csv("localization.csv", loc.table)
        out.json("localization.json", {"moran_of_signed_weights": loc.moran_l})
    elif report == "maxbias":
        curve = max_bias_curve(
            ds,
            st,
            _grid(cfg, "moran_grid", [round(0.1 * k, 10) for k in range(1, 11)]),
            _grid(cfg, "gamma_grid", [1.0]),
            validate=not cfg.get("no_validate", False),
            threads=threads,
        )
        out.csv("maxbias.csv", curve)
    elif report == "moran":
        import pandas as pd

        rows = [
            {"name": name, "moran": morans_i(ds.X[:, j], st).value}
            for j, name in enumerate(ds.covariate_names)
            if j > 0 and ds.X[:, j].std() > 0
        ]
        rows.append({"name": "signed_weights", "moran": morans_i(iw.l, st).value})
        out.csv("moran.csv", pd.DataFrame(rows))
    elif report == "tradeoff":
        grid = _grid(cfg, "rho2_grid", list(np.logspace(-3, 3, 20)))
        out.csv("tradeoff.csv", balance_dispersion_curve(ds, st, grid, threads=threads))
    else:
        raise ValidationError(f"unknown report {report!r}")
    return 0


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    ds = _dataset_from_cfg(cfg)
    sts = _structures_from_cfg(ds, cfg)
    counts_raw = cfg.get("eigvecs", "9")
    if isinstance(counts_raw, (int, float)):
        counts = [int(counts_raw)] * len(sts)
    elif isinstance(counts_raw, (list, tuple)):
        counts = [int(v) for v in counts_raw]
    else:
        counts = [int(v) for v in str(counts_raw).split(",")]
    if len(counts) == 1:
        counts = counts * len(sts)
    if len(counts) != len(sts):
        raise ValidationError("--eigvecs needs one count per structure")
    basis = cfg.get("basis", "linear")
    aug = augment(ds, sts, counts, basis=basis)
    delta = _delta_from_cfg(cfg)
    bootstrap_b = int(cfg.get("bootstrap", 0))
    seed = cfg.get("seed")
    threads = int(cfg.get("threads", 1))
    fit = sw_fit(
        ds, aug, delta,
        bootstrap_b=bootstrap_b,
        seed=seed,
        structures=sts,
        threads=threads,
    )
    out = Outputs(cfg.get("out", "out"), cfg.get("force", False), cfg)
    import pandas as pd

    payload = {
        "tau_att": fit.tau_att,
        "risk_ratio": fit.risk_ratio,
        "ess": fit.ess,
        "qp_status": fit.qp_status,
        "basis": basis,
        "eigvecs_per_structure": counts,
        "structures": [
            {"kind": s.kind, "sigma2": s.sigma2, "rho2": s.rho2} for s in sts
        ],
    }
    if fit.bootstrap is not None:
        payload["bootstrap"] = {
            k: v for k, v in fit.bootstrap.items() if k != "tau_estimates"
        }
    out.json("estimate.json", payload)
    out.csv(
        "weights.csv",
        pd.DataFrame({"id": list(ds.ids), "z": ds.Z, "w": fit.w_full}),
    )
    out.csv("balance.csv", fit.balance)
    if cfg.get("j_sweep"):
        js = [int(v) for v in str(cfg["j_sweep"]).split(",")]
        out.csv("jsweep.csv", j_sweep(ds, sts, js, delta=delta, basis=basis))
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    scenario = cfg.get("scenario", "all")
    model = cfg.get("model", "all")
    classes = CONFOUNDER_CLASSES if scenario == "all" else (scenario,)
    models = OUTCOME_MODELS if model == "all" else (model,)
    for cls in classes:
        if cls not in CONFOUNDER_CLASSES:
            raise ValidationError(f"unknown scenario {cls!r}")
    for m in models:
        if m not in OUTCOME_MODELS:
            raise ValidationError(f"unknown outcome model {m!r}")
    sim_cfg = SimulationConfig(
        seed=int(cfg.get("seed", 0)),
        m_reps=int(cfg.get("reps", 100)),
        confounder_classes=classes,
        outcome_models=models,
        full_scale=bool(cfg.get("full_scale", False)),
        threads=int(cfg.get("threads", 1)),
    )
    report = run_battery(sim_cfg)
    out = Outputs(cfg.get("out", "out"), cfg.get("force", False), cfg)
    out.csv("report.csv", report.table)
    out.json(
        "replicates.json",
        {
            "config": report.config,
            "notes": report.notes,
            "estimates": {
                f"{cls}|{mdl}|{est}": vals
                for (cls, mdl, est), vals in sorted(report.estimates.items())
            },
            "att_true": {
                f"{cls}|{mdl}": vals
                for (cls, mdl), vals in sorted(report.att_true.items())
            },
        },
    )
    return 0


def cmd_selftest(args) -> int:
    """Quick oracle-equivalence suite on random instances."""
    from .qp import solve_eq
    from .gls import gls_fit, minimal_dispersion_problem, ridge_fit
    from .simulate import make_synthetic_dataset
    from .structures import build_gp_matern, build_icar, build_re

    rng = np.random.default_rng(20240901)
    ds = make_synthetic_dataset(60, 4, 7)
    ds = ds.with_outcome(rng.standard_normal(60) + ds.Z)
    checks = []
    for name, st in (
        ("re", build_re(ds, 1.0, 10.0)),
        ("icar", build_icar(ds, 3, 1.0, 10.0)),
        ("gp", build_gp_matern(ds, 0.5, 40_000.0, 1.0, 10.0)),
    ):
        fit = gls_fit(ds, st)
        iw = fit.weights
        tau_w = float(iw.w[ds.Z == 1] @ ds.Y[ds.Z == 1] - iw.w[ds.Z == 0] @ ds.Y[ds.Z == 0])
        checks.append((f"weighting identity [{name}]",
                       abs(fit.tau_hat - tau_w) <= 1e-8 * (1 + abs(fit.tau_hat))))
        sol = solve_eq(minimal_dispersion_problem(ds, st))
        checks.append((f"qp equivalence [{name}]",
                       float(np.abs(sol.x - iw.w).max()) <= 1e-6))
        rfit = ridge_fit(ds, st)
        checks.append((f"ridge equivalence [{name}]",
                       abs(rfit.tau_hat - fit.tau_hat) <= 1e-8))
    ok = True
    for label, passed in checks:
        print(("PASS" if passed else "FAIL") + f"  {label}")
        ok = ok and passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatbal",
        description="Spatial regression weighting: implied weights, "
        "diagnostics, the spatial weighting ATT estimator, and simulations.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override keys")
        sp.add_argument("--out", help="output directory (default: out)")
        sp.add_argument("--force", action="store_true", default=None,
                        help="overwrite existing output files")
        sp.add_argument("--threads", type=int, help="worker threads (default 1)")
        sp.add_argument("--seed", type=int, help="master seed")

    def data_opts(sp):
        sp.add_argument("--data", help="dataset CSV")
        sp.add_argument("--structure", help="re | icar | gp | custom:<S.csv>")
        sp.add_argument("--structures", help="comma list of structure tokens")
        sp.add_argument("--sigma2", type=float)
        sp.add_argument("--rho2", type=float)
        sp.add_argument("--k-neighbors", dest="k_neighbors", type=int)
        sp.add_argument("--kappa", type=float)
        sp.add_argument("--phi", type=float)

    sp = sub.add_parser("weights", help="implied GLS weights and balance")
    common(sp)
    data_opts(sp)
    sp.set_defaults(func=cmd_weights)

    sp = sub.add_parser("diagnose", help="diagnostic reports")
    common(sp)
    data_opts(sp)
    sp.add_argument(
        "--report",
        choices=["balance", "localization", "maxbias", "moran", "tradeoff"],
    )
    sp.add_argument("--moran-grid", dest="moran_grid")
    sp.add_argument("--gamma-grid", dest="gamma_grid")
    sp.add_argument("--rho2-grid", dest="rho2_grid")
    sp.add_argument("--no-validate", dest="no_validate", action="store_true",
                    default=None, help="skip the max-bias oracle cross-check")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("estimate", help="spatial weighting ATT estimator")
    common(sp)
    data_opts(sp)
    sp.add_argument("--eigvecs", help="eigenvector counts per structure, e.g. 9,9")
    sp.add_argument("--delta", help="auto | auto:<kind> | scalar | file")
    sp.add_argument("--basis", choices=["linear", "quad", "interact"])
    sp.add_argument("--bootstrap", type=int, help="bootstrap replications")
    sp.add_argument("--j-sweep", dest="j_sweep",
                    help="comma list of J values for a sweep report")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="scenario battery")
    common(sp)
    sp.add_argument("--scenario", help="cluster | adjacency | distance | all")
    sp.add_argument("--model", help="outcome model or all")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--full-scale", dest="full_scale", action="store_true",
                    default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("selftest", help="oracle-equivalence suite")
    common(sp)
    sp.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DegenerateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
