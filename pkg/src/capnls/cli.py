"""Command-line entry point: ``capnls simulate | fit | select | validate``.

Exit codes are 0 on success, 1 when a run fails (solver or estimation
failure, failed validation) and 2 for usage or configuration errors. Every
command that writes artifacts writes ``manifest.json`` last, listing them.
``FRONTIER_SEED`` in the environment overrides the configured seed; an
explicit ``--seed`` overrides both.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import platform
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import selection, simlab, survey
from .core import Dataset, PiecewiseLinearModel, validate_model
from .estimators import CapNlsParams, EstimationError, in_sample, make_estimator, n_hyperplanes
from .qp import QPSolverError

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger("capnls")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
BUILTIN_PREFIX = "builtin:"
PROFILES: dict[str, dict[str, int]] = {
    "full": {"V": 100, "W": 30, "B": 500, "nT_f": 1000},
    "desk": {"V": 20, "W": 30, "B": 200, "nT_f": 1000},
}


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# ---------------------------------------------------------------- helpers


def resolve_path(name: str) -> Path:
    """Plain path, or ``builtin:<file>`` for a file bundled with the package."""
    if name.startswith(BUILTIN_PREFIX):
        res = resources.files("capnls") / "data" / name[len(BUILTIN_PREFIX):]
        if not res.is_file():
            raise UsageError(f"no bundled file {name!r}")
        return Path(str(res))
    path = Path(name)
    if not path.is_file():
        raise UsageError(f"file not found: {name}")
    return path


def resolve_seed(configured: int, flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("FRONTIER_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"FRONTIER_SEED must be an integer, got {env!r}") from exc
    return configured


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default, allow_nan=False) + "\n"


def _finite(doc: Any) -> Any:
    """Replace NaN/inf floats by ``None`` so JSON stays standard."""
    if isinstance(doc, float):
        return doc if np.isfinite(doc) else None
    if isinstance(doc, dict):
        return {k: _finite(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_finite(v) for v in doc]
    return doc


class Outputs:
    """Collects written artifacts and writes the manifest last."""

    def __init__(self, out_dir: Path) -> None:
        self.dir = out_dir
        self.paths: list[str] = []

    def write(self, name: str, text: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        path.write_text(text, encoding="utf-8")
        self.paths.append(name)
        return path

    def manifest(self, command: str, config: dict[str, Any], seed: int, wall: float) -> Path:
        import scipy

        from . import __version__

        doc = {
            "command": command,
            "config": _finite(config),
            "seed": seed,
            "versions": {
                "capnls": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "wall_time_seconds": round(wall, 3),
            "outputs": sorted(self.paths),
        }
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / "manifest.json"
        path.write_text(dumps(doc), encoding="utf-8")
        return path


def parse_params(items: Sequence[str]) -> dict[str, Any]:
    """``key=value`` pairs (values parsed as JSON when possible) or one JSON object."""
    if len(items) == 1 and items[0].lstrip().startswith("{"):
        try:
            doc = json.loads(items[0])
        except json.JSONDecodeError as exc:
            raise UsageError(f"--params is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("--params JSON must be an object")
        return doc
    out: dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--params entries must look like key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_estimator(name: str, params: dict[str, Any] | None = None, seed: int | None = None) -> Any:
    """Estimator by short name with parameters routed to the right place.

    Keys naming a ``CapNlsParams`` field go to the partitioning parameters;
    other keys must be fields of the estimator itself.
    """
    try:
        est = make_estimator(name)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    params = dict(params or {})
    if seed is not None:
        if hasattr(est, "params"):
            params.setdefault("rng_seed", seed)
        elif "seed" in {f.name for f in dataclasses.fields(est)}:
            params.setdefault("seed", seed)
    cap_fields = {f.name for f in dataclasses.fields(CapNlsParams)}
    own_fields = {f.name for f in dataclasses.fields(est)} - {"name", "params", "solver"}
    cap_kw = {k: v for k, v in params.items() if hasattr(est, "params") and k in cap_fields}
    own_kw = {k: v for k, v in params.items() if k not in cap_kw}
    unknown = sorted(set(own_kw) - own_fields)
    if unknown:
        raise UsageError(f"unknown parameter(s) for {name}: {', '.join(unknown)}")
    try:
        if cap_kw:
            est = dataclasses.replace(est, params=dataclasses.replace(est.params, **cap_kw))
        if own_kw:
            est = dataclasses.replace(est, **own_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad parameters for {name}: {exc}") from exc
    return est


# ---------------------------------------------------------------- data files


def read_xy_csv(text: str) -> Dataset:
    """Plain numeric CSV with a header; the output is column ``y`` (else the last)."""
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2:
        raise UsageError("data file needs a header and at least one row")
    header = [h.strip() for h in rows[0]]
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise UsageError(f"non-numeric value in data file: {exc}") from exc
    if values.ndim != 2 or values.shape[1] != len(header) or values.shape[1] < 2:
        raise UsageError("data rows must match the header and have at least two columns")
    j = header.index("y") if "y" in header else len(header) - 1
    x = np.delete(values, j, axis=1)
    try:
        return Dataset(x, values[:, j])
    except ValueError as exc:
        raise UsageError(f"invalid dataset: {exc}") from exc


def load_dataset(path: Path, industry: str | None) -> tuple[Dataset, dict[str, Any]]:
    text = path.read_text(encoding="utf-8")
    header = text.splitlines()[0] if text else ""
    if all(col in header.split(",") for col in survey.SURVEY_COLUMNS):
        report = survey.parse_survey(text)
        codes = survey.industries(report.records)
        if not codes:
            raise UsageError("survey file has no usable records")
        code = industry or codes[0]
        if code not in codes:
            raise UsageError(f"industry {code!r} not in survey (have {', '.join(codes)})")
        ind = survey.build_industry_dataset(report.records, code)
        return ind.data, {
            "schema": "survey",
            "industry_code": code,
            "dropped_count": ind.dropped_count,
            "rejected_rows": len(report.rejected),
        }
    return read_xy_csv(text), {"schema": "xy"}


def model_document(model: Any) -> dict[str, Any]:
    if isinstance(model, PiecewiseLinearModel):
        return {"type": "piecewise_linear", **model.to_dict()}
    if hasattr(model, "to_dict"):
        return {"type": "cobb_douglas", **model.to_dict()}
    return {
        "type": "linear",
        "intercept": float(model.intercept),
        "coef": np.asarray(model.coef, dtype=float).tolist(),
    }


# ---------------------------------------------------------------- commands


def load_sim_config(path: Path) -> dict[str, Any]:
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh) if path.suffix == ".toml" else json.load(fh)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict) or "dgp" not in doc:
        raise UsageError("config needs a [dgp] table")
    return doc


def experiment_from_config(doc: dict[str, Any], profile: str, overrides: dict[str, Any]) -> simlab.ExperimentConfig:
    prof = PROFILES[profile]
    exp = dict(doc.get("experiment", {}))
    for key in ("V", "W", "nT_f"):
        exp.setdefault(key, prof[key])
    exp.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(simlab.ExperimentConfig)} - {"dgp"}
    unknown = sorted(set(exp) - known)
    if unknown:
        raise UsageError(f"unknown experiment keys: {', '.join(unknown)}")
    try:
        dgp = simlab.DGPSpec(**doc["dgp"])
        for key in ("full_sizes", "learning_sizes", "learning_fractions", "estimators"):
            if key in exp and exp[key] is not None:
                exp[key] = tuple(exp[key])
        return simlab.ExperimentConfig(dgp=dgp, **exp)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def cmd_simulate(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    doc = load_sim_config(resolve_path(args.config))
    seed = resolve_seed(int(doc.get("seed", 0)), args.seed)
    cfg = experiment_from_config(
        doc, args.profile, {"rng_seed": seed, "V": args.V, "record_runtime": True if args.timings else None}
    )
    if args.dry_run:
        print(f"config ok: {len(cfg.grid())} (nL, nF) pairs x {len(cfg.estimators)} estimators, V={cfg.V}")
        return EXIT_OK
    rows = simlab.run_experiment(cfg, workers=args.threads)
    out = Outputs(Path(args.out))
    out.write("metrics.csv", simlab.metrics_to_csv(rows))
    out.manifest("simulate", cfg.to_dict(), seed, time.perf_counter() - t0)
    for r in rows:
        print(f"{r.estimator:8s} nL={r.nL:4d} nF={r.nF:4d} mse_is_f={r.mse_is_f:.4g} mse_f={r.mse_f:.4g} k_avg={r.k_avg:.2f}")
    return EXIT_OK


def _fit_report(model: Any, data: Dataset, name: str, meta: dict[str, Any]) -> dict[str, Any]:
    fitted = in_sample(model, data)
    k = n_hyperplanes(model)
    report = {
        "estimator": name,
        "n": data.n,
        "d": data.d,
        "learning_mse": float(np.mean((fitted - data.outputs) ** 2)),
        "K": model.K if isinstance(model, PiecewiseLinearModel) else None,
        "n_hyperplanes": None if np.isnan(k) else k,
        "data": meta,
    }
    return report


def cmd_fit(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    seed = resolve_seed(0, args.seed)
    est = build_estimator(args.estimator, parse_params(args.params or []), seed)
    data, meta = load_dataset(resolve_path(args.data), args.industry)
    model = est.fit(data)
    out = Outputs(Path(args.out))
    out.write("model.json", dumps(_finite(model_document(model))))
    report = _fit_report(model, data, est.name, meta)
    status = EXIT_OK
    if args.validate:
        if not isinstance(model, PiecewiseLinearModel):
            raise UsageError("--validate applies to piecewise-linear estimators only")
        diag = validate_model(model, data)
        report["validation"] = dataclasses.asdict(diag) | {"ok": diag.ok}
        status = EXIT_OK if diag.ok else EXIT_FAILURE
    out.write("fit_report.json", dumps(_finite(report)))
    out.manifest("fit", {"estimator": args.estimator, "params": args.params or [], "data": args.data}, seed, time.perf_counter() - t0)
    print(f"{est.name}: n={data.n} d={data.d} learning_mse={report['learning_mse']:.6g} K={report['K']}")
    return status


def cmd_validate(args: argparse.Namespace) -> int:
    doc = json.loads(resolve_path(args.model).read_text(encoding="utf-8"))
    if doc.get("type", "piecewise_linear") != "piecewise_linear":
        raise UsageError("only piecewise-linear models can be validated")
    model = PiecewiseLinearModel.from_dict(doc)
    if args.tolerance is not None:
        model = dataclasses.replace(model, feasibility_tolerance=args.tolerance)
    data, _ = load_dataset(resolve_path(args.data), args.industry)
    diag = validate_model(model, data)
    print(dumps(_finite(dataclasses.asdict(diag) | {"ok": diag.ok})), end="")
    return EXIT_OK if diag.ok else EXIT_FAILURE


def _fractions(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--fractions must be comma-separated numbers: {exc}") from exc
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise UsageError("--fractions values must lie in (0, 1]")
    return vals


def curve_from_comparison(comp: selection.MethodComparison, estimator: str) -> survey.SubsampleCurve:
    points = []
    for f in comp.fractions:
        est = comp.estimates.get((estimator, f))
        if est is None:
            continue
        vals = np.array(est.per_replicate_r2_fs)
        points.append(survey.CurvePoint(f, float(vals.mean()), float(vals.min()), float(vals.max()), est.r2_pred))
    return survey.SubsampleCurve(estimator, tuple(points))


def cmd_select(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    seed = resolve_seed(0, args.seed)
    fractions = _fractions(args.fractions)
    names = [n.strip() for n in args.estimators.split(",") if n.strip()]
    estimators = [build_estimator(n, seed=seed) for n in names]
    prof = PROFILES[args.profile]
    V = args.V or prof["V"]
    B = args.B or prof["B"]
    report = survey.load_survey(resolve_path(args.survey))
    codes = survey.industries(report.records)
    if not codes:
        raise UsageError("survey file has no usable records")
    code = args.industry or codes[0]
    if code not in codes:
        raise UsageError(f"industry {code!r} not in survey (have {', '.join(codes)})")
    ind = survey.build_industry_dataset(report.records, code)
    partial = tuple(f for f in fractions if f < 1)
    try:
        rlt = selection.RLTConfig(partial, V=V, rng_seed=seed)
        boot = selection.BootstrapConfig(B=B, rng_seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    comp = selection.compare_methods(
        ind.data, estimators, rlt, boot, include_census=1.0 in fractions,
        dataset_name=code, workers=args.threads,
    )
    out = Outputs(Path(args.out))
    out.write("cleaned.csv", survey.dataset_to_csv(ind))
    out.write("comparison.csv", comp.to_csv())
    out.write("comparison.json", comp.to_json() + "\n")
    curves = "".join(
        c.to_csv() if i == 0 else c.to_csv().split("\n", 1)[1]
        for i, c in enumerate(curve_from_comparison(comp, e) for e in comp.estimators)
    )
    out.write("curves.csv", curves)
    config = {
        "survey": args.survey, "industry": code, "fractions": fractions, "estimators": names,
        "V": V, "B": B, "dropped_count": ind.dropped_count, "rejected_rows": len(report.rejected),
    }
    out.manifest("select", config, seed, time.perf_counter() - t0)
    for f in comp.fractions:
        row = ", ".join(f"{e}={comp.estimates[(e, f)].r2_fs:.3f}" for e in comp.estimators if (e, f) in comp.estimates)
        print(f"fraction {f:.2f}: {row}; best: {', '.join(comp.best[f])}")
    for name, msg in comp.failures.items():
        print(f"{name} failed: {msg}", file=sys.stderr)
    return EXIT_FAILURE if len(comp.failures) == len(estimators) else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capnls", description="Shape-constrained production function estimation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, out: bool = True) -> None:
        sp.add_argument("--seed", type=int, default=None, help="override the seed (beats FRONTIER_SEED)")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
        if out:
            sp.add_argument("--out", default="capnls-out", help="output directory")

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment from a TOML/JSON config")
    s.add_argument("config", help="config path or builtin:complexity_sigma01.toml")
    s.add_argument("--profile", choices=sorted(PROFILES), default="full", help="defaults for V, W, nT_f")
    s.add_argument("--V", type=int, default=None, help="replicates (overrides config)")
    s.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    s.add_argument("--timings", action="store_true", help="record fit runtimes (rows stop being reproducible)")
    common(s)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit one estimator to a CSV file")
    f.add_argument("data", help="survey-schema or x/y CSV (or builtin:<file>)")
    f.add_argument("--estimator", required=True, help="capnls, capnlsf, cap, cnls, cda, cdm or ols")
    f.add_argument("--params", nargs="*", help="key=value pairs or one JSON object")
    f.add_argument("--industry", default=None, help="industry code for survey files (default: largest)")
    f.add_argument("--validate", action="store_true", help="check Afriat feasibility and monotonicity")
    common(f)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("select", help="compare estimators on one survey industry")
    c.add_argument("survey", help="survey CSV (or builtin:synthetic_survey.csv)")
    c.add_argument("--industry", default=None)
    c.add_argument("--fractions", default="0.2,0.3,0.4,0.5,1.0", help="survey fractions; 1.0 is the census")
    c.add_argument("--estimators", default="capnls,cap,cda,cdm")
    c.add_argument("--profile", choices=sorted(PROFILES), default="full", help="defaults for V and B")
    c.add_argument("--V", type=int, default=None)
    c.add_argument("--B", type=int, default=None)
    common(c)
    c.set_defaults(func=cmd_select)

    v = sub.add_parser("validate", help="check a saved model against a dataset")
    v.add_argument("model", help="model.json written by fit")
    v.add_argument("data")
    v.add_argument("--industry", default=None)
    v.add_argument("--tolerance", type=float, default=None)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("capnls: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"capnls: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except survey.SurveyFormatError as exc:
        print(f"capnls: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, QPSolverError, selection.SelectionError, ValueError, OSError) as exc:
        print(f"capnls: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
