"""Batch command-line front end: fit, simulate, evaluate, predict, plotdata.

Every command is deterministic given its inputs and seed; the only
nondeterministic output is the ``metadata.timestamp`` field of JSON reports.
Exit codes: 0 success, 1 input or configuration error, 2 fit finished
without converging (the report is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .convolution import ConvolutiveLongStay, conv_pdf
from .distributions import ContDistSpec, CountDistSpec, cont_pdf
from .errors import ConfigError, ConvlosError
from .estimation import FitConfig, fit
from .estimation.em import em_e_step
from .gof import baseline_models, compare, marginal_cdf
from .io import StayRecord, load_yaml, read_csv, write_csv, write_report
from .links import DesignMatrix, FeatureSchema, ParameterMap, encode
from .mixture import MixtureModel, mix_cdf, mix_mean, mix_sample, model_from_dict

log = logging.getLogger("convlos")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
COMMANDS = ("fit", "simulate", "evaluate", "predict", "plotdata")

# named DRG groups; a record matches a group when its code equals or starts with a listed prefix
DRG_PRESETS = {
    "atienza5": {
        "B70": ("B70",),
        "E65B": ("E65B",),
        "F60B": ("F60B",),
        "F62": ("F62A", "F62B"),
        "E-respiratory": ("E02", "E40", "E41Z", "E64", "E67", "E71", "E75", "E76Z"),
    },
}

QUANTILES = (0.1, 0.5, 0.9)
QUANTILE_TOL = 1e-8
GRID_POINTS = 512
DEFAULT_BIN_WIDTH = 0.25

DEFAULTS = {"method": "EM", "seed": None, "bins": DEFAULT_BIN_WIDTH, "baselines": False, "n": None,
            "drg_preset": None, "drg_group": None, "schema": None, "model": None, "data": None,
            "out": None}


def default_template() -> MixtureModel:
    """Negative binomial lag plus normal recovery; values are only placeholders."""
    return MixtureModel(0.5, ContDistSpec.lognormal(0.0, 1.0),
                        ConvolutiveLongStay(CountDistSpec.negbin(1.0, 0.5), ContDistSpec.normal(1.0, 1.0)))


# --------------------------------------------------------------------------- #
# Argument handling
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convlos", description=__doc__.splitlines()[0])
    p.add_argument("--command", choices=COMMANDS, help="what to run")
    p.add_argument("--config", help="YAML file with any of the options below plus a 'fit' section")
    p.add_argument("--data", help="CSV of stay records")
    p.add_argument("--schema", help="YAML/JSON feature schema")
    p.add_argument("--model", action="append",
                   help="model YAML/JSON or fit report (evaluate accepts several)")
    p.add_argument("--method", choices=("MLE", "EM", "EM2D"), help="estimator for fit (default EM)")
    p.add_argument("--seed", type=int, help="random seed (mandatory for simulate)")
    p.add_argument("--n", type=int, help="number of records to simulate")
    p.add_argument("--out", help="output path")
    p.add_argument("--drg-preset", dest="drg_preset", choices=sorted(DRG_PRESETS),
                   help="restrict to a named set of DRG groups")
    p.add_argument("--drg-group", dest="drg_group", help="use only this group of the preset")
    p.add_argument("--bins", type=float, help="histogram bin width in days (default 0.25)")
    p.add_argument("--baselines", action="store_true", default=None,
                   help="also fit log-normal, gamma and Weibull baselines")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and flags; explicit flags win."""
    opts = dict(DEFAULTS)
    fit_opts = {}
    if args.config:
        cfg = load_yaml(args.config)
        fit_opts = dict(cfg.pop("fit", {}) or {})
        unknown = set(cfg) - set(DEFAULTS) - {"command"}
        if unknown:
            raise ConfigError(f"{args.config}: unknown options {sorted(unknown)}")
        base = Path(args.config).parent
        for key in ("data", "schema", "out"):
            if cfg.get(key) is not None:
                cfg[key] = str(base / cfg[key])
        if cfg.get("model") is not None:
            models = cfg["model"] if isinstance(cfg["model"], list) else [cfg["model"]]
            cfg["model"] = [str(base / m) for m in models]
        opts.update(cfg)
    for key, value in vars(args).items():
        if key in ("config", "verbose") or value is None:
            continue
        opts[key] = value
    if opts.get("command") is None:
        raise ConfigError("no command given (use --command)")
    if isinstance(opts.get("model"), str):
        opts["model"] = [opts["model"]]
    fit_opts.setdefault("method", opts["method"])
    if args.method is not None:
        fit_opts["method"] = args.method
    if opts["seed"] is not None:
        fit_opts["seed"] = int(opts["seed"])
    opts["fit"] = fit_opts
    return opts


def _require(opts, *keys):
    for key in keys:
        if not opts.get(key):
            raise ConfigError(f"--{key.replace('_', '-')} is required for {opts['command']}")


# --------------------------------------------------------------------------- #
# Shared helpers
# --------------------------------------------------------------------------- #


def _schema(opts) -> Optional[FeatureSchema]:
    if not opts.get("schema"):
        return None
    return FeatureSchema.from_dict(load_yaml(opts["schema"]))


def _load_model_doc(path) -> tuple[MixtureModel, dict]:
    doc = load_yaml(path)
    return model_from_dict(doc), doc


def drg_groups(opts) -> dict[str, tuple[str, ...]]:
    name = opts.get("drg_preset")
    if not name:
        return {}
    if name not in DRG_PRESETS:
        raise ConfigError(f"unknown DRG preset {name!r}")
    groups = DRG_PRESETS[name]
    if opts.get("drg_group"):
        if opts["drg_group"] not in groups:
            raise ConfigError(f"preset {name!r} has no group {opts['drg_group']!r}")
        groups = {opts["drg_group"]: groups[opts["drg_group"]]}
    return dict(groups)


def matches_drg(code: str, prefixes: Sequence[str]) -> bool:
    code = str(code).strip()
    return any(code == p or code.startswith(p) for p in prefixes)


def filter_records(records, prefixes):
    if records and "drg" not in records[0].raw:
        raise ConfigError("a DRG filter needs a 'drg' column in the data")
    return [r for r in records if matches_drg(r.raw["drg"], prefixes)]


def _design(records, schema: Optional[FeatureSchema]) -> Optional[DesignMatrix]:
    if schema is None or not any(schema.parameters.values()):
        return None
    return encode([r.features for r in records], schema)


def _template_with_covariates(template: MixtureModel, schema: Optional[FeatureSchema]) -> MixtureModel:
    if schema is None:
        return template
    maps = {}
    for target in template.targets():
        cols = schema.parameter_columns(target)
        if cols:
            maps[target] = ParameterMap(target, np.zeros(len(cols)), cols, schema.links.get(target))
    return template.with_maps(maps)


def _write_rows(path, header, rows):
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot write ({exc.strerror or exc})") from exc


def _fmt(x) -> str:
    return format(float(x), ".17g")


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_fit(opts) -> int:
    _require(opts, "data", "out")
    schema = _schema(opts)
    records = read_csv(opts["data"], schema)
    groups = drg_groups(opts)
    if groups:
        records = filter_records(records, [p for g in groups.values() for p in g])
    if not records:
        raise ConfigError("no records left to fit")
    if schema is not None:
        schema = schema.frozen(r.features for r in records)
    if opts.get("model"):
        template, _ = _load_model_doc(opts["model"][0])
    else:
        template = default_template()
    template = _template_with_covariates(template, schema)
    config = FitConfig.from_dict(opts["fit"], model=template)
    y = np.array([r.los_days for r in records])
    matrix = _design(records, schema)
    result = fit(y, template, config, matrix)
    label = "proposed model" + (" (covariate-adjusted)" if result.theta_hat.has_covariates else "")
    models = [(label, marginal_cdf(result.theta_hat, matrix))]
    if opts.get("baselines"):
        models += baseline_models(y)
    extra = {"label": label, "n": int(y.size), "config": config.to_dict(),
             "drg_filter": sorted(groups), "schema": schema.to_dict() if schema else None}
    write_report(result, opts["out"], gof=compare(y, models), extra=extra)
    log.info("fit %s: loglik %.6f after %d iterations (%s)", config.method, result.loglik,
             result.iterations, result.reason)
    if not result.converged:
        log.warning("fit did not converge: %s", result.reason)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _generate_features(schema: FeatureSchema, n: int, rng) -> list[dict]:
    """Independent uniform draws over each declared level set or numeric range."""
    columns = {}
    for spec in schema.features:
        if spec.kind == "categorical":
            if not spec.levels:
                raise ConfigError(f"simulate needs declared levels for {spec.name!r}")
            columns[spec.name] = [spec.levels[i] for i in rng.integers(0, len(spec.levels), n)]
        else:
            if spec.minimum is None or spec.maximum is None:
                raise ConfigError(f"simulate needs min and max for numeric feature {spec.name!r}")
            columns[spec.name] = rng.uniform(spec.minimum, spec.maximum, n).tolist()
    return [{name: col[i] for name, col in columns.items()} for i in range(n)]


def simulate_positive(model: MixtureModel, n: int, rng, matrix=None, max_rounds: int = 1000):
    """Draw stays, redrawing the (rare) non-positive values of a normal recovery time."""
    y, is_long = mix_sample(model, n, rng, matrix)
    for _ in range(max_rounds):
        bad = np.flatnonzero(y <= 0)
        if bad.size == 0:
            return y, is_long
        sub = matrix.take(bad) if matrix is not None else None
        y[bad], is_long[bad] = mix_sample(model, bad.size, rng, sub)
    raise ConfigError("the model puts almost no mass on positive stays")


def cmd_simulate(opts) -> int:
    _require(opts, "model", "out")
    if opts.get("seed") is None:
        raise ConfigError("--seed is mandatory for simulate")
    if opts.get("n") is None or int(opts["n"]) < 0:
        raise ConfigError("--n must be a non-negative integer")
    n = int(opts["n"])
    model, _ = _load_model_doc(opts["model"][0])
    schema = _schema(opts)
    rng = np.random.default_rng(int(opts["seed"]))
    features: list[dict] = [{} for _ in range(n)]
    matrix = None
    if schema is not None:
        features = _generate_features(schema, n, rng)
        if model.has_covariates and n:
            matrix = encode(features, schema)
    elif model.has_covariates:
        raise ConfigError("a model with covariates needs --schema to simulate")
    if n:
        y, is_long = simulate_positive(model, n, rng, matrix)
    else:
        y, is_long = np.empty(0), np.empty(0, dtype=bool)
    columns = [f.name for f in schema.features] if schema is not None else []
    records = [StayRecord(float(y[i]), {**features[i], "long_stay": int(is_long[i])}, i + 1)
               for i in range(n)]
    write_csv(opts["out"], records, columns + ["long_stay"])
    return EXIT_OK


def _report_model(path):
    doc = load_yaml(path)
    model = model_from_dict(doc)
    schema = FeatureSchema.from_dict(doc["schema"]) if doc.get("schema") else None
    label = doc.get("label") or Path(path).stem
    return model, schema, label


def cmd_evaluate(opts) -> int:
    _require(opts, "data", "model", "out")
    records = read_csv(opts["data"])
    fitted = [_report_model(p) for p in opts["model"]]
    groups = drg_groups(opts) or {"all": None}
    header = ["group", "label", "n", "distance"]
    rows = []
    for group, prefixes in groups.items():
        subset = records if prefixes is None else filter_records(records, prefixes)
        if not subset:
            log.warning("group %s has no records", group)
            continue
        y = np.array([r.los_days for r in subset])
        models = []
        for k, (model, schema, label) in enumerate(fitted):
            matrix = None
            if model.has_covariates:
                if schema is None:
                    raise ConfigError(f"{opts['model'][k]}: covariate model without a stored schema")
                matrix = encode([r.features for r in subset], schema)
            models.append((label, marginal_cdf(model, matrix)))
        if opts.get("baselines"):
            models += baseline_models(y)
        for r in compare(y, models):
            rows.append([group, r.label, r.n, repr(r.distance)])
    out = Path(opts["out"])
    if out.suffix.lower() == ".json":
        out.write_text(json.dumps([dict(zip(header, row[:3] + [float(row[3])])) for row in rows],
                                  indent=2) + "\n", encoding="utf-8")
    else:
        _write_rows(out, header, rows)
    return EXIT_OK


def mix_quantile(model: MixtureModel, probs, matrix=None, n=None, tol: float = QUANTILE_TOL):
    """Row-wise quantiles of the mixture by bisection on its CDF."""
    probs = np.asarray(probs, dtype=float)
    n = probs.size if n is None else n
    lo = np.zeros(n)
    hi = np.ones(n)
    for _ in range(200):
        low = mix_cdf(model, hi, matrix) < probs
        if not low.any():
            break
        hi = np.where(low, 2 * hi, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        F = mix_cdf(model, mid, matrix)
        if np.all(np.abs(F - probs) <= tol) or np.all(hi - lo <= 1e-12 * np.maximum(1.0, hi)):
            return mid
        below = F < probs
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def cmd_predict(opts) -> int:
    _require(opts, "data", "model", "out")
    model, schema, _ = _report_model(opts["model"][0])
    records = read_csv(opts["data"], schema, require_los=False)
    n = len(records)
    matrix = encode([r.features for r in records], schema) if model.has_covariates and n else None
    header = ["row", "los_days", "mean", "p_long"] + [f"q{int(round(100 * q))}" for q in QUANTILES]
    if n == 0:
        _write_rows(opts["out"], header, [])
        return EXIT_OK
    mean = np.broadcast_to(mix_mean(model, matrix, n), (n,))
    resolved = model.resolve(matrix, n)
    p_long = np.full(n, float(resolved.pi))
    observed = np.array([r.los_days is not None for r in records])
    if observed.any():
        idx = np.flatnonzero(observed)
        y_obs = np.array([records[i].los_days for i in idx])
        sub = matrix.take(idx) if matrix is not None else None
        p_long[idx] = em_e_step(model, y_obs, sub)[:, 1]
    quants = [mix_quantile(model, np.full(n, q), matrix, n) for q in QUANTILES]
    rows = []
    for i, rec in enumerate(records):
        los = "" if rec.los_days is None else _fmt(rec.los_days)
        rows.append([rec.row, los, _fmt(mean[i]), _fmt(p_long[i])] + [_fmt(q[i]) for q in quants])
    _write_rows(opts["out"], header, rows)
    return EXIT_OK


def histogram(y, width: float):
    """Density-scaled histogram on ``[0, k * width]`` covering the data."""
    if not width > 0:
        raise ConfigError("--bins must be a positive width in days")
    top = max(float(np.max(y)), width)
    edges = np.arange(0.0, np.ceil(top / width) * width + 0.5 * width, width)
    if edges[-1] < top:
        edges = np.append(edges, edges[-1] + width)
    counts, edges = np.histogram(y, bins=edges)
    return edges, counts / (counts.sum() * np.diff(edges))


def density_curves(model: MixtureModel, x, matrix=None):
    """Component densities and the mixture on ``x``, averaged over the design rows."""
    if matrix is None or not model.has_covariates:
        units = [(1.0, model)]
    else:
        rows, counts = np.unique(matrix.values, axis=0, return_counts=True)
        units = [(c / counts.sum(), model.resolve(DesignMatrix(r[None, :], matrix.column_names), 1))
                 for r, c in zip(rows, counts)]
    short = np.zeros_like(x)
    long = np.zeros_like(x)
    mixture = np.zeros_like(x)
    with np.errstate(divide="ignore"):
        for w, m in units:
            fs = cont_pdf(m.short, x)
            fl = conv_pdf(m.long, x) if m.pi > 0 else np.zeros_like(x)
            short += w * fs
            long += w * fl
            mixture += w * ((1.0 - m.pi) * fs + m.pi * fl)
    return short, long, mixture


def cmd_plotdata(opts) -> int:
    _require(opts, "data", "model", "out")
    model, schema, _ = _report_model(opts["model"][0])
    records = read_csv(opts["data"], schema if model.has_covariates else None)
    if not records:
        raise ConfigError("no records to plot")
    y = np.array([r.los_days for r in records])
    matrix = encode([r.features for r in records], schema) if model.has_covariates else None
    edges, dens = histogram(y, float(opts.get("bins") or DEFAULT_BIN_WIDTH))
    x = np.linspace(edges[0], edges[-1], GRID_POINTS)
    short, long, mixture = density_curves(model, x, matrix)
    rows = [["bin", _fmt(a), _fmt(b), _fmt(d), "", "", ""]
            for a, b, d in zip(edges[:-1], edges[1:], dens)]
    rows += [["curve", _fmt(xi), "", "", _fmt(s), _fmt(lg), _fmt(m)]
             for xi, s, lg, m in zip(x, short, long, mixture)]
    _write_rows(opts["out"], ["kind", "x", "x_right", "density", "short", "long", "mixture"], rows)
    return EXIT_OK


HANDLERS = {"fit": cmd_fit, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "plotdata": cmd_plotdata}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
        return HANDLERS[opts["command"]](opts)
    except (ConvlosError, ValueError, TypeError, OSError, KeyError) as exc:
        print(f"convlos: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
