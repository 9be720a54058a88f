"""Command-line interface: ``condisp {fit,bootstrap,simulate,breakdown}``.

Runs are driven by a YAML config (JSON manifests written by earlier runs
are valid configs too).  Exit codes: 0 success, 2 configuration error,
3 data error, 4 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .bandwidth import default_grid
from .bootstrap import bootstrap
from .core import CovariatePartition, Dataset, RngStream, validate
from .errors import CondispError, ConfigError, DataError, ValidationError
from .estimators import EstimatorTag, fit_estimator
from .kernels import BandwidthSet
from .models import ModelSpec
from .simulation import (
    BINOMIAL_MIXTURE,
    ContaminationScheme,
    StudyConfig,
    alpha_curve,
    breakdown_curve,
    fmt,
    run_study,
    to_csv,
    to_markdown,
)

log = logging.getLogger("condisp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3, 4
COMMANDS = ("fit", "bootstrap", "simulate", "breakdown")
BUILTIN = "builtin:"


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    cfg = dict(cfg.get("config", cfg))
    data = cfg.get("data")
    if isinstance(data, dict) and data.get("path") and not str(data["path"]).startswith(BUILTIN):
        # resolve against the config file so a written manifest stays valid anywhere
        resolved = Path(str(data["path"]))
        if not resolved.is_absolute():
            resolved = Path(path).resolve().parent / resolved
        cfg["data"] = dict(data, path=str(resolved))
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def _seed(cfg: dict) -> int:
    if "seed" not in cfg or cfg["seed"] is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    try:
        return int(cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}") from exc


def _grid(cfg: dict):
    g = _section(cfg, "bandwidth").get("grid")
    if g is None:
        return default_grid()
    if isinstance(g, dict):
        return default_grid(int(g.get("points", 15)), float(g.get("lo", 0.05)), float(g.get("hi", 5.0)))
    arr = np.asarray(g, dtype=float)
    if arr.size == 0 or np.any(arr <= 0):
        raise ConfigError("bandwidth grid must contain positive values")
    return arr


def _model(cfg: dict) -> ModelSpec:
    m = _section(cfg, "model")
    family = str(m.get("family", "gaussian")).lower()
    try:
        if family in ("gaussian", "linear"):
            return ModelSpec.gaussian()
        if family == "logistic":
            return ModelSpec.logistic()
        if family == "binomial":
            return ModelSpec.binomial(int(m.get("trials", 8)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown model family {family!r}")


def _estimators(cfg: dict) -> list[str]:
    tags = cfg.get("estimators")
    if not tags:
        raise ConfigError("no estimators requested")
    tags = [str(t) for t in tags]
    for t in tags:
        try:
            EstimatorTag.parse(t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return tags


def _read_table(path: Path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DataError(f"cannot read data file {path}: {exc}") from exc
    if not header:
        raise DataError(f"{path} has no header row")
    header = [h.strip() for h in header]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path} row {i + 2} has {len(r)} fields, expected {len(header)}")
    return header, rows


def _data_path(cfg: dict) -> Path:
    data = _section(cfg, "data")
    p = data.get("path")
    if not p:
        raise ConfigError("data.path is required")
    p = str(p)
    if p.startswith(BUILTIN):
        return Path(str(resources.files("condisp") / "data" / (p[len(BUILTIN):] + ".csv")))
    return Path(p)


def _numeric(col, name) -> np.ndarray:
    try:
        return np.array([float(v) for v in col])
    except ValueError as exc:
        raise DataError(f"column {name!r} is not numeric: {exc}") from exc


def _codes(col) -> tuple[np.ndarray, dict]:
    """Numeric labels are kept; other labels get integer codes in sorted order."""
    try:
        return np.array([float(v) for v in col]), {}
    except ValueError:
        levels = sorted(set(col))
        lookup = {lv: k for k, lv in enumerate(levels)}
        return np.array([lookup[v] for v in col], dtype=float), {str(k): lv for lv, k in lookup.items()}


def load_dataset(cfg: dict) -> tuple[Dataset, dict]:
    """Read the CSV named in the config and type its columns by the schema."""
    data = _section(cfg, "data")
    header, rows = _read_table(_data_path(cfg))
    cols = {h: [r[j].strip() for r in rows] for j, h in enumerate(header)}
    response = data.get("response")
    response_disc = data.get("response_discrete")
    covs = list(data.get("covariates") or [])
    discrete = set(data.get("discrete") or [])
    responses = [response] if isinstance(response, str) else list(response or [])
    for name in responses + covs + ([response_disc] if response_disc else []):
        if name not in cols:
            raise DataError(f"column {name!r} not found in data (have {header})")
    if not set(discrete) <= set(covs):
        raise ConfigError("data.discrete must list covariates")
    if not responses and not response_disc:
        raise ConfigError("data.response or data.response_discrete is required")
    cont = [c for c in covs if c not in discrete]
    disc = [c for c in covs if c in discrete]
    dictionary = {}
    x_disc = None
    if disc:
        blocks = []
        for c in disc:
            codes, d = _codes(cols[c])
            blocks.append(codes)
            if d:
                dictionary[c] = d
        x_disc = np.column_stack(blocks)
    y_disc = None
    if response_disc:
        y_disc = _numeric(cols[response_disc], response_disc)
    ds = Dataset(
        y_cont=np.column_stack([_numeric(cols[c], c) for c in responses]) if responses else None,
        x_cont=np.column_stack([_numeric(cols[c], c) for c in cont]) if cont else np.zeros((len(rows), 0)),
        x_disc=x_disc,
        y_disc=y_disc,
        y_names=tuple(responses),
        x_names=tuple(cont + disc),
    )
    validate(ds)
    return ds, dictionary


def _partition(cfg: dict, ds: Dataset) -> CovariatePartition | None:
    part = cfg.get("partition")
    if not part:
        return None
    index = {name: i for i, name in enumerate(ds.x_names)}

    def idx(names):
        try:
            return tuple(index[n] for n in names or [])
        except KeyError as exc:
            raise ConfigError(f"partition names unknown covariate {exc}") from exc

    p = CovariatePartition(idx(part.get("m_only")), idx(part.get("shared")), idx(part.get("g_only")))
    validate(ds, p)
    return p


def _fixed_bandwidths(cfg: dict, ds: Dataset):
    fixed = _section(cfg, "bandwidth").get("fixed")
    if not fixed:
        return None
    try:
        return BandwidthSet(float(fixed.get("c_m", 1.0)), float(fixed.get("c_g", 1.0)), float(fixed.get("c_y", 1.0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _bw_echo(bw) -> object:
    if bw is None:
        return None
    if isinstance(bw, float):
        return {"residual": bw}

    def c(v):
        return {str(k): float(x) for k, x in v.items()} if isinstance(v, dict) else float(v)

    return {
        "c_m": c(bw.c_m), "c_g": c(bw.c_g), "c_y": float(bw.c_y),
        "x_scale": None if bw.x_scale is None else bw.x_scale.tolist(),
        "y_scale": None if bw.y_scale is None else bw.y_scale.tolist(),
    }


def _versions() -> dict:
    return {"condisp": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")


def _manifest(out: Path, cfg: dict, command: str, extra: dict):
    clean = dict(cfg, command=command)
    doc = {"config": clean, "config_hash": config_hash(clean), "versions": _versions()}
    doc.update(extra)
    _write(out, "manifest.json", json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _param_names(model: ModelSpec, ds: Dataset) -> tuple[str, ...]:
    cols = ds.x_names if model.columns is None else tuple(ds.x_names[c] for c in model.columns)
    return ("intercept",) + tuple(cols) + (("log_sigma",) if not model.discrete else ())


def cmd_fit(cfg: dict, out: Path, n_jobs: int, force_bootstrap: bool = False) -> int:
    """Fit every requested estimator (plus optional bootstrap) on a CSV dataset."""
    seed = _seed(cfg)
    model = _model(cfg)
    tags = _estimators(cfg)
    ds, dictionary = load_dataset(cfg)
    partition = _partition(cfg, ds)
    grid = _grid(cfg)
    fixed = _fixed_bandwidths(cfg, ds)
    disp = _section(cfg, "disparity")
    mc_points = int(disp.get("mc_points", 101))
    aggregation = str(disp.get("aggregation", "average"))
    B = int(_section(cfg, "bootstrap").get("B", 0))
    if force_bootstrap and B < 2:
        B = 100
    names = _param_names(model, ds)
    records = []
    bandwidths = {}
    failures = {}
    for tag in tags:
        stream = RngStream(seed, ("fit", tag))
        try:
            fit = fit_estimator(tag, ds, model, bandwidths=fixed, grid=grid, mc_points=mc_points,
                                aggregation=aggregation, rng=stream.spawn("mc"), partition=partition)
            bandwidths[tag] = _bw_echo(fit.bandwidths)
            bres = None
            if B >= 2:
                bres = bootstrap(fit, ds, model, B, stream.spawn("boot"), n_jobs=n_jobs, mc_points=mc_points,
                                 aggregation=aggregation)
            for j, name in enumerate(names):
                records.append({
                    "estimator": tag, "parameter": name, "estimate": float(fit.theta[j]),
                    "corrected": float(bres.corrected[j]) if bres else "",
                    "sd": float(bres.se[j]) if bres else "",
                    "status": "ok" if fit.converged else "not-converged",
                })
            if bres:
                failures[tag] = bres.failures
        except CondispError as exc:
            log.error("%s failed: %s", tag, exc)
            failures[tag] = str(exc)
            for name in names:
                records.append({"estimator": tag, "parameter": name, "estimate": "", "corrected": "", "sd": "",
                                "status": f"failed: {type(exc).__name__}"})
    _write(out, "estimates.csv", to_csv(records))
    _manifest(out, cfg, "bootstrap" if force_bootstrap else "fit", {
        "seed": seed, "B": B, "bandwidths": bandwidths, "bootstrap_failures": failures,
        "label_dictionary": dictionary, "outputs": ["estimates.csv"],
    })
    any_failed = any(isinstance(v, str) for v in failures.values())
    return EXIT_ESTIMATION if any_failed else EXIT_OK


def _scheme(cfg: dict) -> ContaminationScheme:
    c = _section(cfg, "contamination")
    try:
        return ContaminationScheme(
            mode=str(c.get("mode", "uniform")), k=int(c.get("k", 0)), z=float(c.get("z", 0.0)),
            alpha=float(c.get("alpha", 0.0)), placement=str(c.get("placement", "uniform")),
            location=float(c.get("location", -0.5)),
        )
    except CondispError as exc:
        raise ConfigError(str(exc)) from exc


def study_config(cfg: dict, n_jobs: int = 1) -> StudyConfig:
    sim = _section(cfg, "simulation")
    disp = _section(cfg, "disparity")
    family = str(_section(cfg, "model").get("family", sim.get("model", "linear"))).lower()
    model = {"gaussian": "linear"}.get(family, family)
    if model not in ("linear", "logistic", "binomial"):
        raise ConfigError(f"simulation model must be linear, logistic or binomial, got {family!r}")
    g = _section(cfg, "bandwidth").get("grid")
    grid = None if g is None else tuple(float(v) for v in _grid(cfg))
    truth = sim.get("truth")
    return StudyConfig(
        model=model,
        n=int(sim.get("n", 31 if model == "linear" else 121)),
        R=int(sim.get("R", 100)),
        estimators=tuple(_estimators(cfg)),
        seed=_seed(cfg),
        B=int(_section(cfg, "bootstrap").get("B", 0)),
        truth=None if truth is None else tuple(float(v) for v in truth),
        contamination=_scheme(cfg),
        grid=grid,
        mc_points=int(disp.get("mc_points", 101)),
        aggregation=str(disp.get("aggregation", "average")),
        trials=int(_section(cfg, "model").get("trials", 8)),
        exact=bool(sim.get("exact", True)),
        n_jobs=n_jobs,
    )


def _curve_records(summary) -> list[dict]:
    sch = summary.config.contamination
    out = []
    for tag, s in summary.rows.items():
        for j, name in enumerate(s.params):
            out.append({"z": sch.z, "estimator": tag, "parameter": name, "mean": s.mean[j]})
    return out


def cmd_simulate(cfg: dict, out: Path, n_jobs: int) -> int:
    """Replication study: ``summary.csv``, ``summary.md``, ``curves.csv`` and a manifest."""
    scfg = study_config(cfg, n_jobs)
    summary = run_study(scfg)
    records = summary.to_records()
    for r in records:
        r.pop("time", None)
    _write(out, "summary.csv", to_csv(records))
    _write(out, "summary.md", to_markdown(summary))
    _write(out, "curves.csv", to_csv(_curve_records(summary)))
    failures = {t: s.failures for t, s in summary.rows.items()}
    _manifest(out, cfg, "simulate", {
        "seed": scfg.seed, "R": scfg.R, "B": scfg.B, "failures": failures,
        "mean_seconds": {t: fmt(s.mean_seconds) for t, s in summary.rows.items()},
        "outputs": ["summary.csv", "summary.md", "curves.csv"],
    })
    return EXIT_ESTIMATION if any(f == scfg.R for f in failures.values()) else EXIT_OK


def cmd_breakdown(cfg: dict, out: Path, n_jobs: int) -> int:
    """Mean-estimate curves over outlier values (or binomial contamination fractions)."""
    scfg = study_config(cfg, n_jobs)
    bd = _section(cfg, "breakdown")
    if scfg.contamination.mode == BINOMIAL_MIXTURE or "alphas" in bd:
        alphas = bd.get("alphas", [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
        curves = alpha_curve(replace(scfg, B=0), alphas, scfg.contamination.placement)
    else:
        z_grid = bd.get("z_grid", [3, 5, 10, 15])
        curves = breakdown_curve(replace(scfg, B=0), z_grid)
    _write(out, "curves.csv", to_csv(curves))
    _manifest(out, cfg, "breakdown", {"seed": scfg.seed, "R": scfg.R, "outputs": ["curves.csv"]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condisp", description="Minimum conditional disparity estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("fit", "fit estimators to a CSV dataset"),
        ("bootstrap", "fit and bootstrap (B defaults to 100)"),
        ("simulate", "run a replication study"),
        ("breakdown", "mean-estimate curves under growing contamination"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML config or JSON manifest")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="parallel workers")
        p.add_argument("--out", default=None, help="output directory (default: config output.dir or ./out)")
        p.add_argument("--full-scale", action="store_true", help="R = 5000 and B = 100")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.full_scale:
            cfg.setdefault("simulation", {})
            cfg["simulation"] = dict(cfg["simulation"] or {}, R=5000)
            cfg["bootstrap"] = dict(cfg.get("bootstrap") or {}, B=100)
        out = Path(args.out or _section(cfg, "output").get("dir", "out"))
        threads = max(1, int(args.threads))
        if args.command == "fit":
            return cmd_fit(cfg, out, threads)
        if args.command == "bootstrap":
            return cmd_fit(cfg, out, threads, force_bootstrap=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, threads)
        return cmd_breakdown(cfg, out, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CondispError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
