"""Replication studies: covariate design, response models, contamination, summaries.

Every random quantity in a study comes from an :class:`RngStream` keyed by
``(seed, purpose, replication[, estimator])``, so a study is a pure
function of its configuration, and adding an estimator never changes the
draws seen by the others.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import binom

from .bootstrap import bootstrap
from .core import Dataset, RngStream, as_generator
from .errors import CondispError, IncompatibleSchemeError
from .estimators import EstimatorTag, fit_estimator, fit_tabulated
from .models import BINOMIAL, GAUSSIAN, LOGISTIC, ModelSpec, sample

log = logging.getLogger(__name__)

LINEAR_TRUTH = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
LOGISTIC_TRUTH = np.array([0.0, 0.5, 0.5, 0.5])

UNIFORM = "uniform"
LOCALIZED = "localized"
BINOMIAL_MIXTURE = "binomial"


def generate_covariates(n: int, rng) -> np.ndarray:
    """Correlated design: two continuous columns and one binary column.

    Uniform(-1, 1) entries are mixed by ``sqrt(8)/3 * (I + 0.25 offdiag)``
    and the third column is replaced by its indicator of being positive.
    """
    if n < 1:
        raise ValueError("n must be positive")
    gen = as_generator(rng)
    u = gen.uniform(-1.0, 1.0, size=(n, 3))
    mix = np.full((3, 3), 0.25)
    np.fill_diagonal(mix, 1.0)
    x = u @ (math.sqrt(8.0) / 3.0 * mix)
    x[:, 2] = (x[:, 2] > 0).astype(float)
    return x


def model_for(name: str, trials: int = 8) -> ModelSpec:
    name = name.lower()
    if name in ("linear", GAUSSIAN):
        return ModelSpec.gaussian()
    if name == LOGISTIC:
        return ModelSpec.logistic()
    if name == BINOMIAL:
        return ModelSpec.binomial(trials)
    raise ValueError(f"unknown model {name!r}")


def default_truth(model: ModelSpec) -> np.ndarray:
    return LINEAR_TRUTH.copy() if model.family == GAUSSIAN else LOGISTIC_TRUTH.copy()


def simulate_response(model: ModelSpec, theta, covariates, rng) -> np.ndarray:
    return sample(model, theta, covariates, rng)


def to_dataset(covariates: np.ndarray, y, model: ModelSpec) -> Dataset:
    """Wrap the three-column design (last column discrete) with its responses."""
    x = np.asarray(covariates, dtype=float)
    names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
    if model.discrete:
        return Dataset(y_cont=None, x_cont=x[:, :2], x_disc=x[:, 2], y_disc=np.asarray(y, dtype=float), x_names=names)
    return Dataset(y_cont=np.asarray(y, dtype=float), x_cont=x[:, :2], x_disc=x[:, 2], x_names=names)


@dataclass(frozen=True)
class ContaminationScheme:
    """Where and how outliers enter.

    ``mode`` is ``"uniform"`` (scenario 1: ``k`` rows chosen at random, then
    frozen for the study), ``"localized"`` (scenario 2: the ``k`` rows whose
    first covariate is nearest ``location``) or ``"binomial"`` (an
    ``alpha``-mixture with a point mass at the top outcome, placed on every
    row when ``placement == "uniform"`` or on the single row nearest
    ``location`` when ``placement == "localized"``).  For the linear model
    the chosen errors are set to ``z``.
    """

    mode: str = UNIFORM
    k: int = 0
    z: float = 0.0
    alpha: float = 0.0
    placement: str = UNIFORM
    location: float = -0.5

    def __post_init__(self):
        if self.mode not in (UNIFORM, LOCALIZED, BINOMIAL_MIXTURE):
            raise IncompatibleSchemeError(f"unknown contamination mode {self.mode!r}")
        if self.k < 0:
            raise IncompatibleSchemeError("k must be non-negative")
        if not 0.0 <= self.alpha < 1.0:
            raise IncompatibleSchemeError("alpha must lie in [0, 1)")

    @property
    def clean(self) -> bool:
        if self.mode == BINOMIAL_MIXTURE:
            return self.alpha == 0.0
        return self.k == 0

    def fixed_indices(self, n: int, rng) -> np.ndarray | None:
        """Scenario-1 rows, drawn once per study (uniform without replacement)."""
        if self.mode != UNIFORM or self.k == 0:
            return None
        if self.k >= n:
            raise IncompatibleSchemeError("k must be smaller than n")
        return np.sort(as_generator(rng).choice(n, size=self.k, replace=False))


def nearest_rows(covariates, k: int, location: float = -0.5) -> np.ndarray:
    """Indices of the ``k`` rows whose first covariate is closest to ``location`` (stable order)."""
    d = np.abs(np.asarray(covariates, dtype=float)[:, 0] - location)
    return np.sort(np.argsort(d, kind="stable")[:k])


def apply_contamination(responses, covariates, scheme: ContaminationScheme, rng=None, *,
                        model: ModelSpec | None = None, theta=None, indices=None):
    """Contaminate continuous responses; returns ``(responses, outlier_indices)``.

    Chosen rows get response ``mean + z`` (their error replaced by ``z``),
    where ``mean`` is the model's conditional mean at ``theta``.  Binomial
    mixtures act on distributions, see :func:`contaminated_pmf`.
    """
    y = np.array(responses, dtype=float, copy=True)
    if scheme.mode == BINOMIAL_MIXTURE:
        raise IncompatibleSchemeError("binomial mixtures contaminate distributions; use contaminated_pmf")
    if model is not None and model.discrete:
        raise IncompatibleSchemeError("outlier errors need a continuous response")
    if scheme.clean:
        return y, np.zeros(0, dtype=np.intp)
    n = y.shape[0]
    if scheme.k >= n:
        raise IncompatibleSchemeError("k must be smaller than n")
    if scheme.mode == LOCALIZED:
        idx = nearest_rows(covariates, scheme.k, scheme.location)
    elif indices is not None:
        idx = np.asarray(indices, dtype=np.intp)
    else:
        idx = scheme.fixed_indices(n, rng)
    model = model or ModelSpec.gaussian()
    theta = LINEAR_TRUTH if theta is None else np.asarray(theta, dtype=float)
    y[idx] = model.mean(np.asarray(covariates)[idx], theta) + scheme.z
    return y, idx


def binomial_pmf(model: ModelSpec, theta, covariates) -> np.ndarray:
    """Exact pmf table of the binomial model, shape ``(n, trials + 1)``."""
    p = model.mean(covariates, theta) / model.trials
    return binom.pmf(model.support[None, :], model.trials, p[:, None])


def contaminated_pmf(model: ModelSpec, theta, covariates, scheme: ContaminationScheme) -> np.ndarray:
    """``(1 - alpha) Binomial + alpha * delta_top`` on the rows selected by the scheme."""
    table = binomial_pmf(model, theta, covariates)
    if scheme.alpha == 0.0:
        return table
    rows = np.arange(table.shape[0]) if scheme.placement == UNIFORM else nearest_rows(covariates, 1, scheme.location)
    table[rows] *= 1.0 - scheme.alpha
    table[rows, -1] += scheme.alpha
    return table


@dataclass
class StudyConfig:
    """Settings of a replication study (all defaults are desk-scale)."""

    model: str = "linear"
    n: int = 31
    R: int = 100
    estimators: tuple = ("Lik", "NED")
    seed: int = 1
    B: int = 0
    truth: tuple | None = None
    contamination: ContaminationScheme = field(default_factory=ContaminationScheme)
    grid: tuple | None = None
    mc_points: int = 101
    aggregation: str = "average"
    trials: int = 8
    exact: bool = True
    n_jobs: int = 1

    def spec(self) -> ModelSpec:
        return model_for(self.model, self.trials)

    def theta_true(self) -> np.ndarray:
        return np.asarray(self.truth, dtype=float) if self.truth is not None else default_truth(self.spec())

    def echo(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        d["truth"] = self.theta_true().tolist()
        return d


def param_names(model: ModelSpec, p: int = 3) -> tuple[str, ...]:
    names = tuple(f"beta{j}" for j in range(p + 1))
    return names + (("log_sigma",) if model.family == GAUSSIAN else ())


@dataclass
class EstimatorSummary:
    estimator: str
    params: tuple
    estimates: np.ndarray
    seconds: np.ndarray
    failures: int = 0
    corrected: np.ndarray | None = None
    se: np.ndarray | None = None
    covered: np.ndarray | None = None

    @property
    def mean(self) -> np.ndarray:
        return self.estimates.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.estimates.std(axis=0, ddof=1) if self.estimates.shape[0] > 1 else np.zeros(len(self.params))

    @property
    def corrected_mean(self):
        return None if self.corrected is None else self.corrected.mean(axis=0)

    @property
    def corrected_sd(self):
        if self.corrected is None:
            return None
        return self.corrected.std(axis=0, ddof=1) if self.corrected.shape[0] > 1 else np.zeros(len(self.params))

    @property
    def coverage(self):
        return None if self.covered is None else self.covered.mean(axis=0)

    @property
    def mean_seconds(self) -> float:
        return float(self.seconds.mean()) if self.seconds.size else float("nan")


@dataclass
class StudySummary:
    config: StudyConfig
    R: int
    rows: dict

    def __getitem__(self, tag: str) -> EstimatorSummary:
        return self.rows[tag]

    def to_records(self) -> list[dict]:
        out = []
        for tag, s in self.rows.items():
            for j, name in enumerate(s.params):
                rec = {"estimator": tag, "parameter": name, "mean": s.mean[j], "sd": s.sd[j],
                       "time": s.mean_seconds, "failures": s.failures}
                if s.corrected is not None:
                    rec.update(corrected_mean=s.corrected_mean[j], corrected_sd=s.corrected_sd[j],
                               coverage=s.coverage[j])
                out.append(rec)
        return out


def fmt(x) -> str:
    """Six significant digits, the fixed format of every numeric output."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.6g}"


def to_csv(records: list[dict]) -> str:
    if not records:
        return ""
    keys = list(records[0].keys())
    for r in records[1:]:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in records:
        w.writerow([fmt(r[k]) if isinstance(r.get(k), (float, int, np.floating, np.integer)) else r.get(k, "")
                    for k in keys])
    return buf.getvalue()


def to_markdown(summary: StudySummary) -> str:
    """Aligned table, one row per estimator: ``estimate sd [cov]`` per parameter and mean time."""
    rows = list(summary.rows.values())
    if not rows:
        return ""
    params = rows[0].params
    order = ([params.index("log_sigma")] if "log_sigma" in params else []) + [
        j for j, p in enumerate(params) if p != "log_sigma"
    ]
    boot = rows[0].corrected is not None
    header = [""]
    for j in order:
        header += [params[j] + ("^c" if boot else ""), "sd"] + (["cov"] if boot else [])
    header.append("time")
    body = []
    for s in rows:
        line = [s.estimator]
        mean = s.corrected_mean if boot else s.mean
        sd = s.corrected_sd if boot else s.sd
        for j in order:
            line += [f"{mean[j]:.2f}", f"{sd[j]:.2f}"] + ([f"{s.coverage[j]:.2f}"] if boot else [])
        line.append(fmt(s.mean_seconds))
        body.append(line)
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]

    def render(r):
        return "| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |"

    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([render(header), sep] + [render(r) for r in body]) + "\n"


def _fit_one(tag, ds, model, cfg: StudyConfig, stream: RngStream, truth):
    t0 = time.perf_counter()
    grid = None if cfg.grid is None else np.asarray(cfg.grid, dtype=float)
    fit = fit_estimator(tag, ds, model, grid=grid, mc_points=cfg.mc_points, aggregation=cfg.aggregation,
                        rng=stream.spawn("mc"))
    if not np.all(np.isfinite(fit.theta)):
        raise CondispError("non-finite estimate")
    out = {"theta": fit.theta}
    if cfg.B > 0:
        bres = bootstrap(fit, ds, model, cfg.B, stream.spawn("boot"), mc_points=cfg.mc_points,
                         aggregation=cfg.aggregation)
        out.update(corrected=bres.corrected, se=bres.se, covered=bres.covers(truth))
    out["seconds"] = time.perf_counter() - t0
    return out


def run_replication(cfg: StudyConfig, r: int, indices=None) -> dict:
    """One replication: fresh covariates and responses, every estimator fitted."""
    model = cfg.spec()
    truth = cfg.theta_true()
    base = RngStream(cfg.seed, ("replication", r))
    x = generate_covariates(cfg.n, base.spawn("covariates"))
    results = {}
    scheme = cfg.contamination
    if model.family == BINOMIAL and cfg.exact:
        table = contaminated_pmf(model, truth, x, scheme)
        for tag in cfg.estimators:
            t0 = time.perf_counter()
            try:
                fit = fit_tabulated(tag, x, table, model)
                results[tag] = {"theta": fit.theta, "seconds": time.perf_counter() - t0}
            except (CondispError, np.linalg.LinAlgError, ValueError) as exc:
                log.info("replication %d, %s failed: %s", r, tag, exc)
                results[tag] = None
        return results
    if model.family == BINOMIAL:
        table = contaminated_pmf(model, truth, x, scheme)
        gen = base.spawn("responses").generator
        cum = np.cumsum(table, axis=1)
        y = np.array([np.searchsorted(cum[i], gen.random(), side="right") for i in range(cfg.n)], dtype=float)
        y = np.minimum(y, model.trials)
    else:
        y = simulate_response(model, truth, x, base.spawn("responses"))
        if not scheme.clean:
            y, _ = apply_contamination(y, x, scheme, model=model, theta=truth, indices=indices)
    ds = to_dataset(x, y, model)
    for tag in cfg.estimators:
        try:
            results[tag] = _fit_one(tag, ds, model, cfg, base.spawn(tag), truth)
        except (CondispError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            log.info("replication %d, %s failed: %s", r, tag, exc)
            results[tag] = None
    return results


def run_study(cfg: StudyConfig) -> StudySummary:
    """Run ``R`` replications and aggregate mean, sd, coverage and time per estimator."""
    for tag in cfg.estimators:
        EstimatorTag.parse(tag)
    model = cfg.spec()
    indices = None
    if cfg.contamination.mode == UNIFORM and not cfg.contamination.clean:
        indices = cfg.contamination.fixed_indices(cfg.n, RngStream(cfg.seed, "outlier-indices"))
    if cfg.n_jobs == 1:
        reps = [run_replication(cfg, r, indices) for r in range(cfg.R)]
    else:
        reps = Parallel(n_jobs=cfg.n_jobs)(delayed(run_replication)(cfg, r, indices) for r in range(cfg.R))
    names = param_names(model)
    rows = {}
    for tag in cfg.estimators:
        ok = [rep[tag] for rep in reps if rep.get(tag) is not None]
        failures = len(reps) - len(ok)
        p = len(names)
        est = np.array([o["theta"] for o in ok]).reshape(-1, p)
        secs = np.array([o["seconds"] for o in ok])
        s = EstimatorSummary(tag, names, est, secs, failures)
        if cfg.B > 0 and ok:
            s.corrected = np.array([o["corrected"] for o in ok]).reshape(-1, p)
            s.se = np.array([o["se"] for o in ok]).reshape(-1, p)
            s.covered = np.array([o["covered"] for o in ok]).reshape(-1, p)
        rows[tag] = s
    return StudySummary(cfg, cfg.R, rows)


def breakdown_curve(cfg: StudyConfig, z_grid, scheme: ContaminationScheme | None = None) -> list[dict]:
    """Mean estimates as the outlier value moves along ``z_grid`` (long format).

    ``z = 0`` is run as a clean study.  Every grid point reuses the same
    seed, so the curves share covariates and errors across ``z``.
    """
    scheme = scheme or cfg.contamination
    out = []
    for z in z_grid:
        sch = replace(scheme, z=float(z)) if z != 0 else replace(scheme, k=0, z=0.0)
        summary = run_study(replace(cfg, contamination=sch))
        for tag, s in summary.rows.items():
            for j, name in enumerate(s.params):
                out.append({"z": float(z), "estimator": tag, "parameter": name, "mean": s.mean[j]})
    return out


def alpha_curve(cfg: StudyConfig, alphas, placement: str = UNIFORM) -> list[dict]:
    """Binomial analogue of :func:`breakdown_curve` over contamination fractions."""
    out = []
    for a in alphas:
        sch = ContaminationScheme(BINOMIAL_MIXTURE, alpha=float(a), placement=placement)
        summary = run_study(replace(cfg, contamination=sch))
        for tag, s in summary.rows.items():
            for j, name in enumerate(s.params):
                out.append({"alpha": float(a), "estimator": tag, "parameter": name, "mean": s.mean[j]})
    return out
