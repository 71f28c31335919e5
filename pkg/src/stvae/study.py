"""Simulation-study and prediction-protocol runners.

Every random quantity in a study is drawn from a seed derived from the
master seed plus a fixed tuple of tags (role, generator, visit count, size,
series index), so any single CSV row can be regenerated on its own.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import car, forecast, generators
from .fields import CLASS_LABELS, PAD_VALUE, Bounds, Dataset, Series, default_mask, pad_and_normalize, split_patients
from .metrics import empirical_correlations, mae, mean_abs_offdiagonal, residual_standard_error
from .vae import MmdConfig, TrainConfig, VaeModel, build_model, decode_values, encode_values, train

log = logging.getLogger(__name__)

WORKERS_ENV = "STVAE_WORKERS"
SIM_COLUMNS = ["generator", "n_visits", "method", "series_id", "dataset_seed", "rse", "mae", "status"]
SIM_SUMMARY_COLUMNS = ["generator", "n_visits", "method", "n_ok", "n_failed", "median_rse", "median_mae"]
PRED_COLUMNS = ["series_id", "label", "base", "horizon", "method", "n_visits", "mae", "status"]
GRID_COLUMNS = ["scope", "method", "base", "horizon", "n", "mae", "status"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# seeds and workers


def _tag(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(seed: int, *keys) -> int:
    """Stable 32-bit seed for (master seed, tags); tags may be ints or strings."""
    ss = np.random.SeedSequence([int(seed)] + [_tag(k) for k in keys])
    return int(ss.generate_state(1, np.uint32)[0])


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, items: list, workers: int) -> list:
    """Ordered map; results do not depend on the worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class VaeSettings:
    latent_dim: int = 8
    epochs: int = 30
    batch_size: int = 100
    learning_rate: float = 1e-3
    mmd_weight: float = 10.0
    bandwidth: float | None = None
    bounds: str = "quantile"  # "quantile" or "fixed"
    bounds_quantile: float = 0.005
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.bounds not in ("quantile", "fixed"):
            raise ConfigError(f"bounds policy must be 'quantile' or 'fixed', got {self.bounds!r}")
        if not 0 <= self.bounds_quantile < 0.5:
            raise ConfigError("bounds_quantile must lie in [0, 0.5)")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.latent_dim < 1 or self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("latent_dim and epochs must be >= 1 and batch_size >= 2")


@dataclass
class McmcSettings:
    iterations: int = 2000
    burn_in: int = 500

    def config(self, seed: int) -> car.McmcConfig:
        return car.McmcConfig(iterations=self.iterations, burn_in=self.burn_in, seed=seed)


@dataclass
class SeedVaeSettings:
    """Decoder used by the vae generator: trained on ST-generated series."""

    n_series: int = 500
    n_visits: int = 8


@dataclass
class PredictionSettings:
    generator: str = "vae"
    n_series: int = 500
    min_visits: int = 4
    max_visits: int = 13
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    bases: tuple[int, ...] = (3, 5, 8)
    horizons: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        self.split = tuple(float(p) for p in self.split)
        self.bases = tuple(int(b) for b in self.bases)
        self.horizons = tuple(int(h) for h in self.horizons)
        if self.generator not in generators.KINDS:
            raise ConfigError(f"unknown generator {self.generator!r}")
        if not 2 <= self.min_visits <= self.max_visits:
            raise ConfigError("need 2 <= min_visits <= max_visits")
        if min(self.bases) < 2 or min(self.horizons) < 1:
            raise ConfigError("bases must be >= 2 and horizons >= 1")


@dataclass
class StudyConfig:
    generators: tuple[str, ...] = ("st", "pw", "vae")
    n_visits: tuple[int, ...] = (3, 8)
    n_test: int = 500
    train_sizes: tuple[int, ...] = (500, 1000, 5000, 10000)
    horizon: int = 3
    methods: tuple[str, ...] = ("st", "pw", "vae")
    seed: int = 0
    vae: VaeSettings = field(default_factory=VaeSettings)
    mcmc: McmcSettings = field(default_factory=McmcSettings)
    seed_vae: SeedVaeSettings = field(default_factory=SeedVaeSettings)
    prediction: PredictionSettings = field(default_factory=PredictionSettings)

    def __post_init__(self):
        self.generators = tuple(self.generators)
        self.n_visits = tuple(int(t) for t in self.n_visits)
        self.train_sizes = tuple(int(n) for n in self.train_sizes)
        self.methods = tuple(self.methods)
        bad = set(self.generators) - set(generators.KINDS)
        if bad:
            raise ConfigError(f"unknown generators: {sorted(bad)}")
        bad = set(self.methods) - {"st", "pw", "vae"}
        if bad:
            raise ConfigError(f"unknown methods: {sorted(bad)}")
        if self.n_test < 1 or self.horizon < 1 or any(n < 2 for n in self.train_sizes):
            raise ConfigError("n_test and horizon must be positive and train sizes >= 2")
        if any(t < 3 for t in self.n_visits):
            raise ConfigError("visit counts must be >= 3 so every method has residual degrees of freedom")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"vae": VaeSettings, "mcmc": McmcSettings, "seed_vae": SeedVaeSettings, "prediction": PredictionSettings}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> StudyConfig:
    data = dict(data)
    sections = {k: _build(c, data.pop(k), k) for k, c in _SECTIONS.items() if k in data}
    cfg = _build(StudyConfig, data, "study config")
    for k, v in sections.items():
        setattr(cfg, k, v)
    return cfg


def load_config(path) -> StudyConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(data)


def method_label(method: str, train_size: int | None = None) -> str:
    if method != "vae":
        return method.upper()
    if train_size % 1000 == 0:
        return f"VAE-{train_size // 1000}k"
    return f"VAE-{train_size}"


# ---------------------------------------------------------------------------
# VAE fitting


def fit_bounds(values: np.ndarray, settings: VaeSettings) -> Bounds:
    v = np.asarray(values, dtype=np.float64)
    if settings.bounds == "fixed":
        return Bounds(PAD_VALUE, float(v.max()))
    q = settings.bounds_quantile
    lo, hi = np.quantile(v, [q, 1.0 - q])
    if not hi > lo:
        raise ConfigError("training values are constant; normalisation bounds are degenerate")
    return Bounds(float(lo), float(hi))


def fit_vae(dataset: Dataset, settings: VaeSettings, seed: int) -> VaeModel:
    """Train a VAE on every visit of ``dataset``; series are split into train/validation."""
    p_val = settings.validation_fraction
    tr, va, _ = split_patients(dataset, (1.0 - p_val, p_val, 0.0), seed=derive_seed(seed, "split"))
    if len(tr) == 0 or len(va) == 0:
        # tiny datasets: fall back to a deterministic hold-out of the last series
        tr, va = dataset.subset(dataset.series[:-1]), dataset.subset(dataset.series[-1:])
    train_values = tr.stacked_values()
    bounds = fit_bounds(train_values, settings)
    clip = settings.bounds == "quantile"
    xt = pad_and_normalize(train_values, dataset.mask, bounds, clip=True)
    xv = pad_and_normalize(va.stacked_values(), dataset.mask, bounds, clip=True)
    if not clip and np.any(va.stacked_values() > bounds.upper):
        log.info("validation values above the training maximum were clipped")
    model = build_model(settings.latent_dim, seed=derive_seed(seed, "init"), bounds=bounds, mask=dataset.mask)
    tc = TrainConfig(settings.epochs, settings.batch_size, settings.learning_rate, derive_seed(seed, "train"))
    mc = MmdConfig(bandwidth=settings.bandwidth, weight=settings.mmd_weight)
    model, _ = train(model, xt, xv, tc, mc)
    return model


def seed_vae(config: StudyConfig) -> tuple[VaeModel, np.ndarray]:
    """Decoder and (healthy, suspect, glaucoma) latent means for the vae generator."""
    s = config.seed_vae
    spec = generators.GeneratorSpec("st", s.n_visits, s.n_series, seed=derive_seed(config.seed, "seed-vae-data"))
    data = generators.generate_dataset(spec)
    model = fit_vae(data, config.vae, derive_seed(config.seed, "seed-vae"))
    means = generators.class_means_by_severity(model, data.stacked_values())
    return model, means


# ---------------------------------------------------------------------------
# per-series evaluation


@dataclass
class _Job:
    series: Series
    n_fit: int
    steps: tuple[int, ...]  # visits ahead of the last fitted one
    methods: tuple  # ("pw", None), ("st", None), ("vae", size)
    models: dict
    mcmc: McmcSettings
    mcmc_seed: int
    graph: car.SpatialGraph | None


def _evaluate(job: _Job) -> list[dict]:
    """RSE of the fit and MAE at every requested step, per method."""
    s = job.series
    head = s.head(job.n_fit)
    targets = [job.n_fit - 1 + h for h in job.steps]
    times = [s.times[i] for i in targets]
    out = []
    for method, size in job.methods:
        label = method_label(method, size)
        try:
            if method == "pw":
                res = forecast.pw_fit_predict(head, times)
                pred = res.predictions
                rse = residual_standard_error(res.residuals, forecast.pw_dof(head.values.shape[1]))
            elif method == "vae":
                model = job.models[size]
                fit = forecast.latent_trajectory_fit(model, head)
                pred = forecast.two_stage_predict(model, head, times, fit)
                rse = residual_standard_error(forecast.two_stage_residuals(model, head, fit), forecast.two_stage_dof(model.latent_dim))
            else:
                post = car.gibbs_fit(head.values, job.graph, job.mcmc.config(job.mcmc_seed))
                pred = car.forecast_st(post, list(job.steps), seed=job.mcmc_seed).mean
                rse = car.st_residual_se(post, head.values)
            maes = [mae(pred[k], s.values[i]) for k, i in enumerate(targets)]
            out.append({"method": label, "rse": rse, "mae": maes, "status": "ok"})
        except Exception as exc:  # a failed fit is recorded for its cell; the run goes on
            msg = f"failed:{type(exc).__name__}"
            log.warning("series %s method %s: %s", s.series_id, label, exc)
            out.append({"method": label, "rse": math.nan, "mae": [math.nan] * len(targets), "status": msg})
    return out


def _num(v: float) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# simulation study


@dataclass
class SimulationReport:
    results_csv: str
    summary_csv: str
    rows: list[dict]
    manifest: dict
    figures: dict = field(default_factory=dict)  # name -> SVG text

    def medians(self, generator: str, n_visits: int, metric: str) -> dict[str, float]:
        vals: dict[str, list] = {}
        for r in self.rows:
            if r["generator"] == generator and r["n_visits"] == n_visits and r["status"] == "ok":
                vals.setdefault(r["method"], []).append(r[metric])
        return {k: float(np.median(v)) for k, v in vals.items()}


def _method_plan(config: StudyConfig) -> list[tuple]:
    plan = []
    for m in ("st", "pw"):
        if m in config.methods:
            plan.append((m, None))
    if "vae" in config.methods:
        plan.extend(("vae", n) for n in config.train_sizes)
    return plan


def run_simulation_study(config: StudyConfig, workers: int | None = None, render: bool = True) -> SimulationReport:
    """Six-method comparison per (generator, visit count) on simulated test series.

    Test series carry ``T + horizon`` visits; methods see the first T and are
    scored on RSE of their fit and MAE at visit ``T + horizon``.
    """
    workers = workers or default_workers()
    plan = _method_plan(config)
    base_model = means = None
    if "vae" in config.generators:
        base_model, means = seed_vae(config)
    graph = car.SpatialGraph.from_mask(default_mask())
    rows: list[dict] = []
    seeds: dict = {}
    for kind in config.generators:
        for t in config.n_visits:
            total = t + config.horizon
            extra = {"model": base_model, "class_means": means} if kind == "vae" else {}
            test_seed = derive_seed(config.seed, "test", kind, t)
            seeds[f"{kind}/T{t}/test"] = test_seed
            test = generators.generate_dataset(generators.GeneratorSpec(kind, total, config.n_test, seed=test_seed, **extra))
            models = {}
            if "vae" in config.methods:
                for size in config.train_sizes:
                    tseed = derive_seed(config.seed, "train", kind, t, size)
                    seeds[f"{kind}/T{t}/train{size}"] = tseed
                    spec = generators.GeneratorSpec(kind, total, size, seed=tseed, id_prefix="train-", **extra)
                    models[size] = fit_vae(generators.generate_dataset(spec), config.vae, derive_seed(tseed, "vae"))
            jobs = [
                _Job(s, t, (config.horizon,), tuple(plan), models, config.mcmc, derive_seed(config.seed, "mcmc", kind, t, i), graph)
                for i, s in enumerate(test.series)
            ]
            for s, res in zip(test.series, _map(_evaluate, jobs, workers)):
                for r in res:
                    rows.append(
                        {"generator": kind, "n_visits": t, "method": r["method"], "series_id": s.series_id,
                         "dataset_seed": test_seed, "rse": r["rse"], "mae": r["mae"][0], "status": r["status"]}
                    )
    results_csv = _csv(
        [[r["generator"], r["n_visits"], r["method"], r["series_id"], r["dataset_seed"], _num(r["rse"]), _num(r["mae"]), r["status"]] for r in rows],
        SIM_COLUMNS,
    )
    labels = [method_label(m, n) for m, n in plan]
    summary = []
    for kind in config.generators:
        for t in config.n_visits:
            for lab in labels:
                cell = [r for r in rows if r["generator"] == kind and r["n_visits"] == t and r["method"] == lab]
                ok = [r for r in cell if r["status"] == "ok"]
                med = lambda key: float(np.median([r[key] for r in ok])) if ok else math.nan
                summary.append([kind, t, lab, len(ok), len(cell) - len(ok), _num(med("rse")), _num(med("mae"))])
    manifest = {"kind": "simulation-study", "config": config.to_dict(), "derived_seeds": seeds, "methods": labels}
    report = SimulationReport(results_csv, _csv(summary, SIM_SUMMARY_COLUMNS), rows, manifest)
    if render:
        from . import plotting

        for metric in ("rse", "mae"):
            data = {
                (kind, t): {lab: [r[metric] for r in rows if r["generator"] == kind and r["n_visits"] == t and r["method"] == lab and r["status"] == "ok"] for lab in labels}
                for kind in config.generators
                for t in config.n_visits
            }
            ylabel = "residual standard error" if metric == "rse" else f"MAE at horizon {config.horizon}"
            report.figures[f"sim_{metric}.svg"] = plotting.boxplot_grid(
                data, list(config.generators), list(config.n_visits), labels, ylabel=ylabel,
                row_title="generator {}", col_title="T = {}",
            )
    return report


# ---------------------------------------------------------------------------
# prediction protocol


def eligible(n_visits: int, base: int, horizon: int) -> bool:
    return n_visits >= base + horizon


def prediction_dataset(config: StudyConfig, model: VaeModel | None = None, means: np.ndarray | None = None) -> Dataset:
    """Series of varying length: each is generated long and cut to a random visit count."""
    p = config.prediction
    extra = {"model": model, "class_means": means} if p.generator == "vae" else {}
    seed = derive_seed(config.seed, "prediction-data")
    full = generators.generate_dataset(generators.GeneratorSpec(p.generator, p.max_visits, p.n_series, seed=seed, **extra))
    cut = []
    for i, s in enumerate(full.series):
        rng = generators.series_rng(derive_seed(seed, "length"), i)
        cut.append(s.head(int(rng.integers(p.min_visits, p.max_visits + 1))))
    return Dataset(cut, full.mask, None, dict(full.provenance, visit_range=[p.min_visits, p.max_visits]))


@dataclass
class PredictionReport:
    records_csv: str
    grid_csv: str
    records: list[dict]
    grid: list[dict]
    manifest: dict
    figures: dict = field(default_factory=dict)

    def cell(self, method: str, base: int, horizon: int, scope: str = "overall") -> dict:
        for g in self.grid:
            if (g["scope"], g["method"], g["base"], g["horizon"]) == (scope, method, base, horizon):
                return g
        raise KeyError((scope, method, base, horizon))


def run_prediction_study(
    config: StudyConfig,
    test: Dataset | None = None,
    model: VaeModel | None = None,
    workers: int | None = None,
    render: bool = True,
) -> PredictionReport:
    """MAE of predicting visit b + j from the first b visits, for every (b, j).

    With no ``test`` set, a dataset is simulated, split 80/10/10 by series, a
    VAE is trained on the training and validation series and the test series
    are scored. A supplied ``model`` is used as-is.
    """
    workers = workers or default_workers()
    p = config.prediction
    seeds: dict = {}
    if test is None:
        gen_model = means = None
        if p.generator == "vae":
            gen_model, means = seed_vae(config)
        data = prediction_dataset(config, gen_model, means)
        seeds["split"] = derive_seed(config.seed, "prediction-split")
        tr, va, test = split_patients(data, p.split, seed=seeds["split"])
        if model is None and "vae" in config.methods:
            model = fit_vae(data.subset(tr.series + va.series), config.vae, derive_seed(config.seed, "prediction-vae"))
    if "vae" in config.methods and model is None:
        raise ConfigError("the vae method needs a trained model")
    if any(s.n_visits < min(p.bases) + 1 for s in test.series):
        log.info("some test series are too short for any cell and are ignored")
    graph = car.SpatialGraph.from_mask(test.mask)
    size = len(test)  # only used for the label of the single model
    plan = [(m, None) for m in ("st", "pw") if m in config.methods]
    if "vae" in config.methods:
        plan.append(("vae", size))
    labels = {method_label(m, n): ("VAE" if m == "vae" else m.upper()) for m, n in plan}

    jobs, keys = [], []
    for i, s in enumerate(test.series):
        for b in p.bases:
            steps = tuple(j for j in p.horizons if eligible(s.n_visits, b, j))
            if not steps:
                continue
            seed = derive_seed(config.seed, "prediction-mcmc", i, b)
            jobs.append(_Job(s, b, steps, tuple(plan), {size: model}, config.mcmc, seed, graph))
            keys.append((s, b, steps))
    records = []
    for (s, b, steps), res in zip(keys, _map(_evaluate, jobs, workers)):
        for r in res:
            for j, err in zip(steps, r["mae"]):
                records.append({"series_id": s.series_id, "label": s.label or "", "base": b, "horizon": j,
                                "method": labels[r["method"]], "n_visits": s.n_visits, "mae": err, "status": r["status"]})

    scopes = ["overall"] + [c for c in CLASS_LABELS if any(s.label == c for s in test.series)]
    grid = []
    for scope in scopes:
        for meth in labels.values():
            for b in p.bases:
                for j in p.horizons:
                    sel = [r for r in records if r["method"] == meth and r["base"] == b and r["horizon"] == j
                           and (scope == "overall" or r["label"] == scope)]
                    ok = [r["mae"] for r in sel if r["status"] == "ok"]
                    grid.append({"scope": scope, "method": meth, "base": b, "horizon": j, "n": len(ok),
                                 "mae": float(np.mean(ok)) if ok else math.nan, "status": "ok" if ok else "empty"})
    records_csv = _csv(
        [[r["series_id"], r["label"], r["base"], r["horizon"], r["method"], r["n_visits"], _num(r["mae"]), r["status"]] for r in records],
        PRED_COLUMNS,
    )
    grid_csv = _csv([[g["scope"], g["method"], g["base"], g["horizon"], g["n"], _num(g["mae"]), g["status"]] for g in grid], GRID_COLUMNS)
    manifest = {"kind": "prediction-study", "config": config.to_dict(), "derived_seeds": seeds,
                "n_test_series": len(test), "aggregation": "mean of per-series MAE", "abscissa": "visit times"}
    report = PredictionReport(records_csv, grid_csv, records, grid, manifest)
    if render:
        from . import plotting

        for scope in scopes:
            mats = {}
            for meth in labels.values():
                mats[meth] = np.array([[report.cell(meth, b, j, scope)["mae"] for j in p.horizons] for b in p.bases])
            report.figures[f"pred_grid_{scope}.svg"] = plotting.heatmap_row(
                mats, row_labels=[f"b={b}" for b in p.bases], col_labels=[f"+{j}" for j in p.horizons],
                title=f"MAE ({scope})",
            )
    return report


# ---------------------------------------------------------------------------
# smoothing diagnostic


@dataclass
class SmoothingSummary:
    raw: float  # mean |off-diagonal| spatial correlation, averaged over series
    decoded: float
    raw_example: np.ndarray
    decoded_example: np.ndarray

    @property
    def difference(self) -> float:
        return self.decoded - self.raw


def smoothing_diagnostic(model: VaeModel, dataset: Dataset) -> SmoothingSummary:
    """Compare spatial correlation of raw series with their encode-decode reconstruction."""
    raw, dec = [], []
    ex_raw = ex_dec = None
    for s in dataset.series:
        if s.n_visits < 3:
            continue
        recon = decode_values(model, encode_values(model, s.values))
        sr, _ = empirical_correlations(s.values)
        sd, _ = empirical_correlations(recon)
        raw.append(mean_abs_offdiagonal(sr))
        dec.append(mean_abs_offdiagonal(sd))
        if ex_raw is None:
            ex_raw, ex_dec = sr, sd
    if not raw:
        raise ValueError("smoothing diagnostic needs series with at least 3 visits")
    return SmoothingSummary(float(np.nanmean(raw)), float(np.nanmean(dec)), ex_raw, ex_dec)
