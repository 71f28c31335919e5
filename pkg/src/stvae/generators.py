"""Simulated longitudinal field datasets: CAR-AR, pointwise and decoder-based.

Every series is drawn from its own generator seeded by (master seed, index),
so a single series can be regenerated without the rest of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import car
from .fields import CLASS_LABELS, Dataset, Series, default_mask
from .vae import VaeModel, decode_values, encode_values

KINDS = ("st", "pw", "vae")


@dataclass
class GeneratorSpec:
    kind: str
    n_visits: int
    n_series: int
    seed: int = 0
    model: VaeModel | None = None
    class_means: np.ndarray | None = None  # (3, K): healthy, suspect, glaucoma
    mask: np.ndarray = field(default_factory=default_mask)
    id_prefix: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.n_series < 1:
            raise ValueError("n_series must be >= 1")
        if self.n_visits < 2:
            raise ValueError("generators need at least 2 visits")

    def provenance(self) -> dict:
        return {"generator": self.kind, "seed": self.seed, "n_visits": self.n_visits, "n_series": self.n_series}


def series_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def visit_times(n_visits: int) -> np.ndarray:
    return np.arange(n_visits, dtype=np.float64)


def sample_st_params(rng) -> car.CarParams:
    """beta ~ N(0,1); tau2, eta2 ~ LogNormal(0,1); rho, psi ~ N(0,1) truncated to (0,1)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    beta = rng.standard_normal()
    tau2 = rng.lognormal(0.0, 1.0)
    eta2 = rng.lognormal(0.0, 1.0)
    rho = car.truncated_normal(rng, 0.0, 1.0, 0.0, 1.0)
    psi = car.truncated_normal(rng, 0.0, 1.0, 0.0, 1.0)
    # keep strictly inside the open interval
    rho = min(max(rho, 1e-9), 1.0 - 1e-9)
    psi = min(max(psi, 1e-9), 1.0 - 1e-9)
    return car.CarParams(float(beta), float(tau2), float(eta2), float(rho), float(psi))


def _sid(spec: GeneratorSpec, i: int) -> str:
    return f"{spec.id_prefix}{spec.kind}-{i:06d}"


def st_series(spec: GeneratorSpec, i: int, graph: car.SpatialGraph | None = None) -> Series:
    rng = series_rng(spec.seed, i)
    params = sample_st_params(rng)
    graph = graph or car.SpatialGraph.from_mask(spec.mask)
    sim = car.simulate_car_st(params, graph, spec.n_visits, seed=rng)
    return Series(_sid(spec, i), visit_times(spec.n_visits), sim.x, truth=params.to_dict())


def pw_values(intercepts, slopes, variances, times, rng) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64)
    noise = rng.standard_normal((t.size, len(intercepts))) * np.sqrt(variances)
    return np.asarray(intercepts) + np.multiply.outer(t, slopes) + noise


def pw_series(spec: GeneratorSpec, i: int) -> Series:
    rng = series_rng(spec.seed, i)
    m = int(spec.mask.sum())
    a = rng.standard_normal(m)
    b = rng.standard_normal(m)
    v = rng.lognormal(0.0, 1.0, size=m)
    times = visit_times(spec.n_visits)
    x = pw_values(a, b, v, times, rng)
    return Series(_sid(spec, i), times, x, truth={"intercepts": a.tolist(), "slopes": b.tolist(), "variances": v.tolist()})


def latent_paths(class_mean, times, rng) -> tuple[np.ndarray, dict]:
    k = len(class_mean)
    intercept = np.asarray(class_mean) + rng.standard_normal(k)
    slope = rng.standard_normal(k)
    var = rng.lognormal(0.0, 1.0, size=k)
    t = np.asarray(times, dtype=np.float64)
    z = intercept + np.multiply.outer(t, slope) + rng.standard_normal((t.size, k)) * np.sqrt(var)
    return z, {"intercepts": intercept.tolist(), "slopes": slope.tolist(), "variances": var.tolist()}


def vae_series(spec: GeneratorSpec, i: int) -> Series:
    if spec.model is None or spec.class_means is None:
        raise ValueError("the vae generator needs a trained decoder and class-mean latent vectors")
    rng = series_rng(spec.seed, i)
    cls = int(rng.integers(len(CLASS_LABELS)))
    times = visit_times(spec.n_visits)
    z, truth = latent_paths(spec.class_means[cls], times, rng)
    x = decode_values(spec.model, z)
    return Series(_sid(spec, i), times, x, label=CLASS_LABELS[cls], truth=truth)


def generate_series(spec: GeneratorSpec, i: int, graph=None) -> Series:
    if spec.kind == "st":
        return st_series(spec, i, graph)
    if spec.kind == "pw":
        return pw_series(spec, i)
    return vae_series(spec, i)


def generate_dataset(spec: GeneratorSpec) -> Dataset:
    graph = car.SpatialGraph.from_mask(spec.mask) if spec.kind == "st" else None
    series = [generate_series(spec, i, graph) for i in range(spec.n_series)]
    return Dataset(series, spec.mask, None, spec.provenance())


def generate_st_dataset(spec: GeneratorSpec) -> Dataset:
    if spec.kind != "st":
        raise ValueError("spec.kind must be 'st'")
    return generate_dataset(spec)


def generate_pw_dataset(spec: GeneratorSpec) -> Dataset:
    if spec.kind != "pw":
        raise ValueError("spec.kind must be 'pw'")
    return generate_dataset(spec)


def generate_vae_dataset(spec: GeneratorSpec) -> Dataset:
    if spec.kind != "vae":
        raise ValueError("spec.kind must be 'vae'")
    return generate_dataset(spec)


def class_means_by_severity(model: VaeModel, values: np.ndarray) -> np.ndarray:
    """Mean latent code per severity tertile of mean field value.

    Rows are (healthy, suspect, glaucoma): the top third of fields by mean
    decibel value is "healthy", the bottom third "glaucoma".
    """
    values = np.asarray(values, dtype=np.float64)
    codes = encode_values(model, values)
    severity = values.mean(axis=1)
    lo, hi = np.quantile(severity, [1 / 3, 2 / 3])
    groups = [severity >= hi, (severity >= lo) & (severity < hi), severity < lo]
    return np.array([codes[g].mean(axis=0) for g in groups])
