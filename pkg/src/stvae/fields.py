"""Visual-field containers, padding/normalisation, splits and dataset files.

A field is stored two ways: as the 52 informative values in canonical mask
order (row-major over the 12x12 grid), and as the padded 12x12 grid the
autoencoder consumes. Values are total deviation in decibels externally and
in [0, 1] inside the network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

GRID = 12
N_LOCATIONS = 52
PAD_VALUE = -37.0
FORMAT_VERSION = 1
CLASS_LABELS = ("healthy", "suspect", "glaucoma")


class FormatError(ValueError):
    """Malformed dataset or model file."""


class MaskError(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# masks


def parse_mask(text: str) -> np.ndarray:
    rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    grid = np.array([[ch == "X" for ch in row] for row in rows], dtype=bool)
    return grid


def format_mask(mask: np.ndarray) -> list[str]:
    return ["".join("X" if v else "." for v in row) for row in mask]


def default_mask() -> np.ndarray:
    text = resources.files("stvae").joinpath("data/mask_24_2.txt").read_text()
    mask = parse_mask(text)
    validate_mask(mask)
    return mask


def validate_mask(mask: np.ndarray, n_informative: int = N_LOCATIONS) -> None:
    mask = np.asarray(mask)
    if mask.shape != (GRID, GRID):
        raise MaskError(f"mask must be {GRID}x{GRID}, got {mask.shape}")
    if int(mask.sum()) != n_informative:
        raise MaskError(f"mask must have exactly {n_informative} informative cells, got {int(mask.sum())}")


def mask_coords(mask: np.ndarray) -> np.ndarray:
    """(m, 2) row/column coordinates of informative cells in canonical order."""
    return np.argwhere(mask)


# ---------------------------------------------------------------------------
# padding and normalisation


@dataclass(frozen=True)
class Bounds:
    lower: float = PAD_VALUE
    upper: float = 0.0

    def __post_init__(self):
        if not self.upper > self.lower:
            raise ValueError(f"upper bound {self.upper} must exceed lower bound {self.lower}")


def to_grid(values: np.ndarray, mask: np.ndarray, fill: float = PAD_VALUE) -> np.ndarray:
    """Place (..., m) informative values into (..., 12, 12) grids."""
    values = np.asarray(values, dtype=np.float64)
    m = int(mask.sum())
    if values.shape[-1] != m:
        raise ShapeMismatch(f"expected {m} informative values, got {values.shape[-1]}")
    out = np.full(values.shape[:-1] + mask.shape, fill, dtype=np.float64)
    out[..., mask] = values
    return out


def from_grid(grids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.asarray(grids)[..., mask]


def pad_and_normalize(values, mask: np.ndarray, bounds: Bounds, clip: bool = False) -> np.ndarray:
    """Decibel values (..., 52) -> normalised (..., 12, 12) grids.

    Padded cells hold the image of -37, i.e. exactly 0. With ``clip`` false,
    values outside the bounds are rejected; with ``clip`` true they are
    clamped into [0, 1] (used when encoding data outside the training range).
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite values")
    if not clip:
        low = np.argwhere(values < bounds.lower)
        if low.size:
            raise ValueError(f"value below lower bound {bounds.lower} at location index {low[0][-1]}")
        high = np.argwhere(values > bounds.upper)
        if high.size:
            raise ValueError(f"value above upper bound {bounds.upper} at location index {high[0][-1]}")
    scaled = (values - bounds.lower) / (bounds.upper - bounds.lower)
    if clip:
        scaled = np.clip(scaled, 0.0, 1.0)
    return to_grid(scaled, mask, fill=0.0)


def denormalize(grids, mask: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Normalised (..., 12, 12) grids -> decibel values (..., 52)."""
    return from_grid(grids, mask) * (bounds.upper - bounds.lower) + bounds.lower


# ---------------------------------------------------------------------------
# series and datasets


@dataclass
class Series:
    series_id: str
    times: np.ndarray
    values: np.ndarray  # (T, m) decibels in canonical mask order
    label: str | None = None
    truth: dict | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.times.shape[0]:
            raise ShapeMismatch(
                f"series {self.series_id}: values {self.values.shape} do not match {self.times.shape[0]} visit times"
            )
        if self.times.size < 1:
            raise ValueError(f"series {self.series_id} has no visits")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"series {self.series_id}: visit times must be strictly increasing")

    @property
    def n_visits(self) -> int:
        return self.times.shape[0]

    def head(self, n: int) -> "Series":
        return Series(self.series_id, self.times[:n], self.values[:n], self.label, self.truth)

    def __eq__(self, other):
        if not isinstance(other, Series):
            return NotImplemented
        return (
            self.series_id == other.series_id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
            and self.label == other.label
            and self.truth == other.truth
        )


@dataclass
class Dataset:
    series: list[Series]
    mask: np.ndarray = field(default_factory=default_mask)
    bounds: Bounds | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.series_id for s in self.series]
        if len(set(ids)) != len(ids):
            raise ValueError("series ids must be unique")
        m = int(self.mask.sum())
        for s in self.series:
            if s.values.shape[1] != m:
                raise ShapeMismatch(f"series {s.series_id} has {s.values.shape[1]} locations, mask has {m}")

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.series == other.series
            and np.array_equal(self.mask, other.mask)
            and self.bounds == other.bounds
            and self.provenance == other.provenance
        )

    def subset(self, series: Sequence[Series]) -> "Dataset":
        return Dataset(list(series), self.mask, self.bounds, dict(self.provenance))

    def stacked_values(self) -> np.ndarray:
        """All visits of all series as one (N, m) array."""
        if not self.series:
            return np.empty((0, int(self.mask.sum())))
        return np.concatenate([s.values for s in self.series], axis=0)


def split_patients(dataset: Dataset, probabilities=(0.8, 0.1, 0.1), seed: int = 0):
    """Assign each series wholly to train/validation/test by a seeded categorical draw."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.shape != (3,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-12):
        raise ValueError(f"split probabilities must be three non-negative numbers summing to 1, got {probabilities}")
    rng = np.random.default_rng(seed)
    which = rng.choice(3, size=len(dataset), p=p)
    parts = [[s for s, w in zip(dataset.series, which) if w == k] for k in range(3)]
    return tuple(dataset.subset(part) for part in parts)


# ---------------------------------------------------------------------------
# dataset files: one JSON header line, then one JSON record per visit


def _header(dataset: Dataset) -> dict:
    meta = {}
    for s in dataset.series:
        entry = {}
        if s.label is not None:
            entry["label"] = s.label
        if s.truth is not None:
            entry["truth"] = s.truth
        if entry:
            meta[s.series_id] = entry
    return {
        "format_version": FORMAT_VERSION,
        "mask": format_mask(dataset.mask),
        "bounds": None if dataset.bounds is None else [dataset.bounds.lower, dataset.bounds.upper],
        "provenance": dataset.provenance,
        "series_meta": meta,
    }


def dumps_dataset(dataset: Dataset) -> str:
    lines = [json.dumps(_header(dataset), sort_keys=True)]
    for s in dataset.series:
        for k in range(s.n_visits):
            rec = {
                "series_id": s.series_id,
                "visit_index": k,
                "time": float(s.times[k]),
                "values": [float(v) for v in s.values[k]],
            }
            lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(dataset))


def loads_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("line 1: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"line 1: malformed header ({exc.msg})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"line 1: unsupported format_version {header.get('format_version')!r}")
    try:
        mask = parse_mask("\n".join(header["mask"]))
        validate_mask(mask)
    except (KeyError, MaskError) as exc:
        raise FormatError(f"line 1: bad mask ({exc})") from None
    m = int(mask.sum())
    bounds = header.get("bounds")
    bounds = None if bounds is None else Bounds(float(bounds[0]), float(bounds[1]))
    meta = header.get("series_meta", {})

    order: list[str] = []
    visits: dict[str, tuple[list[float], list[list[float]]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            sid, k, t, vals = rec["series_id"], rec["visit_index"], rec["time"], rec["values"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"line {lineno}: malformed or truncated visit record ({exc})") from None
        if not isinstance(vals, list) or len(vals) != m:
            n = len(vals) if isinstance(vals, list) else "non-list"
            raise FormatError(f"line {lineno}: expected {m} values, got {n}")
        if sid not in visits:
            order.append(sid)
            visits[sid] = ([], [])
        times, rows = visits[sid]
        if k != len(times):
            raise FormatError(f"line {lineno}: series {sid} visit_index {k} out of order")
        if times and not float(t) > times[-1]:
            raise FormatError(f"line {lineno}: series {sid} visit times not strictly increasing")
        times.append(float(t))
        rows.append([float(v) for v in vals])

    series = []
    for sid in order:
        times, rows = visits[sid]
        info = meta.get(sid, {})
        series.append(Series(sid, np.array(times), np.array(rows), info.get("label"), info.get("truth")))
    return Dataset(series, mask, bounds, header.get("provenance", {}))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text())

