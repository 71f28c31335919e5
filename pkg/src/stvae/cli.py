"""Command-line interface.

Every command writes its outputs through a staging area: files land under a
temporary name and are renamed into place only when the whole command has
succeeded, so a failed run leaves nothing behind. Each run also writes a JSON
manifest (arguments, configuration, seeds, library versions, output digests).

Errors are reported on stderr as a single line::

    stvae: error: <kind>: <message>
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import car, forecast, generators, study
from .fields import Dataset, FormatError, MaskError, Series, dumps_dataset, load_dataset
from .metrics import empirical_correlations, mean_abs_offdiagonal
from .vae import TrainingError, decode_values, encode_values, load_model, serialize_model

log = logging.getLogger("stvae")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# staged outputs and manifests


class Outputs:
    def __init__(self):
        self._staged: list[tuple[Path, Path]] = []
        self.digests: dict[str, str] = {}

    def write(self, path, data: str | bytes) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.partial")
        raw = data.encode("utf-8") if isinstance(data, str) else data
        tmp.write_bytes(raw)
        self._staged.append((tmp, path))
        self.digests[str(path)] = hashlib.sha256(raw).hexdigest()

    def commit(self) -> None:
        for tmp, path in self._staged:
            os.replace(tmp, path)
        self._staged.clear()

    def discard(self) -> None:
        for tmp, _ in self._staged:
            tmp.unlink(missing_ok=True)
        self._staged.clear()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "matplotlib"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _manifest(outputs: Outputs, path, command: str, args: argparse.Namespace, **extra) -> None:
    body = {
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "versions": _versions(),
        **extra,
    }
    body["outputs"] = {os.path.basename(k): v for k, v in sorted(outputs.digests.items())}
    outputs.write(path, json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _sidecar(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _json_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise study.ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise study.ConfigError(f"{path}: expected a JSON object")
    return data


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, out: Outputs) -> None:
    extra = {}
    if args.kind == "vae":
        if not args.model or not args.reference:
            raise UsageError("simulate: --kind vae needs --model and --reference")
        model = load_model(args.model)
        ref = load_dataset(args.reference)
        extra = {"model": model, "class_means": generators.class_means_by_severity(model, ref.stacked_values())}
    spec = generators.GeneratorSpec(args.kind, args.t, args.n, seed=args.seed, **extra)
    data = generators.generate_dataset(spec)
    out.write(args.out, dumps_dataset(data))
    _manifest(out, _sidecar(args.out), "simulate", args, seeds={"master": args.seed, "per_series": "SeedSequence([seed, index])"},
              class_means=extra.get("class_means"))


def cmd_train_vae(args, out: Outputs) -> None:
    data = load_dataset(args.data)
    settings = study._build(study.VaeSettings, _json_file(args.config), "vae config")
    model = study.fit_vae(data, settings, args.seed)
    out.write(args.model_out, serialize_model(model))
    h = model.history
    _manifest(out, _sidecar(args.model_out), "train-vae", args, config=study.dataclasses.asdict(settings),
              seeds={"master": args.seed}, bounds=[model.bounds.lower, model.bounds.upper],
              best_epoch=h.get("best_epoch"), sigma2=model.sigma2)


def cmd_encode(args, out: Outputs) -> None:
    model = load_model(args.model)
    data = load_dataset(getattr(args, "in"))
    rows = []
    for s in data.series:
        z = encode_values(model, s.values)
        for v, (t, code) in enumerate(zip(s.times, z)):
            rows.append([s.series_id, v, repr(float(t))] + [repr(float(c)) for c in code])
    header = ["series_id", "visit_index", "time"] + [f"z{k + 1}" for k in range(model.latent_dim)]
    out.write(args.out, _csv_text(header, rows))
    _manifest(out, _sidecar(args.out), "encode", args)


def _read_codes(path, k: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        want = ["series_id", "visit_index", "time"] + [f"z{j + 1}" for j in range(k)]
        if header != want:
            raise FormatError(f"{path}: line 1: expected columns {','.join(want)}")
        groups: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(want):
                raise FormatError(f"{path}: line {lineno}: expected {len(want)} fields, got {len(row)}")
            try:
                groups.setdefault(row[0], []).append((float(row[2]), [float(x) for x in row[3:]]))
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric value") from None
    return [(sid, np.array([t for t, _ in v]), np.array([c for _, c in v])) for sid, v in groups.items()]


def cmd_decode(args, out: Outputs) -> None:
    model = load_model(args.model)
    series = [Series(sid, t, decode_values(model, z)) for sid, t, z in _read_codes(getattr(args, "in"), model.latent_dim)]
    data = Dataset(series, model.mask, model.bounds, {"source": "decoded", "model": str(args.model)})
    out.write(args.out, dumps_dataset(data))
    _manifest(out, _sidecar(args.out), "decode", args)


def _mcmc(args) -> tuple[study.McmcSettings, int]:
    cfg = dict(_json_file(args.config))
    seed = int(cfg.pop("seed", args.seed))
    return study._build(study.McmcSettings, cfg, "mcmc config"), seed


def cmd_fit_st(args, out: Outputs) -> None:
    data = load_dataset(args.data)
    settings, seed = _mcmc(args)
    graph = car.SpatialGraph.from_mask(data.mask)
    outdir = Path(args.out)
    rows, seeds = [], {}
    for i, s in enumerate(data.series):
        seeds[s.series_id] = study.derive_seed(seed, "fit-st", i)
        post = car.gibbs_fit(s.values, graph, settings.config(seeds[s.series_id]))
        out.write(outdir / f"{s.series_id}.posterior.csv", post.to_csv())
        for name in ("beta", "tau2", "eta2", "rho", "psi"):
            lo, hi = post.interval(name)
            rows.append([s.series_id, name, repr(float(np.mean(post.param(name)))), repr(lo), repr(hi)])
        rows.append([s.series_id, "rho_acceptance", repr(post.rho_acceptance), "", ""])
    out.write(outdir / "summary.csv", _csv_text(["series_id", "parameter", "mean", "lower95", "upper95"], rows))
    _manifest(out, outdir / "manifest.json", "fit-st", args, config=study.dataclasses.asdict(settings), seeds={"master": seed, "per_series": seeds})


def cmd_fit_pw(args, out: Outputs) -> None:
    data = load_dataset(args.data)
    rows = []
    for s in data.series:
        res = forecast.pw_fit_predict(s, s.times[-1:])
        for loc in range(s.values.shape[1]):
            rows.append([s.series_id, loc, repr(float(res.slopes[loc])), repr(float(res.intercepts[loc])), repr(float(res.residual_se[loc]))])
    out.write(args.out, _csv_text(["series_id", "location_id", "slope", "intercept", "residual_se"], rows))
    _manifest(out, _sidecar(args.out), "fit-pw", args)


def _horizons(text: str) -> list[int]:
    try:
        hs = [int(h) for h in text.split(",") if h.strip()]
    except ValueError:
        raise UsageError(f"predict: --horizons must be comma-separated integers, got {text!r}") from None
    if not hs or min(hs) < 1:
        raise UsageError("predict: horizons must be integers >= 1")
    return hs


def cmd_predict(args, out: Outputs) -> None:
    hs = _horizons(args.horizons)
    data = load_dataset(args.data)
    model = None
    if args.method == "vae":
        if not args.model:
            raise UsageError("predict: --method vae needs --model")
        model = load_model(args.model)
    settings, seed = _mcmc(args)
    graph = car.SpatialGraph.from_mask(data.mask) if args.method == "st" else None
    rows, seeds = [], {}
    for i, s in enumerate(data.series):
        step = float(np.mean(np.diff(s.times))) if s.n_visits > 1 else 1.0
        times = s.times[-1] + step * np.asarray(hs, dtype=float)
        if args.method == "pw":
            pred = forecast.pw_fit_predict(s, times).predictions
        elif args.method == "vae":
            pred = forecast.two_stage_predict(model, s, times)
        else:
            seeds[s.series_id] = study.derive_seed(seed, "predict-st", i)
            post = car.gibbs_fit(s.values, graph, settings.config(seeds[s.series_id]))
            pred = car.forecast_st(post, hs, seed=seeds[s.series_id]).mean
        for t, p in zip(times, pred):
            rows.extend([s.series_id, repr(float(t)), loc, repr(float(v)), args.method] for loc, v in enumerate(p))
    out.write(args.out, _csv_text(["series_id", "horizon_time", "location_id", "predicted_value", "method"], rows))
    _manifest(out, _sidecar(args.out), "predict", args, seeds={"master": seed, "per_series": seeds},
              abscissa="last visit time plus h mean visit intervals; ST steps h visits")


def _write_report(out: Outputs, report_dir: Path, files: dict, manifest: dict, args, command: str) -> None:
    for name, text in files.items():
        out.write(report_dir / name, text)
    _manifest(out, report_dir / "manifest.json", command, args, **manifest)


def cmd_study_sim(args, out: Outputs) -> None:
    cfg = study.load_config(args.config)
    rep = study.run_simulation_study(cfg, workers=args.workers)
    files = {"sim_results.csv": rep.results_csv, "sim_summary.csv": rep.summary_csv, **rep.figures}
    _write_report(out, Path(args.report_dir), files, rep.manifest, args, "study-sim")


def cmd_study_predict(args, out: Outputs) -> None:
    cfg = study.load_config(args.config)
    test = load_dataset(args.data) if args.data else None
    model = load_model(args.model) if args.model else None
    rep = study.run_prediction_study(cfg, test=test, model=model, workers=args.workers)
    files = {"pred_records.csv": rep.records_csv, "pred_grid.csv": rep.grid_csv, **rep.figures}
    _write_report(out, Path(args.report_dir), files, rep.manifest, args, "study-predict")


def cmd_correlations(args, out: Outputs) -> None:
    from . import plotting

    data = load_dataset(args.data)
    model = load_model(args.model) if args.model else None
    rows, spatial, temporal = [], [], []
    for s in data.series:
        sp, tp = empirical_correlations(s.values)
        row = [s.series_id, s.n_visits, repr(mean_abs_offdiagonal(sp)), repr(mean_abs_offdiagonal(tp))]
        if model is not None:
            dsp, _ = empirical_correlations(decode_values(model, encode_values(model, s.values)))
            row.append(repr(mean_abs_offdiagonal(dsp)))
        rows.append(row)
        spatial.append(sp)
        temporal.append(tp)
    header = ["series_id", "n_visits", "spatial_offdiag", "temporal_offdiag"] + (["decoded_spatial_offdiag"] if model else [])
    outdir = Path(args.out)
    out.write(outdir / "correlations.csv", _csv_text(header, rows))
    with np.errstate(invalid="ignore"), _quiet():
        mean_sp = np.nanmean(np.stack(spatial), axis=0)
    out.write(outdir / "spatial_mean.csv", _csv_text([f"loc{j}" for j in range(mean_sp.shape[1])], [[repr(float(v)) for v in r] for r in mean_sp]))
    extra = {}
    if model is not None:
        summary = study.smoothing_diagnostic(model, data)
        out.write(outdir / "spatial_raw_vs_decoded.svg", plotting.heatmap_pair(summary.raw_example, summary.decoded_example))
        extra = {"smoothing": {"raw": summary.raw, "decoded": summary.decoded, "difference": summary.difference}}
    else:
        out.write(outdir / "spatial_temporal.svg", plotting.heatmap_pair(spatial[0], temporal[0], ("spatial", "temporal")))
    _manifest(out, outdir / "manifest.json", "correlations", args, **extra)


class _quiet:
    """Silence the all-NaN slice warning from nanmean on undefined entries."""

    def __enter__(self):
        import warnings

        self._cm = warnings.catch_warnings()
        self._cm.__enter__()
        warnings.simplefilter("ignore", RuntimeWarning)

    def __exit__(self, *exc):
        return self._cm.__exit__(*exc)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stvae", description="MMD-VAE, CAR spatiotemporal model and study harness for longitudinal field data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a dataset")
    s.add_argument("--kind", required=True, choices=generators.KINDS)
    s.add_argument("--n", required=True, type=int)
    s.add_argument("--t", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--model", help="decoder for --kind vae")
    s.add_argument("--reference", help="dataset whose severity tertiles give the class-mean codes (--kind vae)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-vae", help="train an MMD-VAE on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON object of VAE settings")
    s.add_argument("--model-out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_vae)

    for name, func, help_ in (("encode", cmd_encode, "dataset -> latent codes CSV"), ("decode", cmd_decode, "latent codes CSV -> dataset")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--model", required=True)
        s.add_argument("--in", required=True)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("fit-st", help="CAR-AR posterior per series")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON object with iterations, burn_in, seed")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_fit_st)

    s = sub.add_parser("fit-pw", help="pointwise OLS per location")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="accepted for symmetry; pointwise OLS has no settings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_pw)

    s = sub.add_parser("predict", help="forecast future visits")
    s.add_argument("--method", required=True, choices=("pw", "st", "vae"))
    s.add_argument("--model")
    s.add_argument("--data", required=True)
    s.add_argument("--horizons", required=True, help="comma-separated steps ahead, e.g. 1,2,3")
    s.add_argument("--config", help="MCMC settings for --method st")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    for name, func in (("study-sim", cmd_study_sim), ("study-predict", cmd_study_predict)):
        s = sub.add_parser(name, help="run the simulation study" if name == "study-sim" else "run the prediction protocol")
        s.add_argument("--config", required=True)
        s.add_argument("--report-dir", required=True)
        s.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${study.WORKERS_ENV} or 1)")
        if name == "study-predict":
            s.add_argument("--data", help="test dataset (default: simulate one)")
            s.add_argument("--model", help="trained model (default: train one)")
        s.set_defaults(func=func)

    s = sub.add_parser("correlations", help="empirical spatial/temporal correlations")
    s.add_argument("--data", required=True)
    s.add_argument("--model", help="also compare with encode-decode reconstructions")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_correlations)
    return p


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    parser = build_parser()
    out = Outputs()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        args.func(args, out)
        out.commit()
        return EXIT_OK
    except UsageError as exc:
        out.discard()
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"stvae: error: usage: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        out.discard()
        print(f"stvae: error: {_error_kind(exc)}: {_one_line(_error_text(exc))}", file=sys.stderr)
        return EXIT_FAIL


def _error_kind(exc: Exception) -> str:
    for types, kind in (
        ((FormatError, MaskError), "format"),
        ((study.ConfigError,), "config"),
        ((TrainingError,), "training"),
        ((car.CarError,), "model"),
        ((OSError,), "io"),
        ((ValueError,), "value"),
    ):
        if isinstance(exc, types):
            return kind
    return "internal"


def _error_text(exc: Exception) -> str:
    if isinstance(exc, FileNotFoundError) and exc.filename:
        return f"{exc.filename}: not found"
    return str(exc) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
