"""End-to-end composition used by the command line: simulate, ingest, analyze, report."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ecgtrend import cohort as coh
from ecgtrend import fda
from ecgtrend import inference as inf
from ecgtrend import ingest
from ecgtrend.config import RunManifest
from ecgtrend.errors import InputError
from ecgtrend.synth import CohortModel, EcgModel, MeanTemplate, gen_ecg, gen_subject_series

__all__ = ["collect_inputs", "run_simulate", "run_ingest", "run_analyze", "run_report", "analyze_channel"]

logger = logging.getLogger(__name__)

RR_U_SIGMA = 0.1
ACME_MARGIN = 100


def atomic_write(path, writer):
    """Call ``writer(tmp_path)`` then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    writer(tmp)
    os.replace(tmp, path)
    return path


def _write_text(path, text):
    return atomic_write(path, lambda p: Path(p).write_text(text))


def collect_inputs(paths):
    """Expand directories to their ``*.csv`` files; keep files as given."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.csv")))
        elif p.exists():
            files.append(p)
        else:
            raise InputError(f"{p}: no such file or directory")
    if not files:
        raise InputError("no inputs")
    return files


# --------------------------------------------------------------------------
# simulate


def _channel_models(cfg):
    rr = CohortModel(
        mu=MeanTemplate("v_shape", level=cfg.sim_rr_rest, amplitude=cfg.sim_rr_depth),
        sigma=cfg.sim_rr_sigma * cfg.sim_rr_rest,
        u_sigma=RR_U_SIGMA,
        noise=cfg.sim_noise,
    )
    r = CohortModel(
        mu=MeanTemplate("dip", cfg.sim_r_level, cfg.sim_dip_amplitude, cfg.sim_dip_offset, cfg.sim_feature_width),
        sigma=cfg.sim_sigma * cfg.sim_r_level,
        u_sigma=cfg.sim_u_sigma,
        noise=cfg.sim_noise,
    )
    t = CohortModel(
        mu=MeanTemplate("bump", cfg.sim_t_level, cfg.sim_bump_amplitude, cfg.sim_bump_offset, cfg.sim_feature_width),
        sigma=cfg.sim_sigma * cfg.sim_t_level,
        u_sigma=cfg.sim_u_sigma,
        noise=cfg.sim_noise,
    )
    return {"rr": rr, "r": r, "t": t}


def simulate_subject(cfg, seed_seq):
    """One subject's RR/R/T series with a random length and acme.

    ``seed_seq`` is split into (length/acme, rr, r, t, ecg noise) streams.
    """
    streams = seed_seq.spawn(5)
    rng = np.random.default_rng(streams[0])
    length = int(rng.integers(cfg.sim_min_beats, cfg.sim_max_beats + 1))
    half = cfg.m // 2
    acme = int(rng.integers(half + ACME_MARGIN, length - half - ACME_MARGIN + 1))
    out, scale = {}, {}
    for (name, model), stream in zip(_channel_models(cfg).items(), streams[1:4]):
        out[name], _, scale[name] = gen_subject_series(model, length, acme, np.random.default_rng(stream))
    ecg_seed = int(np.random.default_rng(streams[4]).integers(2**31))
    return out, {"length": length, "acme": acme, "u": scale, "ecg_seed": ecg_seed}


def _beats_from_arrays(rr, r, t, sid):
    beats = [ingest.Beat(r_peak=None, r_amplitude=float(a), t_amplitude=float(b), rr=float(c)) for c, a, b in zip(rr, r, t)]
    return ingest.BeatSeries(beats, sid)


def run_simulate(cfg, out_dir):
    """Write ``beats/<id>.csv`` (and ``ecg/<id>.csv`` when enabled), truth and manifest."""
    out_dir = Path(out_dir)
    (out_dir / "beats").mkdir(parents=True, exist_ok=True)
    if cfg.sim_emit_ecg:
        (out_dir / "ecg").mkdir(exist_ok=True)
    manifest = RunManifest("simulate", cfg.snapshot())
    truth = {
        "features": {
            "r": {"kind": "min", "offset": cfg.sim_dip_offset, "amplitude": -cfg.sim_dip_amplitude},
            "t": {"kind": "max", "offset": cfg.sim_bump_offset, "amplitude": cfg.sim_bump_amplitude},
        },
        "subjects": {},
    }
    for i, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.sim_subjects)):
        sid = f"s{i + 1:02d}"
        series, info = simulate_subject(cfg, child)
        truth["subjects"][sid] = info
        beats = _beats_from_arrays(series["rr"], series["r"], series["t"], sid)
        path = atomic_write(out_dir / "beats" / f"{sid}.csv", lambda p: ingest.write_beat_series_csv(beats, p))
        manifest.outputs.append(str(path.relative_to(out_dir)))
        if cfg.sim_emit_ecg:
            model = EcgModel(
                rr_ms=tuple(series["rr"]),
                r_mv=tuple(series["r"]),
                t_mv=tuple(series["t"]),
                noise_pp_mv=cfg.sim_ecg_noise_pp,
                seed=info["ecg_seed"],
            )
            duration = (model.first_beat_ms + series["rr"][1:].sum() + 1000.0) / 1000.0
            record, _ = gen_ecg(model, duration)
            path = atomic_write(out_dir / "ecg" / f"{sid}.csv", lambda p: ingest.write_ecg_csv(record, p))
            manifest.outputs.append(str(path.relative_to(out_dir)))
        manifest.subjects[sid] = "generated"
    _write_text(out_dir / "truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n")
    _write_text(out_dir / "manifest.json", manifest.to_json())
    return manifest


# --------------------------------------------------------------------------
# ingest


def _ingest_one(path, out_dir, detector):
    path = Path(path)
    try:
        record = ingest.read_ecg_csv(path)
        series = ingest.extract_beat_series(record, detector, subject_id=path.stem)
    except (InputError, ValueError) as exc:
        # the CLI prefixes the path itself
        return path, None, str(exc).removeprefix(f"{path}: ")
    target = atomic_write(Path(out_dir) / f"{path.stem}.csv", lambda p: ingest.write_beat_series_csv(series, p))
    return path, target, f"ok invalid_fraction={series.invalid_fraction:.6f} beats={len(series)}"


def run_ingest(cfg, inputs, out_dir, jobs=1):
    """Extract a BeatSeries CSV per ECG file; returns ``(manifest, failures)``."""
    files = collect_inputs(inputs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("ingest", cfg.snapshot())
    manifest.add_inputs(files)
    detector = cfg.detector()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ingest_one, files, [out_dir] * len(files), [detector] * len(files)))
    else:
        results = [_ingest_one(f, out_dir, detector) for f in files]
    failures = {}
    for path, target, status in results:
        manifest.subjects[path.stem] = status
        if target is None:
            failures[str(path)] = status
        else:
            manifest.outputs.append(target.name)
    _write_text(out_dir / "manifest.json", manifest.to_json())
    return manifest, failures


# --------------------------------------------------------------------------
# analyze


def analyze_channel(cohort, basis, cfg):
    """Smoothing, PCA, mean band, local-fit bands and the feature report for one channel."""
    fits = fda.smooth(cohort.matrix, basis)
    curves = fits.values
    mean = curves.mean(axis=0)
    band = inf.confidence_band(mean, inf.pointwise_variance(curves, mean), cohort.n, cfg.alpha)
    raw_mean = coh.population_mean_raw(cohort)
    local = inf.local_poly_fit(raw_mean, cfg.sizer())
    slope = inf.derivative_band(local, cfg.alpha)
    report = inf.find_significant_extrema(band, slope, cfg.sizer_h, reference=cfg.reference)
    pca = None
    if cohort.n < 3:
        logger.warning("PCA skipped: needs at least 3 subjects")
    else:
        try:
            pca = fda.fpca(fits, min(cfg.n_components, cohort.n - 1))
        except ValueError as exc:
            # identical curves (noise-free cohorts) have no principal components
            logger.warning("PCA skipped: %s", exc)
    return {
        "band": band,
        "raw_mean": raw_mean,
        "level": inf.level_band(local, cfg.alpha),
        "slope": slope,
        "report": report,
        "pca": pca,
    }


def _plot_svg(path, result, channel):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ecgtrend"
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    band = result["band"]
    top.fill_between(band.grid, band.lower, band.upper, color="0.8")
    top.plot(band.grid, result["raw_mean"], ".", ms=1.5, color="0.4")
    top.plot(band.grid, band.center, color="k", lw=1)
    top.axhline(1.0, color="tab:blue", lw=0.8)
    top.set_ylabel(f"{channel} (normalized)")
    slope = result["slope"]
    bottom.fill_between(slope.grid, slope.lower, slope.upper, color="0.8")
    bottom.plot(slope.grid, slope.center, color="k", lw=1)
    bottom.axhline(0.0, color="tab:blue", lw=0.8)
    bottom.set_ylabel("slope per beat")
    bottom.set_xlabel("beat")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def run_analyze(cfg, inputs, out_dir):
    """Registered cohorts, PCA report, bands and feature reports from BeatSeries CSVs."""
    files = collect_inputs(inputs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("analyze", cfg.snapshot())
    manifest.add_inputs(files)
    subjects = []
    for f in files:
        series = ingest.read_beat_series_csv(f)
        try:
            subjects.append(coh.channels_from_beats(series))
        except ValueError as exc:
            raise InputError(f"{f}: {exc}") from None
    bundle = coh.build_cohort(
        subjects, m=cfg.m, acme_smoothing=cfg.acme_smoothing, length_bounds=(cfg.min_beats, cfg.max_beats)
    )
    for sid in bundle.channels["rr"].subject_ids:
        manifest.subjects[sid] = f"included acme_beat={bundle.acme_beats[sid]}"
    for sid, reason in bundle.excluded.items():
        manifest.subjects[sid] = f"excluded: {reason}"

    def emit(name, writer):
        atomic_write(out_dir / name, writer)
        manifest.outputs.append(name)

    for c in coh.CHANNELS:
        emit(f"cohort_{c}.csv", lambda p, c=c: coh.write_cohort_csv(bundle.channels[c], p))
        emit(f"cohort_{c}_meta.txt", lambda p, c=c: coh.write_cohort_metadata(bundle, c, p))

    basis = fda.build_basis(cfg.m, cfg.n_breakpoints)
    results = {}
    for c in cfg.channels:
        cohort = bundle.channels[c]
        res = analyze_channel(cohort, basis, cfg)
        results[c] = res
        if res["pca"] is not None:
            emit(f"pca_{c}_eigen.csv", lambda p, r=res: fda.write_pca_eigenvalues(r["pca"], p))
            emit(f"pca_{c}_loadings.csv", lambda p, r=res: fda.write_pca_loadings(r["pca"], cohort.subject_ids, p))
            emit(f"pca_{c}_eigenfunctions.csv", lambda p, r=res: fda.write_eigenfunctions(r["pca"], p))
        emit(f"band_{c}.csv", lambda p, r=res: inf.write_band_csv(r["band"], p))
        emit(f"sizer_{c}_level.csv", lambda p, r=res: inf.write_band_csv(r["level"], p))
        emit(f"sizer_{c}_slope.csv", lambda p, r=res: inf.write_band_csv(r["slope"], p))
        emit(f"features_{c}.json", lambda p, r=res: Path(p).write_text(r["report"].to_json()))
        if cfg.svg:
            emit(f"plot_{c}.svg", lambda p, r=res, c=c: _plot_svg(p, r, c))
    _write_text(out_dir / "manifest.json", manifest.to_json())
    return manifest, bundle, results


# --------------------------------------------------------------------------
# report


def run_report(out_dir):
    """Human-readable summary of the feature reports in ``out_dir``."""
    out_dir = Path(out_dir)
    paths = sorted(out_dir.glob("features_*.json"))
    if not paths:
        raise InputError(f"{out_dir}: no features_*.json reports")
    lines = []
    for p in paths:
        channel = p.stem.split("_", 1)[1]
        doc = json.loads(p.read_text())
        spans = ", ".join(f"[{iv['lo']:g}, {iv['hi']:g}]" for iv in doc["significant_intervals"]) or "none"
        lines.append(f"channel {channel}: mean band excludes the constant line on {spans}")
        if not doc["extrema"]:
            lines.append(f"channel {channel}: no certified extrema")
        for e in doc["extrema"]:
            before, after = ("< 0", "> 0") if e["kind"] == "min" else ("> 0", "< 0")
            left, right = e["left_interval"], e["right_interval"]
            lines.append(
                f"channel {channel}: {e['kind']} at beat {e['beat']:.1f} "
                f"(slope {before} on [{left['lo']:g}, {left['hi']:g}], {after} on [{right['lo']:g}, {right['hi']:g}])"
            )
    return "\n".join(lines) + "\n"
