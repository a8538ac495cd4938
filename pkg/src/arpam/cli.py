"""Command-line front end.

Subcommands
-----------
``simulate``        one full pipeline run on the configured scene
``study KIND``      size | concentration | depth sweep with trend assertions
``validate``        solver / optics / analysis oracle suite
``analyze CSV``     feature extraction for an externally recorded trace
``phantom-dump``    voxel table of the configured scene

Exit status: 0 on success; 1 when a run started but an assertion, oracle,
or solver failed (the report is still written); 2 for usage and
configuration errors. Everything the process writes lands under ``--out``,
and a lock file keeps two processes out of the same output directory.
"""

import argparse
import contextlib
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .acoustics import set_fft_workers
from .config import RunConfig, parse_config
from .errors import ArpamError, ConfigurationError, OutputLockError
from .experiments import (
    StudyReport,
    build_single_scene,
    extract_features,
    run_single_shot,
    run_study,
)
from .io import (
    read_trace_csv,
    write_features_json,
    write_phantom_csv,
    write_spectrum_csv,
)

_LOG = logging.getLogger("arpam.cli")

LOCK_NAME = ".arpam.lock"


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH",
                        help="run configuration file (TOML)")
    common.add_argument("--out", metavar="DIR", default=None,
                        help="output directory (default: config out_dir, "
                             "i.e. ./out)")
    common.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override the study seed")
    common.add_argument("--plots", action="store_true",
                        help="also write SVG charts")
    common.add_argument("--threads", type=int, default=None, metavar="N",
                        help="FFT worker threads (default: config threads)")
    common.add_argument("--verbose", action="store_true",
                        help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="arpam",
        description="Simulation pipeline for transcranial photoacoustic "
                    "microscopy: voxel phantom, pulsed-laser transport, "
                    "k-space acoustics, focused-array detection, and "
                    "spectral feature analysis.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")
    sub.add_parser("simulate", parents=[common],
                   help="run the configured single-inclusion pipeline")
    p_study = sub.add_parser("study", parents=[common],
                             help="run a sweep with trend assertions")
    p_study.add_argument("kind", choices=("size", "concentration", "depth"),
                         help="which sweep to run")
    sub.add_parser("validate", parents=[common],
                   help="run the oracle suite against frozen tolerances")
    p_analyze = sub.add_parser("analyze", parents=[common],
                               help="extract features from a trace CSV")
    p_analyze.add_argument("trace", metavar="TRACE_CSV",
                           help="CSV with columns time_s,pressure_pa")
    sub.add_parser("phantom-dump", parents=[common],
                   help="write the voxelized scene as CSV")
    return parser


def _load(args) -> RunConfig:
    """Parse the config file and fold in command-line overrides (flags win
    over the [run] section; boolean flags only turn things on)."""
    cfg = parse_config(args.config)
    study = cfg.study
    if args.seed is not None:
        study = replace(study, seed=args.seed)
    kind = getattr(args, "kind", None)
    if kind is not None and kind != study.kind:
        study = replace(study, kind=kind)
    if args.command == "validate" and study.kind != "validation":
        study = replace(study, kind="validation")
    threads = args.threads if args.threads is not None else cfg.threads
    if threads < 1:
        raise ConfigurationError("--threads must be a positive integer")
    return replace(
        cfg,
        study=study,
        out_dir=args.out if args.out is not None else cfg.out_dir,
        plots=cfg.plots or args.plots,
        threads=threads,
        verbose=cfg.verbose or args.verbose,
    )


@contextlib.contextmanager
def _own_output_dir(out: Path):
    """One process per output directory, enforced with an O_EXCL lock file
    that is removed on exit. A leftover lock from a crash has to be removed
    by hand, so the message names it."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLockError(
            f"output directory '{out}' is in use by another run "
            f"(lock file {lock}; remove it if a previous run crashed)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            lock.unlink()


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.6e}"
    return str(value)


def _finish_report(report: StudyReport, out: Path) -> int:
    for a in report.assertions:
        print(f"  {a['name']}: {'PASS' if a['passed'] else 'FAIL'}"
              f" ({a['detail']})")
    status = "PASS" if report.passed else "FAIL"
    print(f"{report.kind}: {status} -> {out / 'report.json'}")
    return 0 if report.passed else 1


def _cmd_simulate(cfg: RunConfig, args, out: Path) -> int:
    report = run_single_shot(cfg.study, out_dir=out, plots=cfg.plots)
    for name, value in report.rows[0]["features"].items():
        print(f"  {name}: {_fmt(value)}")
    return _finish_report(report, out)


def _cmd_study(cfg: RunConfig, args, out: Path) -> int:
    report = run_study(cfg.study, out_dir=out, plots=cfg.plots)
    return _finish_report(report, out)


def _cmd_validate(cfg: RunConfig, args, out: Path) -> int:
    report = run_study(cfg.study, out_dir=out, plots=cfg.plots)
    for row in report.rows:
        print(f"  {row['name']}: {row['status']} "
              f"(metric {_fmt(row['metric'])}, "
              f"tolerance {_fmt(row['tolerance'])})")
    status = report.extras["status"]
    print(f"validation: {status} -> {out / 'report.json'}")
    return 0 if status == "PASS" else 1


def _cmd_analyze(cfg: RunConfig, args, out: Path) -> int:
    try:
        trace = read_trace_csv(args.trace)
    except OSError as exc:
        raise ConfigurationError(
            f"cannot read trace {args.trace}: {exc.strerror or exc}"
        ) from None
    except ValueError as exc:  # np.loadtxt on non-numeric content
        raise ConfigurationError(
            f"cannot parse trace {args.trace}: {exc}") from None
    features, spectrum, peak_spectrum, flags = extract_features(
        trace, cfg.study.settings)
    write_features_json(out / "features.json", features,
                        metadata={"source": os.path.basename(args.trace),
                                  "flags": flags})
    write_spectrum_csv(out / "spectrum.csv", spectrum)
    write_spectrum_csv(out / "spectrum_peaks.csv", peak_spectrum)
    if cfg.plots:
        _plot_analysis(out, trace, spectrum)
    for name, value in asdict(features).items():
        print(f"  {name}: {_fmt(value)}")
    if flags:
        print(f"  flags: {', '.join(flags)}")
    print(f"analyze: {len(trace)} samples -> {out / 'features.json'}")
    return 0


def _cmd_phantom_dump(cfg: RunConfig, args, out: Path) -> int:
    grid, _pulse = build_single_scene(cfg.study)
    path = out / "phantom.csv"
    write_phantom_csv(path, grid)
    labels, counts = np.unique(grid.labels, return_counts=True)
    for lab, n in zip(labels, counts):
        name = grid.label_names.get(int(lab), str(int(lab)))
        print(f"  {name}: {int(n)} voxels")
    print(f"phantom-dump: {grid.labels.size} voxels -> {path}")
    return 0


def _plot_analysis(out: Path, trace, spectrum) -> None:
    # same contract as the study plots: no plotting backend, no plot,
    # and never any effect on computed outputs
    try:
        from matplotlib.backends.backend_svg import FigureCanvasSVG
        from matplotlib.figure import Figure
    except Exception:
        return
    fig = Figure(figsize=(8.0, 3.2))
    FigureCanvasSVG(fig)
    ax_t, ax_f = fig.subplots(1, 2)
    ax_t.plot(trace.times() * 1e6, trace.samples, lw=0.9)
    ax_t.set_xlabel("time (us)")
    ax_t.set_ylabel("pressure (Pa)")
    ax_f.plot(spectrum.frequencies * 1e-6, spectrum.psd, lw=0.9)
    ax_f.set_xlabel("frequency (MHz)")
    ax_f.set_ylabel("PSD (Pa$^2$/Hz)")
    fig.tight_layout()
    fig.savefig(out / "analyze.svg", metadata={"Date": None})


_COMMANDS = {
    "simulate": _cmd_simulate,
    "study": _cmd_study,
    "validate": _cmd_validate,
    "analyze": _cmd_analyze,
    "phantom-dump": _cmd_phantom_dump,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        cfg = _load(args)
        logging.basicConfig(
            level=logging.INFO if cfg.verbose else logging.WARNING,
            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
            force=True)
        set_fft_workers(cfg.threads)
    except ConfigurationError as exc:
        print(f"arpam: error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    _LOG.info("config %s, command %s, out %s, seed %d",
              args.config, args.command, out, cfg.study.seed)
    start = time.perf_counter()
    try:
        with _own_output_dir(out):
            code = _COMMANDS[args.command](cfg, args, out)
    except ConfigurationError as exc:
        print(f"arpam: error: {exc}", file=sys.stderr)
        return 2
    except ArpamError as exc:
        print(f"arpam: error: {exc}", file=sys.stderr)
        return 1
    _LOG.info("%s finished in %.1f s with exit status %d",
              args.command, time.perf_counter() - start, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
