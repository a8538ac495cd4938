"""CSV and JSON writers for traces, spectra, geometry, and reports.

All numeric CSV fields use the same %.9e format so that identical inputs
produce byte-identical files; JSON is written with sorted keys and no
timestamps for the same reason.
"""

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .analysis import SpectralFeatures, Spectrum
from .errors import ShapeError
from .sensing import SensorArray, SignalTrace

_FMT = "%.9e"


def _write_columns(path, header: str, columns) -> None:
    rows = np.column_stack(columns)
    np.savetxt(path, rows, fmt=_FMT, delimiter=",", header=header, comments="")


def write_trace_csv(path, trace: SignalTrace) -> None:
    _write_columns(path, "time_s,pressure_pa", (trace.times(), trace.samples))


def read_trace_csv(path) -> SignalTrace:
    """Load a (time_s, pressure_pa) CSV back into a SignalTrace.

    The time column must be uniformly sampled; tolerance one part in 1e6
    of the step.
    """
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.ndim != 2 or data.shape[1] != 2 or data.shape[0] < 2:
        raise ShapeError(
            f"{path}: expected two columns (time_s, pressure_pa) and at "
            "least two rows"
        )
    t, p = data[:, 0], data[:, 1]
    steps = np.diff(t)
    dt = steps.mean()
    if dt <= 0 or np.any(np.abs(steps - dt) > 1e-6 * dt):
        raise ShapeError(f"{path}: time column is not uniformly sampled")
    return SignalTrace(samples=p, sampling_frequency=1.0 / dt,
                       start_time=float(t[0]))


def write_spectrum_csv(path, spectrum: Spectrum) -> None:
    _write_columns(path, "frequency_hz,psd",
                   (spectrum.frequencies, spectrum.psd))


def write_elements_csv(path, array: SensorArray) -> None:
    _write_columns(path, "x_m,y_m,z_m",
                   (array.elements[:, 0], array.elements[:, 1],
                    array.elements[:, 2]))


def write_diagnostics_csv(path, entries) -> None:
    """Solver diagnostics: (step, time_s, max_abs_pressure) tuples."""
    arr = np.asarray(entries, dtype=float).reshape(-1, 3)
    np.savetxt(path, arr, fmt=("%d", _FMT, _FMT), delimiter=",",
               header="step,time_s,max_abs_pressure_pa", comments="")


def write_phantom_csv(path, grid) -> None:
    """Voxel-per-row dump of a phantom grid: center coordinates, material
    label, and the optical/acoustic property fields."""
    nx, ny, nz = grid.labels.shape
    ix, iy, iz = np.indices((nx, ny, nz)).reshape(3, -1)
    x = grid.origin[0] + ix * grid.spacing
    y = grid.origin[1] + iy * grid.spacing
    z = grid.origin[2] + iz * grid.spacing
    rows = np.column_stack((
        x, y, z, grid.labels.ravel(),
        grid.mu_a.ravel(), grid.mu_s.ravel(),
        grid.sound_speed.ravel(), grid.density.ravel(),
    ))
    np.savetxt(path, rows,
               fmt=(_FMT, _FMT, _FMT, "%d", _FMT, _FMT, _FMT, _FMT),
               delimiter=",",
               header="x_m,y_m,z_m,label,mu_a_per_m,mu_s_per_m,"
                      "sound_speed_m_per_s,density_kg_per_m3",
               comments="")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, float) and obj != obj:  # NaN: JSON has no literal
        return None
    return obj


def write_json(path, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True,
                      allow_nan=False)
    Path(path).write_text(text + "\n")


def write_features_json(path, features: SpectralFeatures,
                        metadata: dict | None = None) -> None:
    """One JSON document per trace: all feature fields plus estimator
    metadata."""
    doc = {"features": asdict(features)}
    if metadata:
        doc["metadata"] = dict(metadata)
    write_json(path, doc)
