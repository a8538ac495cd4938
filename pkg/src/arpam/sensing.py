"""Concave focused detector array and trace post-processing.

The detector is a spherical-cap array of point sensors, confocal with the
illumination axis. Element traces are averaged into a single receive signal
and band-limited to the transducer's passband with an ideal zero-phase
low-pass.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import fft as sfft

from .errors import ConfigurationError, ShapeError

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))  # rad

DEFAULT_N_ELEMENTS = 97
DEFAULT_ARRAY_RADIUS = 1.4e-3      # m, element-to-focus distance
DEFAULT_MAX_FREQUENCY = 3.0e6      # Hz, detector passband edge
DEFAULT_HALF_ANGLE = math.pi / 3.0  # rad, cap extent around the axis


@dataclass(frozen=True)
class SignalTrace:
    """Uniformly sampled pressure-vs-time record at one point (or an
    average over points)."""

    samples: np.ndarray        # Pa
    sampling_frequency: float  # Hz
    start_time: float = 0.0    # s

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1 or samples.size < 2:
            raise ShapeError("a trace needs at least 2 samples in 1-D")
        if self.sampling_frequency <= 0:
            raise ConfigurationError("sampling frequency must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sampling_frequency

    @property
    def duration(self) -> float:
        return (self.samples.size - 1) * self.dt

    def times(self) -> np.ndarray:
        """Sample times, s."""
        return self.start_time + np.arange(self.samples.size) * self.dt


@dataclass(frozen=True)
class SensorArray:
    """Point sensors on a spherical cap, all at ``radius`` from ``focus``.

    elements    (n, 3) coordinates, m
    focus       geometric focus of the cap, m
    axis        unit vector from focus towards the cap center
    """

    elements: np.ndarray
    focus: np.ndarray
    axis: np.ndarray
    radius: float
    half_angle: float
    max_frequency: float = DEFAULT_MAX_FREQUENCY

    def __post_init__(self):
        self.elements.setflags(write=False)
        self.focus.setflags(write=False)
        self.axis.setflags(write=False)
        dist = np.linalg.norm(self.elements - self.focus, axis=1)
        if np.any(np.abs(dist - self.radius) > 1e-9):
            raise ConfigurationError(
                "array elements are not equidistant from the focus"
            )

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def translated(self, new_focus) -> "SensorArray":
        """The same array rigidly moved so its focus lands on
        ``new_focus`` (used when refocusing at a different depth)."""
        new_focus = np.asarray(new_focus, dtype=float)
        shift = new_focus - self.focus
        return replace(self, elements=self.elements + shift,
                       focus=new_focus)


def build_concave_array(focus, axis, n_elements: int = DEFAULT_N_ELEMENTS,
                        radius: float = DEFAULT_ARRAY_RADIUS,
                        half_angle: float = DEFAULT_HALF_ANGLE,
                        max_frequency: float = DEFAULT_MAX_FREQUENCY
                        ) -> SensorArray:
    """Quasi-uniform (Fibonacci spiral) point-sensor layout on a spherical
    cap of ``half_angle`` around ``axis``, every element at ``radius`` from
    ``focus``. A single-element array degenerates to one on-axis sensor.
    """
    if n_elements < 1:
        raise ConfigurationError("n_elements must be >= 1")
    if radius <= 0:
        raise ConfigurationError("array radius must be positive")
    if not 0 < half_angle <= math.pi / 2:
        raise ConfigurationError("cap half-angle must be in (0, pi/2]")
    focus = np.asarray(focus, dtype=float)
    ax = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(ax)
    if norm == 0:
        raise ConfigurationError("array axis must be a nonzero vector")
    ax = ax / norm

    if n_elements == 1:
        cos_t = np.array([1.0])
        phi = np.array([0.0])
    else:
        # equal-area bands over the cap, golden-angle azimuth steps
        i = np.arange(n_elements)
        cos_t = 1.0 - (1.0 - math.cos(half_angle)) * (i + 0.5) / n_elements
        phi = i * GOLDEN_ANGLE
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))

    # orthonormal frame with e3 = axis
    helper = np.array([1.0, 0.0, 0.0]) if abs(ax[0]) < 0.9 \
        else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(ax, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(ax, e1)
    dirs = (sin_t[:, None] * np.cos(phi)[:, None] * e1[None, :]
            + sin_t[:, None] * np.sin(phi)[:, None] * e2[None, :]
            + cos_t[:, None] * ax[None, :])
    elements = focus[None, :] + radius * dirs
    return SensorArray(elements=elements, focus=focus, axis=ax,
                       radius=radius, half_angle=half_angle,
                       max_frequency=max_frequency)


def average_elements(traces) -> SignalTrace:
    """Pointwise arithmetic mean of per-element traces."""
    traces = list(traces)
    if not traces:
        raise ShapeError("cannot average zero traces")
    first = traces[0]
    for t in traces[1:]:
        if len(t) != len(first):
            raise ShapeError("traces of different lengths cannot be averaged")
        if t.sampling_frequency != first.sampling_frequency \
                or t.start_time != first.start_time:
            raise ShapeError("traces with different time axes cannot be "
                             "averaged")
    mean = np.mean([t.samples for t in traces], axis=0)
    return SignalTrace(samples=mean,
                       sampling_frequency=first.sampling_frequency,
                       start_time=first.start_time)


def apply_bandwidth(trace: SignalTrace, f_max: float) -> SignalTrace:
    """Ideal zero-phase low-pass: frequency bins above ``f_max`` are zeroed,
    everything below passes untouched. Output grid matches the input."""
    nyquist = trace.sampling_frequency / 2.0
    if not 0 < f_max < nyquist:
        raise ConfigurationError(
            f"band edge {f_max} Hz must lie strictly inside (0, Nyquist "
            f"= {nyquist:.6g} Hz)"
        )
    n = len(trace)
    spec = sfft.rfft(trace.samples)
    freqs = np.fft.rfftfreq(n, d=trace.dt)
    spec[freqs > f_max] = 0.0
    out = sfft.irfft(spec, n=n)
    return SignalTrace(samples=out,
                       sampling_frequency=trace.sampling_frequency,
                       start_time=trace.start_time)
