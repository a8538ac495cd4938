"""Time- and frequency-domain feature extraction for detected traces.

Covers the detection-side quantities the studies compare: peak-to-peak
pressure, Welch power spectral density, band power, the high-band rectangle
integral, the two-maxima spectral y-intercept, the power-law size-response
fit, and arrival time.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as ssig

from .errors import (
    ConfigurationError,
    DomainError,
    FeatureUnavailableError,
    ShapeError,
)
from .sensing import SignalTrace

#: band of the high-frequency rectangle integral, Hz
HIGH_BAND = (1.5e6, 3.0e6)

#: default prominence threshold for spectral peak detection, fraction of the
#: smoothed global maximum
PEAK_PROMINENCE = 0.05

#: Welch defaults: Hann window, half-overlapping, eight segments
WELCH_WINDOW = "hann"
WELCH_OVERLAP = 0.5
WELCH_SEGMENTS = 8


@dataclass(frozen=True)
class Spectrum:
    """One-sided Welch power spectral density.

    The density convention is such that the rectangle integral of ``psd``
    over [0, Fs/2] approximates the mean square of the signal.
    """

    frequencies: np.ndarray   # Hz, uniformly spaced from 0 to Fs/2
    psd: np.ndarray           # Pa^2/Hz
    source_fs: float          # Hz
    segment_length: int
    overlap_fraction: float
    window: str

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        p = np.asarray(self.psd, dtype=float)
        if f.shape != p.shape or f.ndim != 1 or f.size < 2:
            raise ShapeError("spectrum needs matching 1-D frequency and "
                             "psd arrays")
        if np.any(np.diff(f) <= 0):
            raise ConfigurationError("spectrum frequencies must be strictly "
                                     "increasing")
        if np.any(p < 0):
            raise ConfigurationError("power spectral density cannot be "
                                     "negative")
        f.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "psd", p)

    @property
    def bin_spacing(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])

    @property
    def nyquist(self) -> float:
        return self.source_fs / 2.0


@dataclass(frozen=True)
class SpectralFeatures:
    """All per-trace scalar features the studies track. ``y_intercept`` is
    None when the spectrum does not expose two qualifying maxima."""

    ppp: float                  # Pa
    band_power: float           # Pa^2
    high_band_integral: float   # Pa^2
    y_intercept: float | None   # Pa^2/Hz
    arrival_time: float | None  # s

    def __post_init__(self):
        if self.ppp < 0 or self.band_power < 0 or self.high_band_integral < 0:
            raise ConfigurationError("magnitude features cannot be negative")


@dataclass(frozen=True)
class SizeResponseFit:
    """Least-squares fit of y-intercept versus absorber size to
    c1 * s^gamma + c2, with s in micrometers."""

    c1: float
    c2: float
    gamma: float
    residual: float
    size_unit: str = "um"

    def predict(self, sizes_um) -> np.ndarray:
        s = np.asarray(sizes_um, dtype=float)
        return self.c1 * s**self.gamma + self.c2


# ---------------------------------------------------------------------------
# time-domain features


def peak_to_peak(trace: SignalTrace) -> float:
    """Max minus min sample, Pa."""
    return float(trace.samples.max() - trace.samples.min())


def arrival_time(trace: SignalTrace) -> float:
    """Time of the strongest absolute excursion (earliest sample if tied)."""
    a = np.abs(trace.samples)
    if not a.any():
        raise FeatureUnavailableError(
            "arrival time is undefined for an all-zero trace"
        )
    return trace.start_time + int(np.argmax(a)) * trace.dt


# ---------------------------------------------------------------------------
# spectral estimation


def welch_psd(trace: SignalTrace, segment_length: int | None = None,
              overlap_fraction: float = WELCH_OVERLAP,
              window: str = WELCH_WINDOW,
              nfft: int | None = None) -> Spectrum:
    """Averaged-periodogram (Welch) one-sided density estimate.

    ``segment_length`` defaults to the length giving WELCH_SEGMENTS
    half-overlapping segments. ``nfft`` zero-pads each segment for a finer
    frequency grid (used by peak-based features); it never adds resolution,
    only interpolation.
    """
    n = len(trace)
    if segment_length is None:
        segment_length = max(8, int(2 * n // (WELCH_SEGMENTS + 1)))
        segment_length -= segment_length % 2  # even: top bin lands on Fs/2
    if not 2 <= segment_length <= n:
        raise ShapeError(
            f"segment length {segment_length} incompatible with a "
            f"{n}-sample trace"
        )
    if not 0 <= overlap_fraction < 1:
        raise ConfigurationError("overlap fraction must be in [0, 1)")
    if nfft is not None and nfft < segment_length:
        raise ConfigurationError("nfft cannot be shorter than the segment")
    freqs, psd = ssig.welch(
        trace.samples,
        fs=trace.sampling_frequency,
        window=window,
        nperseg=segment_length,
        noverlap=int(segment_length * overlap_fraction),
        nfft=nfft,
        detrend=False,
        scaling="density",
    )
    # float fuzz from the FFT of a zero-mean cancellation can dip epsilon
    # below zero; the estimator itself is nonnegative
    psd = np.maximum(psd, 0.0)
    return Spectrum(frequencies=freqs, psd=psd,
                    source_fs=trace.sampling_frequency,
                    segment_length=segment_length,
                    overlap_fraction=overlap_fraction, window=window)


def _band_mask(spectrum: Spectrum, f_lo: float, f_hi: float) -> np.ndarray:
    if not 0 <= f_lo < f_hi <= spectrum.nyquist * (1 + 1e-12):
        raise DomainError(
            f"band [{f_lo}, {f_hi}] Hz outside the spectrum's range "
            f"[0, {spectrum.nyquist}] Hz"
        )
    f = spectrum.frequencies
    # left-closed, right-open rectangles so adjacent bands tile exactly;
    # the Nyquist endpoint closes the final band
    mask = (f >= f_lo) & (f < f_hi)
    if f_hi >= f[-1]:
        mask |= f == f[-1]
    return mask


def band_power(spectrum: Spectrum, f_lo: float, f_hi: float) -> float:
    """Rectangle integral of the density over [f_lo, f_hi), Pa^2."""
    mask = _band_mask(spectrum, f_lo, f_hi)
    return float(spectrum.psd[mask].sum() * spectrum.bin_spacing)


def high_band_integral(spectrum: Spectrum, f_lo: float = HIGH_BAND[0],
                       f_hi: float = HIGH_BAND[1]) -> float:
    """Left-rectangle sum of the density over the high band, Pa^2."""
    return band_power(spectrum, f_lo, f_hi)


# ---------------------------------------------------------------------------
# two-maxima y-intercept


def _smooth3(values: np.ndarray) -> np.ndarray:
    padded = np.pad(values, 1, mode="edge")
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def spectral_y_intercept(spectrum: Spectrum,
                         peak_prominence: float = PEAK_PROMINENCE) -> float:
    """f = 0 intercept of the line through the two lowest-frequency local
    maxima of the (3-bin smoothed) density.

    A local maximum must be strictly greater than both neighbours and at
    least ``peak_prominence`` of the smoothed global maximum. Fewer than two
    qualifying maxima raise FeatureUnavailableError.
    """
    if not 0 <= peak_prominence <= 1:
        raise ConfigurationError("peak prominence must be a fraction in "
                                 "[0, 1]")
    smooth = _smooth3(spectrum.psd)
    interior = smooth[1:-1]
    is_peak = (interior > smooth[:-2]) & (interior > smooth[2:])
    is_peak &= interior >= peak_prominence * smooth.max()
    idx = np.nonzero(is_peak)[0] + 1
    if idx.size < 2:
        raise FeatureUnavailableError(
            f"need two spectral maxima above {peak_prominence:.0%} of the "
            f"global maximum, found {idx.size}"
        )
    i1, i2 = idx[0], idx[1]
    f1, p1 = spectrum.frequencies[i1], smooth[i1]
    f2, p2 = spectrum.frequencies[i2], smooth[i2]
    return float(p1 - f1 * (p2 - p1) / (f2 - f1))


# ---------------------------------------------------------------------------
# size-response power law


def _powerlaw_lstsq(sizes, values, gamma):
    design = np.stack([sizes**gamma, np.ones_like(sizes)], axis=1)
    coef, _, _, _ = np.linalg.lstsq(design, values, rcond=None)
    rss = float(((design @ coef - values) ** 2).sum())
    return coef, rss


def fit_size_response(points, gamma_range=(0.0, 8.0)) -> SizeResponseFit:
    """Fit y-intercept-vs-size data to c1 * s^gamma + c2 (s in um).

    The exponent is found by a 0.01-step grid scan over ``gamma_range``
    followed by golden-section refinement; c1 and c2 are linear least
    squares at each candidate. Deterministic by construction.
    """
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError("points must be (size_um, value) pairs")
    sizes, values = pts[:, 0], pts[:, 1]
    if np.unique(sizes).size < 3:
        raise ConfigurationError(
            "the three-parameter size response needs at least 3 distinct "
            "sizes"
        )
    if np.any(sizes <= 0):
        raise DomainError("absorber sizes must be positive")
    lo, hi = float(gamma_range[0]), float(gamma_range[1])
    if not 0 <= lo < hi:
        raise ConfigurationError("gamma range must satisfy 0 <= lo < hi")

    grid = np.arange(lo, hi + 1e-12, 0.01)
    rss_grid = [_powerlaw_lstsq(sizes, values, g)[1] for g in grid]
    best = int(np.argmin(rss_grid))

    # golden-section polish inside the bracketing grid cells
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, len(grid) - 1)]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _powerlaw_lstsq(sizes, values, c)[1]
    fd = _powerlaw_lstsq(sizes, values, d)[1]
    while b - a > 1e-9:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _powerlaw_lstsq(sizes, values, c)[1]
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _powerlaw_lstsq(sizes, values, d)[1]
    gamma = (a + b) / 2.0
    coef, rss = _powerlaw_lstsq(sizes, values, gamma)
    return SizeResponseFit(c1=float(coef[0]), c2=float(coef[1]),
                           gamma=float(gamma), residual=math.sqrt(rss))
