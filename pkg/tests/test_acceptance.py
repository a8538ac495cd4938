"""Release acceptance: ten criteria, one test and one printed pass/fail line
each. The pipeline criteria run the full 96^3 grid at 115 um spacing, so this
module is by far the slowest in the suite (tens of minutes on one core)."""

import filecmp
import time

import numpy as np
import pytest

from arpam.analysis import (
    Spectrum,
    band_power,
    fit_size_response,
    peak_to_peak,
    spectral_y_intercept,
    welch_psd,
)
from arpam.experiments import (
    PipelineSettings,
    StudySpec,
    _check_beer_lambert,
    _check_linearity,
    _check_n_wave,
    _check_plane_wave,
    _check_pml,
    _check_rte_vs_mc,
    run_concentration_study,
    run_depth_study,
    run_size_study,
)
from arpam.optics import check_confinement, mpe_skin
from arpam.sensing import SignalTrace

FULL = PipelineSettings()  # 96^3 at 115 um, reference pulse, 97-element cap

EXTINCTION_RATIO = 154550.0 / 816.0  # ~189 at 800 nm


def _line(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"[criterion {num:2d}] {name}: {'PASS' if ok else 'FAIL'} "
          f"({detail})", flush=True)


def _features(report, key):
    return [row["features"][key] for row in report.rows]


def _increasing(seq):
    return all(b > a for a, b in zip(seq, seq[1:]))


def _decreasing(seq):
    return all(b < a for a, b in zip(seq, seq[1:]))


# ---------------------------------------------------------------------------
# shared full-scale study runs


@pytest.fixture(scope="module")
def size_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc_size")
    spec = StudySpec(kind="size", settings=FULL, seed=0)
    t0 = time.perf_counter()
    report = run_size_study(spec, out_dir=out)
    return report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def concentration_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc_conc")
    spec = StudySpec(kind="concentration", settings=FULL, seed=0)
    return run_concentration_study(spec, out_dir=out)


@pytest.fixture(scope="module")
def depth_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc_depth")
    spec = StudySpec(kind="depth", settings=FULL, seed=0)
    return run_depth_study(spec, out_dir=out)


# ---------------------------------------------------------------------------
# 1. size trend


def test_criterion_01_size_trend(size_study):
    report, elapsed = size_study
    ppp = _features(report, "ppp")
    ratio = ppp[-1] / ppp[0]
    ok = (
        [row["radius_um"] for row in report.rows] == [234.0, 468.0, 702.0,
                                                      936.0]
        and _increasing(ppp)
        and ratio >= 5.0
        and max(FULL.grid_dims) <= 96
        and FULL.grid_spacing == pytest.approx(115e-6)
        and elapsed < 600.0
    )
    _line(1, "size trend", ok,
          f"PPP ratio {ratio:.2f}, grid {FULL.grid_dims}, {elapsed:.0f} s")
    assert _increasing(ppp), f"PPP not strictly increasing: {ppp}"
    assert ratio >= 5.0, f"PPP(936)/PPP(234) = {ratio:.2f} < 5"
    assert max(FULL.grid_dims) <= 96 and FULL.grid_spacing <= 115e-6 * (
        1 + 1e-12)
    assert elapsed < 600.0, f"size study took {elapsed:.0f} s"


# ---------------------------------------------------------------------------
# 2. y-intercept monotonicity and exponent fit


def test_criterion_02_y_intercept_and_fit(size_study):
    report, _ = size_study
    yi = _features(report, "y_intercept")
    gamma = report.fit["gamma"]

    # reference coefficients for the synthetic recovery check
    c1, c2, g_ref = 1.0932e-45, -1.2470e-35, 4.329
    sizes = np.array([234.0, 468.0, 702.0, 936.0])
    t0 = time.perf_counter()
    fit = fit_size_response(list(zip(sizes, c1 * sizes**g_ref + c2)))
    dt = time.perf_counter() - t0
    rel = abs(fit.gamma - g_ref) / g_ref

    ok = _increasing(yi) and gamma > 1.0 and rel < 0.01 and dt < 1.0
    _line(2, "y-intercept fit", ok,
          f"gamma {gamma:.2f}, synthetic recovery {rel:.1e} in {dt:.2f} s")
    assert _increasing(yi), f"y-intercepts not increasing: {yi}"
    assert gamma > 1.0, f"fitted exponent {gamma} not > 1"
    assert rel < 0.01, f"synthetic exponent off by {rel:.2%}"
    assert dt < 1.0


# ---------------------------------------------------------------------------
# 3. concentration linearity


def test_criterion_03_concentration_linearity(concentration_study):
    report = concentration_study
    reg = report.extras["ppp_regression"]
    saturated = [row for row in report.rows
                 if row.get("excluded_from_regression")
                 and "linear limit" in row["excluded_from_regression"]]
    ok = (reg["r_squared"] >= 0.99 and reg["n_points"] == 3
          and len(saturated) == 1
          and saturated[0]["features"]["ppp"] > 0)
    _line(3, "concentration linearity", ok,
          f"R^2 {reg['r_squared']:.6f} over 3 points, "
          f"{len(saturated)} point reported separately")
    assert reg["n_points"] == 3
    assert reg["r_squared"] >= 0.99, f"R^2 = {reg['r_squared']}"
    assert len(saturated) == 1  # the 50 g/L point, excluded but reported
    assert saturated[0]["features"]["ppp"] > 0


# ---------------------------------------------------------------------------
# 4. agent-vs-blood contrast


def test_criterion_04_equal_molar_contrast(concentration_study):
    em = concentration_study.extras["equal_molar"]
    ppp_ratio = em["ppp_ratio"]
    bp_ratio = em["band_power_ratio"]
    ok = (abs(ppp_ratio / EXTINCTION_RATIO - 1.0) <= 0.20
          and bp_ratio > 1e3)
    _line(4, "equal-molar contrast", ok,
          f"PPP ratio {ppp_ratio:.1f} vs {EXTINCTION_RATIO:.1f}, "
          f"band-power ratio {bp_ratio:.2e}")
    assert abs(ppp_ratio / EXTINCTION_RATIO - 1.0) <= 0.20
    assert bp_ratio > 1e3


# ---------------------------------------------------------------------------
# 5. depth trends


def test_criterion_05_depth_trends(depth_study):
    report = depth_study
    arrivals = _features(report, "arrival_time")
    ppp = _features(report, "ppp")
    hbi = _features(report, "high_band_integral")
    increments = np.diff(arrivals)
    ok = (_increasing(arrivals) and np.all(increments > 0)
          and _decreasing(ppp) and _decreasing(hbi))
    _line(5, "depth trends", ok,
          f"arrivals {[f'{a * 1e6:.2f}us' for a in arrivals]}, "
          f"PPP {[f'{p:.3g}' for p in ppp]}")
    assert _increasing(arrivals) and np.all(increments > 0), arrivals
    assert _decreasing(ppp), ppp
    assert _decreasing(hbi), hbi


# ---------------------------------------------------------------------------
# 6. acoustic solver oracles


def test_criterion_06_acoustic_oracles():
    t0 = time.perf_counter()
    plane = _check_plane_wave()
    n_wave = _check_n_wave()
    linear = _check_linearity()
    pml = _check_pml()
    elapsed = time.perf_counter() - t0
    checks = (plane, n_wave, linear, pml)
    ok = (all(c["status"] == "PASS" for c in checks)
          and plane["metric"] < 1e-6
          and n_wave["metric"] <= n_wave["tolerance"]  # 2 * dt window
          and linear["metric"] < 1e-9
          and pml["metric"] < 0.005
          and elapsed < 60.0)
    _line(6, "acoustic oracles", ok,
          f"plane {plane['metric']:.1e}, n-wave {n_wave['metric']:.1e} s, "
          f"linearity {linear['metric']:.1e}, PML {pml['metric']:.1e}, "
          f"{elapsed:.0f} s")
    assert plane["metric"] < 1e-6, plane
    assert n_wave["status"] == "PASS", n_wave
    assert linear["metric"] < 1e-9, linear
    assert pml["metric"] < 0.005, pml
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 7. optics oracles


def test_criterion_07_optics_oracles():
    t0 = time.perf_counter()
    beer = _check_beer_lambert()
    mc = _check_rte_vs_mc(StudySpec(kind="validation", settings=FULL))
    elapsed = time.perf_counter() - t0
    ok = (beer["status"] == "PASS" and beer["metric"] < 0.01
          and mc["status"] == "PASS"
          and mc["metric"] is not None and mc["metric"] < 0.05
          and elapsed < 120.0)
    mc_metric = "n/a" if mc["metric"] is None else f"{mc['metric']:.3f}"
    _line(7, "optics oracles", ok,
          f"ballistic decay {beer['metric']:.1e}, series-vs-MC {mc_metric}, "
          f"{elapsed:.0f} s")
    assert beer["metric"] < 0.01, beer
    assert mc["status"] == "PASS", mc
    assert mc["metric"] < 0.05, mc
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# 8. analysis oracles


def test_criterion_08_analysis_oracles():
    fs, n = 50e6, 4096
    t = np.arange(n) / fs
    x = np.sin(2 * np.pi * 1e6 * t)
    trace = SignalTrace(samples=x, sampling_frequency=fs, start_time=0.0)
    spectrum = welch_psd(trace)
    parseval = abs(band_power(spectrum, 0.0, fs / 2) / (x**2).mean() - 1.0)

    # sinusoid sampled at fs/8 hits its crests exactly: PPP == 2A
    amp = 3.0
    x8 = amp * np.sin(2 * np.pi * (fs / 8) * t)
    ppp_err = abs(peak_to_peak(SignalTrace(samples=x8,
                                           sampling_frequency=fs,
                                           start_time=0.0)) - 2 * amp)

    # two constructed maxima: intercept equals the exact line through them
    freqs = np.linspace(0.0, 25e6, 2001)
    psd = 3.0 * np.exp(-((freqs - 1.2e6) ** 2) / (2 * 0.2e6**2))
    psd += 7.0 * np.exp(-((freqs - 2.4e6) ** 2) / (2 * 0.2e6**2))
    spec = Spectrum(frequencies=freqs, psd=psd, source_fs=50e6,
                    segment_length=4000, overlap_fraction=0.5, window="hann")
    padded = np.pad(psd, 1, mode="edge")
    smooth = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
    peaks = [i for i in range(1, len(smooth) - 1)
             if smooth[i] > smooth[i - 1] and smooth[i] > smooth[i + 1]
             and smooth[i] >= 0.05 * smooth.max()]
    (i1, i2) = peaks[:2]
    f1, p1 = freqs[i1], smooth[i1]
    f2, p2 = freqs[i2], smooth[i2]
    expected = p1 - f1 * (p2 - p1) / (f2 - f1)
    intercept_rel = abs(spectral_y_intercept(spec) / expected - 1.0)

    # band additivity when split exactly on a bin edge
    rng = np.random.default_rng(77)
    bfreqs = np.linspace(0.0, 25e6, 513)
    bspec = Spectrum(frequencies=bfreqs, psd=rng.random(513), source_fs=50e6,
                     segment_length=1024, overlap_fraction=0.5,
                     window="hann")
    mid = bfreqs[200]
    additivity = abs(
        (band_power(bspec, 0.0, mid) + band_power(bspec, mid, 25e6))
        / band_power(bspec, 0.0, 25e6) - 1.0)

    ok = (parseval < 0.05 and ppp_err < 1e-9 and intercept_rel < 1e-9
          and additivity < 1e-12)
    _line(8, "analysis oracles", ok,
          f"Parseval {parseval:.1e}, PPP err {ppp_err:.1e}, intercept "
          f"{intercept_rel:.1e}, additivity {additivity:.1e}")
    assert parseval < 0.05
    assert ppp_err < 1e-9
    assert intercept_rel < 1e-9
    assert additivity < 1e-12


# ---------------------------------------------------------------------------
# 9. exposure limit and confinement formulas


def test_criterion_09_safety_formulas():
    limit = mpe_skin(800.0)  # mJ/cm^2
    d, v_s, alpha = 234e-6, 1540.0, 1.4e-7
    rep = check_confinement(d, v_s, alpha, pulse_duration=5e-9)
    stress_rel = abs(rep.stress_time / (d / v_s) - 1.0)
    thermal_rel = abs(rep.thermal_time / (d * d / (4 * alpha)) - 1.0)
    ok = (round(limit, 1) == 31.7 and stress_rel <= 1e-12
          and thermal_rel <= 1e-12 and rep.stress_confined
          and rep.thermally_confined)
    _line(9, "safety formulas", ok,
          f"exposure limit {limit:.4f} mJ/cm^2, stress err {stress_rel:.1e},"
          f" thermal err {thermal_rel:.1e}")
    assert round(limit, 1) == 31.7, limit  # 3 significant figures
    assert stress_rel <= 1e-12 and thermal_rel <= 1e-12
    assert rep.stress_confined and rep.thermally_confined


# ---------------------------------------------------------------------------
# 10. byte-identical reruns


def test_criterion_10_reproducibility(tmp_path):
    spec = StudySpec(kind="size", sizes_um=(234.0,), settings=FULL, seed=0)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    run_size_study(spec, out_dir=out_a)
    run_size_study(spec, out_dir=out_b)
    names = sorted(p.name for p in out_a.iterdir())
    assert names == sorted(p.name for p in out_b.iterdir())
    same = [filecmp.cmp(out_a / n, out_b / n, shallow=False) for n in names]
    ok = all(same)
    _line(10, "byte-identical reruns", ok,
          f"{len(names)} files compared: {', '.join(names)}")
    for name, equal in zip(names, same):
        assert equal, f"{name} differs between identical runs"
