"""First-order k-space pseudospectral propagation of the photoacoustic
field.

The second-order wave equation is advanced as the equivalent coupled
first-order system (momentum, mass conservation split per axis, pressure
closure) because that form admits a split-field perfectly matched layer and
heterogeneous density directly:

    du_a/dt  = -(1/rho0) d p/d x_a          (staggered in space and time)
    drho_a/dt = -rho0 d u_a/d x_a
    p = c^2 (sum_a rho_a  + power-law absorption terms)

Spatial derivatives are spectral, with half-voxel shifts between the
pressure and velocity grids and the temporal correction kappa =
sinc(c_ref |k| dt / 2) that makes the scheme exact for homogeneous media at
c = c_ref. Acoustic absorption follows the fractional-Laplacian power-law
model (exponent y shared by all materials; loss and dispersion terms).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .errors import ConfigurationError, ShapeError, SolverInstabilityError
from .optics import InitialPressureField
from .phantom import PhantomGrid
from .sensing import SignalTrace

#: k-space correction reference speed when none is given: the interior
#: tissue speed, where most of the acoustic path lies
DEFAULT_C_REF = 1550.0

#: relative growth of max |p| beyond which the run is declared unstable
INSTABILITY_FACTOR = 1e6

_FFT_WORKERS = -1  # scipy.fft: use all available cores


def set_fft_workers(n: int) -> None:
    """Cap the FFT worker pool the solver uses. This is the only knob a
    thread-count option may touch: everything else (Monte Carlo batching in
    particular) is tied to reproducibility."""
    global _FFT_WORKERS
    if n < 1:
        raise ConfigurationError("FFT worker count must be >= 1")
    _FFT_WORKERS = int(n)


@dataclass(frozen=True)
class SolverConfig:
    """Time stepping, k-space reference, boundary layer, and absorption
    settings for one propagation run.

    dt                 s; None derives cfl * dx / c_max from the grid
    cfl                Courant number used when dt is derived
    c_ref              m/s correction reference; None uses DEFAULT_C_REF
    pml_thickness      boundary layer depth, voxels (>= 8)
    pml_attenuation    peak absorption, nepers per voxel (0 disables the
                       layer entirely while keeping its thickness)
    t_end              recording duration, s
    dimensionality     expected number of non-singleton grid axes; None
                       accepts whatever the grid provides
    match_frequency    Hz at which the power-law absorption reproduces the
                       material table's dB/(MHz cm) value exactly
    include_dispersion include the Kramers-Kronig companion term of the
                       power-law model. Off by default: its tan(pi y / 2)
                       prefactor diverges as y -> 1, and at bone-strength
                       attenuation with y = 1.05 it predicts absurd phase
                       speed shifts, so only the loss term is kept.
    """

    dt: float | None = None
    cfl: float = 0.3
    c_ref: float | None = None
    pml_thickness: int = 10
    pml_attenuation: float = 2.0
    t_end: float = 10e-6
    dimensionality: int | None = None
    match_frequency: float = 2.0e6
    include_dispersion: bool = False

    def __post_init__(self):
        if not 0 < self.cfl <= 1:
            raise ConfigurationError("cfl must be in (0, 1]")
        if self.dt is not None and self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.pml_thickness < 8:
            raise ConfigurationError("pml_thickness must be >= 8 voxels")
        if self.pml_attenuation < 0:
            raise ConfigurationError("pml_attenuation must be >= 0")
        if self.t_end <= 0:
            raise ConfigurationError("t_end must be positive")
        if self.dimensionality not in (None, 1, 2, 3):
            raise ConfigurationError("dimensionality must be 1, 2 or 3")
        if self.match_frequency <= 0:
            raise ConfigurationError("match_frequency must be positive")


@dataclass
class WaveState:
    """Field variables owned by one simulation (one array per active axis
    for the staggered velocities and the split density)."""

    pressure: np.ndarray
    velocities: list
    densities: list
    axes: tuple
    step: int = 0


def stable_dt(grid: PhantomGrid, cfl: float) -> float:
    """Largest stable time step, cfl * dx / max sound speed."""
    if not 0 < cfl <= 1:
        raise ConfigurationError("cfl must be in (0, 1]")
    return cfl * grid.spacing / float(grid.sound_speed.max())


def _db_to_neper(alpha_db, y: float):
    """dB/(MHz^y cm) -> Np (rad/s)^-y / m."""
    return 100.0 * alpha_db * (1e-6 / (2.0 * math.pi)) ** y \
        / (20.0 * math.log10(math.e))


def _pml_factor(n: int, thickness: int, peak: float, c_ref: float,
                dx: float, dt: float, staggered: bool) -> np.ndarray:
    """exp(-sigma dt / 2) along one axis; sigma ramps quartically from 0 at
    the layer's inner edge to peak * c_ref / dx at the outer boundary."""
    pos = np.arange(n, dtype=float) + (0.5 if staggered else 0.0)
    left = np.clip((thickness - pos) / thickness, 0.0, 1.0)
    right = np.clip((pos - (n - 1 - thickness)) / thickness, 0.0, 1.0)
    sigma = peak * (c_ref / dx) * np.maximum(left, right) ** 4
    return np.exp(-sigma * dt / 2.0)


def _axis_view(vec: np.ndarray, axis: int) -> np.ndarray:
    shape = [1, 1, 1]
    shape[axis] = vec.size
    return vec.reshape(shape)


def _staggered_density(rho0: np.ndarray, axis: int) -> np.ndarray:
    """Density at the half-voxel velocity positions: neighbour average with
    the final plane replicated (no wrap across the boundary)."""
    shifted = np.roll(rho0, -1, axis=axis)
    edge = [slice(None)] * rho0.ndim
    edge[axis] = -1
    inner = list(edge)
    inner[axis] = -1
    shifted[tuple(edge)] = rho0[tuple(inner)]
    return 0.5 * (rho0 + shifted)


class _Operators:
    """Everything precomputable for a (grid, config) pair."""

    def __init__(self, grid: PhantomGrid, config: SolverConfig):
        dims = grid.dims
        axes = tuple(a for a in range(3) if dims[a] > 1)
        if not axes:
            raise ConfigurationError("grid must extend along at least one axis")
        if config.dimensionality is not None \
                and config.dimensionality != len(axes):
            raise ConfigurationError(
                f"config expects {config.dimensionality}-D but the grid has "
                f"{len(axes)} non-singleton axes"
            )
        dx = grid.spacing
        c_max = float(grid.sound_speed.max())
        dt = config.dt if config.dt is not None \
            else stable_dt(grid, config.cfl)
        if dt > config.cfl * dx / c_max * (1.0 + 1e-9):
            raise ConfigurationError(
                f"dt = {dt:.3e} s exceeds the stability bound "
                f"{config.cfl * dx / c_max:.3e} s (cfl * dx / c_max)"
            )
        c_ref = config.c_ref if config.c_ref is not None else DEFAULT_C_REF

        self.grid = grid
        self.config = config
        self.axes = axes
        self.dx = dx
        self.dt = dt
        self.c_ref = c_ref
        self.real_shape = tuple(dims[a] for a in axes)

        # spectral axes: complex frequencies except the last (real FFT)
        kvecs = {}
        for a in axes:
            n = dims[a]
            freq = np.fft.rfftfreq(n, d=dx) if a == axes[-1] \
                else np.fft.fftfreq(n, d=dx)
            kvecs[a] = _axis_view(2.0 * math.pi * freq, a)
        kmag = np.sqrt(sum(kv**2 for kv in kvecs.values()))
        # sinc correction: exact temporal phase for c = c_ref
        kappa = np.sinc(c_ref * kmag * dt / (2.0 * math.pi))

        self.deriv_pos = []   # towards the staggered grid (+dx/2 shift)
        self.deriv_neg = []   # back to the regular grid (-dx/2 shift)
        for a in axes:
            shift = np.exp(1j * kvecs[a] * dx / 2.0)
            base = 1j * kvecs[a] * kappa
            self.deriv_pos.append(base * shift)
            self.deriv_neg.append(base / shift)

        rho0 = grid.density
        self.rho0 = rho0
        self.c2 = grid.sound_speed**2
        self.dt_over_rho_sg = [dt / _staggered_density(rho0, a) for a in axes]
        self.dt_rho0 = dt * rho0

        # power-law absorption operators (loss + dispersion), skipped when
        # the whole grid is lossless
        y = grid.attenuation_exponent
        self.absorbing = bool(np.any(grid.alpha_db > 0))
        if self.absorbing:
            if not 1.0 < y < 2.0:
                raise ConfigurationError(
                    f"power-law exponent {y} outside the supported (1, 2) "
                    "range of the fractional-Laplacian absorption model"
                )
            # rescale the tabulated dB/(MHz cm) values so the y-law gives
            # the same attenuation at match_frequency
            f_match = config.match_frequency / 1e6  # MHz
            alpha_db_eff = grid.alpha_db * f_match ** (1.0 - y)
            alpha0 = _db_to_neper(alpha_db_eff, y)
            c = grid.sound_speed
            self.absorb_tau = -2.0 * alpha0 * c ** (y - 1.0)
            with np.errstate(divide="ignore"):
                self.nabla1 = np.where(kmag > 0, kmag ** (y - 2.0), 0.0)
            self.dispersive = config.include_dispersion
            if self.dispersive:
                self.absorb_eta = 2.0 * alpha0 * c**y \
                    * math.tan(math.pi * y / 2.0)
                with np.errstate(divide="ignore"):
                    self.nabla2 = np.where(kmag > 0, kmag ** (y - 1.0), 0.0)

        if config.pml_attenuation > 0:
            for a in axes:
                if dims[a] <= 2 * config.pml_thickness:
                    raise ConfigurationError(
                        f"axis {a} ({dims[a]} voxels) cannot hold two "
                        f"{config.pml_thickness}-voxel boundary layers"
                    )
            self.pml_u = [
                _axis_view(_pml_factor(dims[a], config.pml_thickness,
                                       config.pml_attenuation, c_ref, dx, dt,
                                       staggered=True), a)
                for a in axes
            ]
            self.pml_rho = [
                _axis_view(_pml_factor(dims[a], config.pml_thickness,
                                       config.pml_attenuation, c_ref, dx, dt,
                                       staggered=False), a)
                for a in axes
            ]
        else:
            self.pml_u = None
            self.pml_rho = None

    # -- spectral helpers ---------------------------------------------------

    def fft(self, arr: np.ndarray) -> np.ndarray:
        return sfft.rfftn(arr, axes=self.axes, workers=_FFT_WORKERS)

    def ifft(self, spec: np.ndarray) -> np.ndarray:
        return sfft.irfftn(spec, s=self.real_shape, axes=self.axes,
                           workers=_FFT_WORKERS)

    def gradient_component(self, spec_p: np.ndarray, m: int) -> np.ndarray:
        """d p / d x_a on the axis-m staggered grid, from spectral p."""
        return self.ifft(self.deriv_pos[m] * spec_p)

    def divergence_component(self, u: np.ndarray, m: int) -> np.ndarray:
        """d u_a / d x_a back on the regular grid."""
        return self.ifft(self.deriv_neg[m] * self.fft(u))

    # -- state construction and stepping ------------------------------------

    def initial_state(self, p0: np.ndarray, initial_velocity=None
                      ) -> WaveState:
        nd = len(self.axes)
        densities = [p0 / (self.c2 * nd) for _ in self.axes]
        if initial_velocity is not None:
            if len(initial_velocity) != nd:
                raise ShapeError(
                    f"initial_velocity needs one field per active axis "
                    f"({nd}), got {len(initial_velocity)}"
                )
            velocities = [np.array(u, dtype=float) for u in initial_velocity]
            for u in velocities:
                if u.shape != p0.shape:
                    raise ShapeError("initial velocity fields must match "
                                     "the grid shape")
        else:
            # staggered half-step lead-in that splits P0 into two equal
            # counter-propagating waves
            spec = self.fft(p0)
            velocities = [
                0.5 * self.dt_over_rho_sg[m] * self.gradient_component(spec, m)
                for m in range(nd)
            ]
        return WaveState(pressure=p0.copy(), velocities=velocities,
                         densities=densities, axes=self.axes)

    def advance(self, state: WaveState) -> None:
        """One full staggered leapfrog step, in place."""
        spec_p = self.fft(state.pressure)
        for m in range(len(self.axes)):
            dpda = self.gradient_component(spec_p, m)
            u = state.velocities[m]
            if self.pml_u is not None:
                u *= self.pml_u[m]
                u -= self.dt_over_rho_sg[m] * dpda
                u *= self.pml_u[m]
            else:
                u -= self.dt_over_rho_sg[m] * dpda

        div_u = None
        for m in range(len(self.axes)):
            duda = self.divergence_component(state.velocities[m], m)
            if self.absorbing:
                div_u = duda.copy() if div_u is None else div_u + duda
            rho = state.densities[m]
            if self.pml_rho is not None:
                rho *= self.pml_rho[m]
                rho -= self.dt_rho0 * duda
                rho *= self.pml_rho[m]
            else:
                rho -= self.dt_rho0 * duda

        rho_total = state.densities[0].copy()
        for rho in state.densities[1:]:
            rho_total += rho
        if self.absorbing:
            loss = self.ifft(self.nabla1 * self.fft(self.rho0 * div_u))
            p = self.c2 * (rho_total + self.absorb_tau * loss)
            if self.dispersive:
                dispersion = self.ifft(self.nabla2 * self.fft(rho_total))
                p -= self.c2 * self.absorb_eta * dispersion
            state.pressure = p
        else:
            state.pressure = self.c2 * rho_total
        state.step += 1


def _interp_weights(points: np.ndarray, grid: PhantomGrid, axes: tuple,
                    exclude_pml: int) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear sampling as flat indices + weights, shape (npts, 2^nd)."""
    dims = grid.dims
    dx = grid.spacing
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    npts = points.shape[0]
    nd = len(axes)

    flat = np.zeros((npts, 1), dtype=np.int64)
    wts = np.ones((npts, 1))
    for a in range(3):
        s = (points[:, a] - grid.origin[a]) / dx
        if a not in axes:
            if np.any(np.abs(s) > 0.5 + 1e-9):
                raise ConfigurationError(
                    f"sensor coordinate off the grid along singleton axis {a}"
                )
            continue
        if np.any(s < -0.5 - 1e-9) or np.any(s > dims[a] - 0.5 + 1e-9):
            raise ConfigurationError("sensor point outside the grid box")
        lo_ok = s >= exclude_pml - 1e-9
        hi_ok = s <= dims[a] - 1 - exclude_pml + 1e-9
        if exclude_pml and not np.all(lo_ok & hi_ok):
            raise ConfigurationError(
                "sensor points must lie outside the absorbing boundary "
                f"layer ({exclude_pml} voxels on axis {a})"
            )
        i0 = np.clip(np.floor(s).astype(np.int64), 0, dims[a] - 2) \
            if dims[a] > 1 else np.zeros(npts, dtype=np.int64)
        frac = np.clip(s - i0, 0.0, 1.0)
        flat = np.concatenate([flat + (i0[:, None] * strides[a]),
                               flat + ((i0 + 1)[:, None] * strides[a])],
                              axis=1)
        wts = np.concatenate([wts * (1.0 - frac[:, None]),
                              wts * frac[:, None]], axis=1)
    assert flat.shape[1] == 2**nd
    return flat, wts


def propagate(p0: InitialPressureField, grid: PhantomGrid, points,
              config: SolverConfig, *, initial_velocity=None,
              diagnostics: list | None = None) -> list[SignalTrace]:
    """Run the solver and record the pressure at each sensor point.

    points             (n, 3) coordinates inside the grid (and outside the
                       boundary layer when one is active)
    initial_velocity   optional staggered velocity fields at t = -dt/2, one
                       per active axis (expert use: launching one-way waves)
    diagnostics        optional list; receives (step, time_s, max_abs_p)
                       tuples, one per recorded sample

    Returns one trace per point, sampled at 1/dt from t = 0 to t_end.
    """
    if p0.pressure.shape != grid.dims:
        raise ShapeError(
            f"initial pressure grid {p0.pressure.shape} does not match the "
            f"phantom grid {grid.dims}"
        )
    if not math.isclose(p0.spacing, grid.spacing, rel_tol=1e-12):
        raise ConfigurationError("initial pressure and phantom voxel "
                                 "spacings differ")
    ops = _Operators(grid, config)

    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError("sensor points must be an (n, 3) coordinate array")
    exclude = config.pml_thickness if config.pml_attenuation > 0 else 0
    flat_idx, weights = _interp_weights(pts, grid, ops.axes, exclude)

    n_steps = int(math.ceil(config.t_end / ops.dt - 1e-12))
    if n_steps < 1:
        raise ConfigurationError("t_end is shorter than one time step")

    state = ops.initial_state(np.array(p0.pressure, dtype=float),
                              initial_velocity=initial_velocity)

    recorded = np.empty((pts.shape[0], n_steps + 1))

    def sample(step: int) -> None:
        flat_p = state.pressure.ravel()
        recorded[:, step] = (flat_p[flat_idx] * weights).sum(axis=1)

    p_ref = float(np.abs(state.pressure).max())
    sample(0)
    if diagnostics is not None:
        diagnostics.append((0, 0.0, p_ref))

    for n in range(1, n_steps + 1):
        ops.advance(state)
        peak = float(np.abs(state.pressure).max())
        if not math.isfinite(peak) or (p_ref > 0
                                       and peak > INSTABILITY_FACTOR * p_ref):
            raise SolverInstabilityError(
                f"field blew up to {peak:.3e} Pa "
                f"({peak / p_ref if p_ref else math.inf:.2e}x initial)",
                step=n, time_s=n * ops.dt, peak=peak,
            )
        sample(n)
        if diagnostics is not None:
            diagnostics.append((n, n * ops.dt, peak))

    fs = 1.0 / ops.dt
    return [SignalTrace(samples=recorded[i], sampling_frequency=fs,
                        start_time=0.0) for i in range(pts.shape[0])]
