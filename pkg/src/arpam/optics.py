"""Pulsed-laser light transport and photoacoustic source generation.

Two independent transport engines compute the absorbed optical energy
density A(r) [J/m^3] deposited by a single short pulse:

* ``solve_rte_neumann`` -- deterministic successive-scattering solution of
  the steady transport equation on a 26-direction lattice ordinate set.
  The unscattered (collimated) beam is propagated analytically with
  Beer-Lambert attenuation; each further order applies one scattering
  event (Henyey-Greenstein phase function) followed by an upwind sweep
  along every ordinate.
* ``simulate_mc_fluence`` -- Monte Carlo photon-packet transport with
  delta (null-collision) tracking on the voxel grid, implicit capture,
  Henyey-Greenstein sampling and Russian roulette.

Both are cross-validated against each other in the test suite; the Monte
Carlo engine additionally carries per-voxel statistical error estimates.

The pressure source follows as P0 = Gamma * A.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError
from .phantom import PhantomGrid, ThermoacousticConstants

FOUR_PI = 4.0 * math.pi

# ---------------------------------------------------------------------------
# scalar safety / scaling relations


def mpe_skin(wavelength_nm: float) -> float:
    """Maximum permissible single-pulse skin exposure, mJ/cm^2.

    Valid for 700--1050 nm where the limit scales as 20 * 10^(2(l-700)/1000)
    mJ/cm^2 (1--100 ns pulses). Outside that range a DomainError is raised
    rather than extrapolating.
    """
    if not 700.0 <= wavelength_nm <= 1050.0:
        raise DomainError(
            f"skin exposure limit formula is defined for 700-1050 nm, "
            f"got {wavelength_nm} nm"
        )
    return 20.0 * 10.0 ** (2.0 * (wavelength_nm - 700.0) / 1000.0)


@dataclass(frozen=True)
class ConfinementReport:
    """Stress/thermal confinement times for a heated region of size d."""

    stress_time: float      # d / v_s, s
    thermal_time: float     # d^2 / (4 alpha), s
    pulse_duration: float   # s
    stress_confined: bool
    thermally_confined: bool

    @property
    def confined(self) -> bool:
        return self.stress_confined and self.thermally_confined


def check_confinement(d: float, v_s: float, alpha_thermal: float,
                      pulse_duration: float) -> ConfinementReport:
    """Compare a pulse duration against stress and thermal confinement times.

    d              characteristic heated dimension, m
    v_s            sound speed in the heated tissue, m/s
    alpha_thermal  thermal diffusivity, m^2/s
    """
    if d <= 0 or v_s <= 0 or alpha_thermal <= 0 or pulse_duration <= 0:
        raise DomainError("confinement arguments must all be positive")
    t_stress = d / v_s
    t_thermal = d * d / (4.0 * alpha_thermal)
    return ConfinementReport(
        stress_time=t_stress,
        thermal_time=t_thermal,
        pulse_duration=pulse_duration,
        stress_confined=pulse_duration < t_stress,
        thermally_confined=pulse_duration < t_thermal,
    )


def gruneisen_from(beta: float, v_s: float, c_p: float) -> float:
    """Grueneisen parameter from expansion coefficient, sound speed, heat
    capacity: beta * v_s^2 / c_p."""
    if c_p <= 0:
        raise DomainError("heat capacity must be positive")
    return beta * v_s * v_s / c_p


# ---------------------------------------------------------------------------
# laser pulse description

#: relative slack when comparing fluence against the exposure limit, so that
#: a fluence quoted rounded to three significant figures (e.g. 31.7 mJ/cm^2
#: at 800 nm, limit 31.6979...) still validates
MPE_RTOL = 1e-3


@dataclass(frozen=True)
class LaserPulse:
    """One excitation pulse: geometry plus radiometry.

    wavelength_nm   nm (700-1050; needed for the exposure limit)
    pulse_duration  s
    fluence         incident fluence at the entry plane, J/m^2
    entry_point     beam-axis origin in the grid frame, m (the source plane
                    sits at ``standoff`` from the head surface)
    direction       unit propagation direction
    beam_radius     top-hat beam radius, m
    standoff        normal distance from source plane to head surface, m
    mpe_override    skip the exposure-limit validation (simulation studies
                    may legitimately exceed skin limits on purpose)
    """

    wavelength_nm: float
    pulse_duration: float
    fluence: float
    entry_point: tuple[float, float, float]
    direction: tuple[float, float, float] = (0.0, 0.0, -1.0)
    beam_radius: float = 234e-6
    standoff: float = 0.25e-3
    mpe_override: bool = False

    def __post_init__(self):
        if self.pulse_duration <= 0:
            raise ConfigurationError("pulse duration must be positive")
        if self.beam_radius <= 0:
            raise ConfigurationError("beam radius must be positive")
        if self.fluence < 0:
            raise ConfigurationError("fluence must be >= 0")
        d = np.asarray(self.direction, dtype=float)
        norm = float(np.linalg.norm(d))
        if norm == 0:
            raise ConfigurationError("beam direction must be a nonzero vector")
        object.__setattr__(self, "direction", tuple(d / norm))
        if not self.mpe_override:
            limit = mpe_skin(self.wavelength_nm) * 10.0  # mJ/cm^2 -> J/m^2
            if self.fluence > limit * (1.0 + MPE_RTOL):
                raise ConfigurationError(
                    f"fluence {self.fluence} J/m^2 exceeds the skin exposure "
                    f"limit {limit:.4g} J/m^2 at {self.wavelength_nm} nm; set "
                    f"mpe_override=True to run anyway"
                )

    @property
    def pulse_energy(self) -> float:
        """Total energy in the top-hat beam, J."""
        return self.fluence * math.pi * self.beam_radius**2


# ---------------------------------------------------------------------------
# direction set and phase function


def henyey_greenstein(cos_theta, g: float):
    """HG phase function value (per steradian, integrates to 1 over 4pi)."""
    return (1.0 - g * g) / (FOUR_PI * (1.0 + g * g - 2.0 * g * cos_theta) ** 1.5)


@dataclass(frozen=True)
class DirectionSet:
    """Discrete ordinates on the 26-neighbour lattice.

    offsets   integer voxel offsets, shape (26, 3)
    vectors   unit direction per ordinate, shape (26, 3)
    weights   quadrature weights, sum to 4pi
    """

    offsets: np.ndarray
    vectors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.offsets.setflags(write=False)
        self.vectors.setflags(write=False)
        self.weights.setflags(write=False)

    @classmethod
    def lattice26(cls) -> "DirectionSet":
        offs = [
            (i, j, k)
            for i in (-1, 0, 1)
            for j in (-1, 0, 1)
            for k in (-1, 0, 1)
            if (i, j, k) != (0, 0, 0)
        ]
        offsets = np.array(offs, dtype=int)
        vectors = offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
        weights = np.full(len(offs), FOUR_PI / len(offs))
        return cls(offsets=offsets, vectors=vectors, weights=weights)

    def index_of(self, direction) -> int:
        """Ordinate whose unit vector matches ``direction`` best (exact for
        lattice directions)."""
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        return int(np.argmax(self.vectors @ d))

    def scatter_kernel(self, g: float) -> np.ndarray:
        """Column-normalized redistribution matrix K[i, j]: fraction of the
        power scattered out of ordinate j that enters ordinate i."""
        cos_ij = np.clip(self.vectors @ self.vectors.T, -1.0, 1.0)
        raw = henyey_greenstein(cos_ij, g) * self.weights[:, None]
        return raw / raw.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# field containers


@dataclass
class RadianceField:
    """Direction-resolved result of the deterministic transport solve.

    values       per-ordinate track-length fluence divided by the ordinate
                 weight, shape (n_dirs, nx, ny, nz) -- so that
                 sum_q weights[q] * values[q] is the scattered fluence, J/m^2
    collimated   fluence of the unscattered beam, J/m^2
    """

    directions: DirectionSet
    values: np.ndarray
    collimated: np.ndarray
    spacing: float
    origin: np.ndarray
    orders_used: int
    converged: bool
    term_powers: list[float]
    ledger: dict

    def fluence(self) -> np.ndarray:
        """Total fluence (collimated + all scattering orders), J/m^2."""
        scattered = np.tensordot(self.directions.weights, self.values, axes=1)
        return scattered + self.collimated


@dataclass
class FluenceField:
    """Absorbed optical energy density and the local flux bookkeeping.

    absorbed             A(r), J/m^3
    transmitted_fraction F(r): fraction of the reference (entry) fluence
                         that did NOT reach the voxel, so that
                         A = mu_a * Phi_ref * (1 - F) holds per voxel
    reference_fluence    Phi_ref, J/m^2
    fluence              local fluence estimate, J/m^2
    stderr_rel           per-voxel relative standard error of ``absorbed``
                         (Monte Carlo only, None for deterministic solves)
    ledger               energy bookkeeping: injected/absorbed/escaped/...
    """

    absorbed: np.ndarray
    transmitted_fraction: np.ndarray
    reference_fluence: float
    spacing: float
    origin: np.ndarray
    fluence: np.ndarray | None = None
    stderr_rel: np.ndarray | None = None
    ledger: dict = field(default_factory=dict)

    def total_absorbed(self) -> float:
        """Deposited energy summed over the grid, J."""
        return float(self.absorbed.sum()) * self.spacing**3


@dataclass
class InitialPressureField:
    """Photoacoustic source P0 = Gamma * A, Pa."""

    pressure: np.ndarray
    spacing: float
    origin: np.ndarray
    gruneisen: float


def absorbed_energy(radiance: RadianceField, grid: PhantomGrid) -> FluenceField:
    """Absorbed energy density from a direction-resolved radiance solution:
    A(r) = mu_a(r) * fluence(r)."""
    if radiance.values.shape[1:] != grid.dims:
        raise ShapeError(
            f"radiance grid {radiance.values.shape[1:]} does not match "
            f"phantom grid {grid.dims}"
        )
    phi = radiance.fluence()
    absorbed = grid.mu_a * phi
    phi_ref = radiance.ledger.get("reference_fluence", 0.0)
    if phi_ref > 0:
        trans = 1.0 - phi / phi_ref
    else:
        trans = np.ones_like(phi)
    return FluenceField(
        absorbed=absorbed,
        transmitted_fraction=trans,
        reference_fluence=phi_ref,
        spacing=radiance.spacing,
        origin=radiance.origin,
        fluence=phi,
        stderr_rel=None,
        ledger=dict(radiance.ledger),
    )


def initial_pressure(fluence: FluenceField,
                     constants: ThermoacousticConstants) -> InitialPressureField:
    """Initial acoustic pressure P0 = Gamma * A for a stress-confined pulse.

    Gamma is the Grueneisen parameter of the absorbing tissue; voxels with
    zero absorbed energy produce zero pressure regardless.
    """
    return InitialPressureField(
        pressure=constants.gruneisen * fluence.absorbed,
        spacing=fluence.spacing,
        origin=fluence.origin,
        gruneisen=constants.gruneisen,
    )


# ---------------------------------------------------------------------------
# deterministic successive-scattering transport


def _beam_columns(grid: PhantomGrid, pulse: LaserPulse):
    """Entry geometry for an axis-aligned collimated beam.

    Returns (axis, step +-1, entry slice index, mask of illuminated columns,
    per-column entry energy). The beam direction must be aligned with a grid
    axis; the Monte Carlo engine has no such restriction.
    """
    d = np.asarray(pulse.direction)
    axis = int(np.argmax(np.abs(d)))
    if abs(abs(d[axis]) - 1.0) > 1e-12:
        raise ConfigurationError(
            "the deterministic transport solver requires a beam aligned "
            f"with a grid axis; got direction {tuple(d)}"
        )
    sign = 1 if d[axis] > 0 else -1

    entry = np.asarray(pulse.entry_point, dtype=float)
    lo = grid.origin - 0.5 * grid.spacing
    hi = lo + np.asarray(grid.dims) * grid.spacing
    eps = 1e-9 * grid.spacing  # face entry must survive rounding
    if np.any(entry < lo - eps) or np.any(entry > hi + eps):
        raise ConfigurationError(
            f"beam entry point {tuple(entry)} lies outside the grid box"
        )
    entry = np.clip(entry, lo, hi)

    # voxel layer containing the entry plane
    i_entry = int(np.clip(round((entry[axis] - grid.origin[axis]) / grid.spacing),
                          0, grid.dims[axis] - 1))
    # partial path from the entry point to the downstream face of that layer,
    # so attenuation starts exactly at the entry point (same convention as
    # the Monte Carlo engine)
    center = grid.origin[axis] + i_entry * grid.spacing
    if sign > 0:
        first_path = center + 0.5 * grid.spacing - entry[axis]
    else:
        first_path = entry[axis] - (center - 0.5 * grid.spacing)
    first_path = float(np.clip(first_path, 0.0, grid.spacing))

    perp = [ax for ax in range(3) if ax != axis]
    u = grid.axis_coords(perp[0]) - entry[perp[0]]
    v = grid.axis_coords(perp[1]) - entry[perp[1]]
    # fractional coverage of each voxel column by the beam disc (8x8
    # subsampling): interior columns carry exactly the incident fluence,
    # edge columns a proportional share
    sub = (np.arange(8) + 0.5) / 8.0 - 0.5
    uu = u[:, None] + sub[None, :] * grid.spacing      # (nu, 8)
    vv = v[:, None] + sub[None, :] * grid.spacing      # (nv, 8)
    inside = (uu[:, None, :, None] ** 2 + vv[None, :, None, :] ** 2) \
        <= pulse.beam_radius**2
    coverage = inside.mean(axis=(2, 3))
    disc_cols = (math.pi * pulse.beam_radius**2) / grid.spacing**2
    if not coverage.any():
        # beam narrower than the subsampling can see: nearest single column
        iu = int(np.argmin(np.abs(u)))
        iv = int(np.argmin(np.abs(v)))
        coverage = np.zeros((u.size, v.size))
        coverage[iu, iv] = disc_cols
    elif (u.min() - 0.5 * grid.spacing <= -pulse.beam_radius
          and u.max() + 0.5 * grid.spacing >= pulse.beam_radius
          and v.min() - 0.5 * grid.spacing <= -pulse.beam_radius
          and v.max() + 0.5 * grid.spacing >= pulse.beam_radius):
        # disc fully inside the grid: scale out the subsampling error so the
        # injected total equals the physical pulse energy exactly
        coverage *= disc_cols / coverage.sum()
    column_energy = pulse.fluence * grid.spacing**2
    return axis, sign, i_entry, first_path, coverage, column_energy


def _move_axis_first(arr, axis):
    return np.moveaxis(arr, axis, 0)


def solve_rte_neumann(grid: PhantomGrid, pulse: LaserPulse,
                      max_orders: int = 30, tol: float = 1e-3,
                      directions: DirectionSet | None = None,
                      delta_scaling: bool = True) -> RadianceField:
    """Successive-scattering (Neumann series) solution of the transport
    equation on the phantom grid.

    Order 0 is the collimated Beer-Lambert beam; order k+1 transports the
    power scattered out of order k, redistributed over the ordinate set by
    the Henyey-Greenstein kernel, with exponential attenuation and
    track-length tallies along every lattice ordinate.

    With ``delta_scaling`` (default) a strongly forward-peaked phase
    function is split into an exactly-forward delta share f = g^2 plus a
    smooth remainder with g' = g/(1+g) (delta-Eddington similarity). The
    delta share never leaves its ordinate, so it is folded into a reduced
    scattering coefficient mu_s(1-f); the coarse 26-direction set only has
    to resolve the mild remainder. Without it, a g ~ 0.9 lobe aliases onto
    the exact-forward ordinate and the beam stays artificially pencil-like.

    The series is truncated when the power entering the next order falls
    below ``tol`` times the injected power, or after ``max_orders`` orders
    (reported, not fatal, via ``converged``).
    """
    if max_orders < 1:
        raise ConfigurationError("max_orders must be >= 1")
    if tol <= 0:
        raise ConfigurationError("tolerance must be positive")
    dirs = directions or DirectionSet.lattice26()
    nq = len(dirs.weights)
    dims = grid.dims
    dx = grid.spacing
    vol = grid.voxel_volume

    mu_a = grid.mu_a
    mu_s = grid.mu_s

    if delta_scaling:
        f_delta = grid.anisotropy_g**2
        mu_s = mu_s * (1.0 - f_delta)
        g_eff = grid.anisotropy_g / (1.0 + grid.anisotropy_g)
    else:
        g_eff = grid.anisotropy_g

    mu_t = mu_a + mu_s
    with np.errstate(invalid="ignore", divide="ignore"):
        frac_a = np.where(mu_t > 0, mu_a / np.where(mu_t > 0, mu_t, 1.0), 0.0)
    frac_s = np.where(mu_t > 0, 1.0 - frac_a, 0.0)

    # one scattering kernel per distinct anisotropy among scattering voxels
    kernels: list[tuple[np.ndarray, np.ndarray]] = []  # (mask_flat, K)
    g_vals = np.unique(np.round(g_eff[mu_s > 0], 12))
    if g_vals.size == 0:
        g_vals = np.array([0.0])
    for g in g_vals:
        mask = (mu_s > 0) & (np.round(g_eff, 12) == g)
        kernels.append((mask.ravel(), dirs.scatter_kernel(float(g))))

    axis, sign, i_entry, first_path, beam_coverage, column_energy = _beam_columns(grid, pulse)

    # ---- order 0: collimated beam, marched analytically along the axis
    collimated = np.zeros(dims)        # track-length fluence, J/m^2
    absorbed = np.zeros(dims)          # deposited energy, J

    mu_t_a = _move_axis_first(mu_t, axis)
    frac_a_a = _move_axis_first(frac_a, axis)
    frac_s_a = _move_axis_first(frac_s, axis)
    coll_a = _move_axis_first(collimated, axis)
    abs_a = _move_axis_first(absorbed, axis)

    n_axis = dims[axis]
    planes = range(i_entry, n_axis) if sign > 0 else range(i_entry, -1, -1)
    stream = beam_coverage * column_energy
    injected = float(stream.sum())
    q_beam = dirs.index_of(pulse.direction)
    beam_scat = np.zeros(dims)
    beam_scat_a = _move_axis_first(beam_scat, axis)
    for i in planes:
        path = first_path if i == i_entry else dx
        tau = mu_t_a[i] * path
        one_minus_t = -np.expm1(-tau)
        interact = stream * one_minus_t
        abs_a[i] += interact * frac_a_a[i]
        beam_scat_a[i] += interact * frac_s_a[i]
        # track-length (average fluence * path) tally; tau->0 limit is path
        track = stream * np.where(tau > 1e-12, one_minus_t / np.maximum(mu_t_a[i], 1e-300), path)
        coll_a[i] += track / vol
        stream = stream - interact
    # whatever is left in `stream` has left the far side of the grid; it is
    # accounted for through the energy residual below

    # distribute the first-scattering source over ordinates
    beam_flat = beam_scat.reshape(-1)
    src = np.zeros((nq, beam_flat.size))
    for mask_flat, K in kernels:
        src[:, mask_flat] = K[:, q_beam:q_beam + 1] * beam_flat[mask_flat]
    src = src.reshape((nq,) + dims)

    # ---- precompute per-ordinate transmission factors
    values = np.zeros((nq,) + dims)
    steps = np.linalg.norm(dirs.offsets, axis=1) * dx

    term_powers: list[float] = []
    orders_used = 0
    converged = False

    for order in range(1, max_orders + 1):
        term_power = float(src.sum())
        term_powers.append(term_power)
        # truncate once the next order carries a negligible share of the
        # power injected into the grid
        if term_power <= tol * max(injected, 1e-300):
            converged = True
            break
        orders_used = order
        new_scat = np.zeros_like(src)

        for q in range(nq):
            off = dirs.offsets[q]
            ell = steps[q]
            tau = mu_t * ell
            trans = np.exp(-tau)
            one_minus_t = -np.expm1(-tau)
            # fraction of within-voxel emission that exits the voxel
            with np.errstate(invalid="ignore", divide="ignore"):
                exit_frac = np.where(tau > 1e-12, one_minus_t / np.maximum(tau, 1e-300), 1.0 - 0.5 * tau)
            # track length of own emission inside the voxel
            own_track = np.where(
                tau > 1e-12,
                (tau - one_minus_t) / np.maximum(mu_t**2 * ell, 1e-300),
                0.5 * ell,
            )

            sweep_axis = int(np.argmax(np.abs(off)))
            s_sign = int(np.sign(off[sweep_axis]))
            lat = [ax for ax in range(3) if ax != sweep_axis]
            shifts = (off[lat[0]], off[lat[1]])

            e_own = src[q]
            e_own_a = _move_axis_first(e_own, sweep_axis)
            trans_a = _move_axis_first(trans, sweep_axis)
            omt_a = _move_axis_first(one_minus_t, sweep_axis)
            exitf_a = _move_axis_first(exit_frac, sweep_axis)
            otrack_a = _move_axis_first(own_track, sweep_axis)
            mu_t_s = _move_axis_first(mu_t, sweep_axis)
            fa_a = _move_axis_first(frac_a, sweep_axis)
            fs_a = _move_axis_first(frac_s, sweep_axis)
            val_a = _move_axis_first(values[q], sweep_axis)
            nsc_a = _move_axis_first(new_scat[q], sweep_axis)
            ab_a = _move_axis_first(absorbed, sweep_axis)

            n = e_own_a.shape[0]
            order_idx = range(n) if s_sign > 0 else range(n - 1, -1, -1)
            psi = np.zeros(e_own_a.shape[1:])
            for i in order_idx:
                interact = psi * omt_a[i]
                ab_a[i] += interact * fa_a[i]
                nsc_a[i] += interact * fs_a[i]
                stream_track = psi * np.where(
                    mu_t_s[i] * ell > 1e-12,
                    omt_a[i] / np.maximum(mu_t_s[i], 1e-300),
                    ell,
                )
                val_a[i] += (stream_track + e_own_a[i] * otrack_a[i]) / vol
                own_kept = e_own_a[i] * (1.0 - exitf_a[i])
                ab_a[i] += own_kept * fa_a[i]
                nsc_a[i] += own_kept * fs_a[i]
                psi = psi * trans_a[i] + e_own_a[i] * exitf_a[i]
                # advance to the next plane: lateral shift with zero inflow
                if shifts != (0, 0):
                    psi = _shift_plane(psi, shifts)
            # psi leaving the last plane escapes; accounted via residual

        # redistribute the newly scattered power for the next order
        ns_flat = new_scat.reshape(nq, -1)
        nxt = np.zeros_like(ns_flat)
        for mask_flat, K in kernels:
            nxt[:, mask_flat] = K @ ns_flat[:, mask_flat]
        src = nxt.reshape((nq,) + dims)

    residual = float(src.sum())
    total_absorbed = float(absorbed.sum())
    ledger = {
        "injected": injected,
        "absorbed": total_absorbed,
        "residual_unconverged": residual,
        "escaped": injected - total_absorbed - residual,  # by energy balance
        "reference_fluence": pulse.fluence,
    }

    # convert per-ordinate track fluence into weight-normalized radiance
    values /= dirs.weights[:, None, None, None]

    return RadianceField(
        directions=dirs,
        values=values,
        collimated=collimated,
        spacing=dx,
        origin=grid.origin.copy(),
        orders_used=orders_used,
        converged=converged,
        term_powers=term_powers,
        ledger=ledger,
    )


def _shift_plane(plane: np.ndarray, shifts: tuple[int, int]) -> np.ndarray:
    """Shift a 2-D plane by integer offsets, zero-filling the inflow edge
    (power pushed past the far edge leaves the grid)."""
    out = np.zeros_like(plane)
    s0, s1 = shifts
    src0 = slice(max(0, -s0), plane.shape[0] - max(0, s0))
    dst0 = slice(max(0, s0), plane.shape[0] - max(0, -s0))
    src1 = slice(max(0, -s1), plane.shape[1] - max(0, s1))
    dst1 = slice(max(0, s1), plane.shape[1] - max(0, -s1))
    out[dst0, dst1] = plane[src0, src1]
    return out


# ---------------------------------------------------------------------------
# Monte Carlo transport (delta tracking)

ROULETTE_SURVIVAL = 0.1


def simulate_mc_fluence(grid: PhantomGrid, pulse: LaserPulse,
                        n_photons: int = 1_000_000, seed: int = 0,
                        workers: int = 8,
                        roulette_threshold: float = 1e-4,
                        max_steps: int = 200_000) -> FluenceField:
    """Monte Carlo estimate of the absorbed energy density A(r).

    Photon packets carry weight; at every tentative (delta-tracking)
    collision the local fluence tally gains w/mu_max, and at real collisions
    a fraction mu_a/mu_t of the weight is deposited (implicit capture)
    before Henyey-Greenstein redirection. Packets below
    ``roulette_threshold`` of their launch weight play Russian roulette
    (survival 0.1). Results are bitwise reproducible for a fixed
    (seed, workers) pair; each worker consumes an independent substream and
    also serves as one batch for the per-voxel standard error estimate.
    """
    if n_photons < 1:
        raise ConfigurationError("n_photons must be >= 1")
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    dims = grid.dims
    nvox = int(np.prod(dims))
    dx = grid.spacing
    vol = grid.voxel_volume

    mu_a_flat = grid.mu_a.ravel()
    mu_s_flat = grid.mu_s.ravel()
    mu_t_flat = mu_a_flat + mu_s_flat
    g_flat = grid.anisotropy_g.ravel()
    mu_max = float(mu_t_flat.max())

    energy = pulse.pulse_energy
    lo = grid.origin - 0.5 * dx  # box corner

    counts = [n_photons // workers] * workers
    for i in range(n_photons % workers):
        counts[i] += 1
    streams = np.random.SeedSequence(seed).spawn(workers)

    dep_batches = np.zeros((workers, nvox))
    flu_batches = np.zeros((workers, nvox))
    batch_energy = np.zeros(workers)
    escaped = 0.0
    terminated = 0.0
    roulette_net = 0.0

    d0 = np.asarray(pulse.direction, dtype=float)
    entry = np.asarray(pulse.entry_point, dtype=float)
    # orthonormal frame spanning the source disc
    a = np.array([1.0, 0.0, 0.0]) if abs(d0[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d0, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d0, e1)

    for b, (count, ss) in enumerate(zip(counts, streams)):
        if count == 0:
            continue
        rng = np.random.default_rng(ss)
        w0 = energy / n_photons
        batch_energy[b] = w0 * count

        if mu_max == 0.0:
            escaped += w0 * count
            continue

        r = pulse.beam_radius * np.sqrt(rng.random(count))
        phi = 2.0 * math.pi * rng.random(count)
        pos = (entry[None, :]
               + r[:, None] * (np.cos(phi)[:, None] * e1[None, :]
                               + np.sin(phi)[:, None] * e2[None, :]))
        dirn = np.broadcast_to(d0, (count, 3)).copy()
        w = np.full(count, w0)

        dep = dep_batches[b]
        flu = flu_batches[b]

        for _ in range(max_steps):
            if w.size == 0:
                break
            step = -np.log(rng.random(w.size)) / mu_max
            pos = pos + dirn * step[:, None]

            idx = np.floor((pos - lo[None, :]) / dx).astype(np.int64)
            inside = ((idx >= 0).all(axis=1)
                      & (idx[:, 0] < dims[0])
                      & (idx[:, 1] < dims[1])
                      & (idx[:, 2] < dims[2]))
            if not inside.all():
                escaped += float(w[~inside].sum())
                pos, dirn, w, idx = (pos[inside], dirn[inside],
                                     w[inside], idx[inside])
                if w.size == 0:
                    break

            flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
            flu += np.bincount(flat, weights=w, minlength=nvox)

            mu_t_here = mu_t_flat[flat]
            real = rng.random(w.size) * mu_max < mu_t_here
            if real.any():
                f_real = flat[real]
                mt = mu_t_here[real]
                dep_w = w[real] * mu_a_flat[f_real] / mt
                dep += np.bincount(f_real, weights=dep_w, minlength=nvox)
                w[real] -= dep_w  # implicit capture: keep the scattered share

                gg = g_flat[f_real]
                dirn[real] = _hg_scatter(dirn[real], gg, rng)

            # roulette also reaps packets whose weight hit exactly zero
            low = w <= roulette_threshold * w0
            if low.any():
                u = rng.random(int(low.sum()))
                survive = u < ROULETTE_SURVIVAL
                w_low = w[low]
                roulette_net += float(w_low[survive].sum() * (1.0 / ROULETTE_SURVIVAL - 1.0)
                                      - w_low[~survive].sum())
                w_new = np.where(survive, w_low / ROULETTE_SURVIVAL, 0.0)
                w[low] = w_new
                keep = w > 0.0
                pos, dirn, w = pos[keep], dirn[keep], w[keep]
        else:
            terminated += float(w.sum())

    # fluence from the delta-tracking collision estimator
    fluence = flu_batches.sum(axis=0) / (mu_max * vol) if mu_max > 0 else np.zeros(nvox)
    deposited = dep_batches.sum(axis=0)
    absorbed = (deposited / vol).reshape(dims)
    fluence = fluence.reshape(dims)

    # per-voxel relative standard error across worker batches
    stderr_rel = _batch_stderr(dep_batches, batch_energy, deposited)

    phi0 = pulse.fluence
    mu_a = grid.mu_a
    with np.errstate(invalid="ignore", divide="ignore"):
        trans_abs = 1.0 - absorbed / np.where(mu_a > 0, mu_a * phi0, 1.0)
    trans = np.where(
        mu_a > 0, trans_abs,
        1.0 - fluence / phi0 if phi0 > 0 else 1.0,
    )

    ledger = {
        "injected": energy,
        "absorbed": float(deposited.sum()),
        "escaped": escaped,
        "terminated": terminated,
        "roulette_net": roulette_net,
        "reference_fluence": phi0,
    }
    return FluenceField(
        absorbed=absorbed,
        transmitted_fraction=trans,
        reference_fluence=phi0,
        spacing=dx,
        origin=grid.origin.copy(),
        fluence=fluence,
        stderr_rel=stderr_rel.reshape(dims),
        ledger=ledger,
    )


def _batch_stderr(dep_batches: np.ndarray, batch_energy: np.ndarray,
                  total: np.ndarray) -> np.ndarray:
    """Relative standard error of the deposition estimate per voxel, from
    the spread across worker batches (normalized by batch energy)."""
    nb = dep_batches.shape[0]
    if nb < 2:
        return np.full(dep_batches.shape[1], np.inf)
    live = batch_energy > 0
    if live.sum() < 2:
        return np.full(dep_batches.shape[1], np.inf)
    norm = dep_batches[live] / batch_energy[live, None]
    mean = norm.mean(axis=0)
    var = norm.var(axis=0, ddof=1) / live.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.sqrt(var) / mean
    return np.where(mean > 0, rel, np.inf)


def _hg_scatter(dirn: np.ndarray, g: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """Redirect packet directions by Henyey-Greenstein sampling."""
    n = dirn.shape[0]
    u = rng.random(n)
    iso = np.abs(g) < 1e-12
    cos_t = np.empty(n)
    cos_t[iso] = 2.0 * u[iso] - 1.0
    ga = g[~iso]
    term = (1.0 - ga * ga) / (1.0 - ga + 2.0 * ga * u[~iso])
    cos_t[~iso] = (1.0 + ga * ga - term * term) / (2.0 * ga)
    np.clip(cos_t, -1.0, 1.0, out=cos_t)
    sin_t = np.sqrt(1.0 - cos_t**2)
    phi = 2.0 * math.pi * rng.random(n)
    cos_p, sin_p = np.cos(phi), np.sin(phi)

    ux, uy, uz = dirn[:, 0], dirn[:, 1], dirn[:, 2]
    near_pole = np.abs(uz) > 0.99999
    denom = np.sqrt(np.maximum(1.0 - uz * uz, 1e-300))

    out = np.empty_like(dirn)
    out[:, 0] = sin_t * (ux * uz * cos_p - uy * sin_p) / denom + ux * cos_t
    out[:, 1] = sin_t * (uy * uz * cos_p + ux * sin_p) / denom + uy * cos_t
    out[:, 2] = -sin_t * cos_p * denom + uz * cos_t

    # packets travelling almost exactly along z need the degenerate frame
    if near_pole.any():
        sgn = np.sign(uz[near_pole])
        out[near_pole, 0] = sin_t[near_pole] * cos_p[near_pole]
        out[near_pole, 1] = sin_t[near_pole] * sin_p[near_pole]
        out[near_pole, 2] = sgn * cos_t[near_pole]

    # renormalize against drift
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


def born_absorbed_energy(grid: PhantomGrid, background_fluence: np.ndarray,
                         reference_fluence: float, spacing: float,
                         origin: np.ndarray, ledger: dict | None = None) -> FluenceField:
    """First-order (optically thin) deposition: A = mu_a * Phi_background.

    ``background_fluence`` must come from a transport solve in which the
    chromophore absorption was removed (scattering kept), so the deposition
    is exactly linear in the chromophore concentration. Valid when
    mu_a * inclusion size << 1; used by the contrast-agent studies where the
    response of interest is the linear one.
    """
    if background_fluence.shape != grid.dims:
        raise ShapeError("background fluence grid does not match phantom grid")
    absorbed = grid.mu_a * background_fluence
    with np.errstate(invalid="ignore", divide="ignore"):
        trans = 1.0 - background_fluence / reference_fluence if reference_fluence > 0 \
            else np.ones_like(background_fluence)
    return FluenceField(
        absorbed=absorbed,
        transmitted_fraction=trans,
        reference_fluence=reference_fluence,
        spacing=spacing,
        origin=origin.copy(),
        fluence=background_fluence,
        stderr_rel=None,
        ledger=dict(ledger or {}),
    )
