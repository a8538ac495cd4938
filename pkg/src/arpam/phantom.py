"""Layered spherical head phantom on a regular voxel grid.

The phantom is a sphere of homogeneous brain wrapped in a thin spherical
skull shell, immersed in coupling water. Optical absorbers (chromophore
spheres such as hemoglobin or ICG inclusions) can be embedded in the brain.
Each voxel is labelled by the material at its *center*; a center exactly on
a boundary belongs to the inner region.

Units are SI throughout except where a field name says otherwise
(acoustic attenuation coefficients are carried in dB/(MHz^y cm) because
that is how they are usually tabulated).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError, UnknownMaterialError

LN10 = math.log(10.0)

# integer voxel labels; embedded absorbers get FIRST_ABSORBER_LABEL, +1, ...
LABEL_WATER = 0
LABEL_SKULL = 1
LABEL_BRAIN = 2
FIRST_ABSORBER_LABEL = 3

BASE_LABEL_NAMES = {LABEL_WATER: "water", LABEL_SKULL: "skull", LABEL_BRAIN: "brain"}


@dataclass(frozen=True)
class MaterialProperties:
    """Acoustic and optical bulk properties of one material.

    sound_speed      m/s
    density          kg/m^3
    alpha_db         acoustic attenuation coefficient, dB/(MHz^y cm)
    attenuation_exponent   power-law exponent y (shared by the wave solver)
    mu_a             optical absorption coefficient, 1/m
    mu_s             optical scattering coefficient, 1/m
    anisotropy_g     Henyey-Greenstein anisotropy factor
    extinction       molar extinction coefficient, 1/(cm M), chromophores only
    molar_mass       g/mol, chromophores only

    Acoustic fields may be None for chromophores that are tabulated only
    optically; voxels holding them inherit the surrounding brain acoustics.
    """

    name: str
    sound_speed: float | None = None
    density: float | None = None
    alpha_db: float | None = None
    attenuation_exponent: float = 1.05
    mu_a: float = 0.0
    mu_s: float = 0.0
    anisotropy_g: float = 0.9
    extinction: float | None = None
    molar_mass: float | None = None


# Bulk material table. Acoustic rows (attenuation, sound speed, density) are
# standard soft-tissue/skull values; densities are in kg/m^3 (1.90 and 1.03
# g/cm^3 for skull and brain). Scattering coefficients and g are model
# choices for a generic adult head at ~800 nm -- they are deliberately
# conservative and fully configurable, not fitted to any measurement.
MATERIALS: dict[str, MaterialProperties] = {
    "water": MaterialProperties(
        name="water", sound_speed=1480.0, density=1000.0, alpha_db=0.002,
        mu_a=0.0, mu_s=0.0, anisotropy_g=0.9,
    ),
    "skull": MaterialProperties(
        name="skull", sound_speed=4180.0, density=1900.0, alpha_db=20.0,
        mu_a=0.0, mu_s=20e3, anisotropy_g=0.9,
    ),
    "brain": MaterialProperties(
        name="brain", sound_speed=1550.0, density=1030.0, alpha_db=0.8,
        mu_a=0.0, mu_s=10e3, anisotropy_g=0.9,
    ),
    # chromophores: optical only, acoustically they ride on brain tissue
    "hemoglobin": MaterialProperties(
        name="hemoglobin", extinction=816.0, molar_mass=64500.0,
    ),
    "icg": MaterialProperties(
        name="icg", extinction=154550.0, molar_mass=775.0,
    ),
}


def material_lookup(label: str) -> MaterialProperties:
    """Return the bulk properties registered under ``label``."""
    try:
        return MATERIALS[label]
    except KeyError:
        known = ", ".join(sorted(MATERIALS))
        raise UnknownMaterialError(
            f"unknown material {label!r}; known materials: {known}"
        ) from None


def molar_mu_a(extinction: float, concentration: float) -> float:
    """Absorption coefficient of a dissolved chromophore, in 1/m.

    ``extinction`` is the (decadic) molar extinction coefficient in
    1/(cm M), ``concentration`` the molar concentration in mol/L. The
    natural-log absorption coefficient is ln(10) * extinction * C, converted
    from 1/cm to 1/m.
    """
    if extinction < 0:
        raise DomainError(f"extinction must be >= 0, got {extinction}")
    if concentration < 0:
        raise DomainError(f"concentration must be >= 0, got {concentration}")
    return LN10 * extinction * concentration * 100.0


def mass_to_molar(mass_g_per_l: float, molar_mass_g_per_mol: float) -> float:
    """Convert a mass concentration (g/L) to molar concentration (mol/L)."""
    if molar_mass_g_per_mol <= 0:
        raise DomainError("molar mass must be positive")
    if mass_g_per_l < 0:
        raise DomainError("mass concentration must be >= 0")
    return mass_g_per_l / molar_mass_g_per_mol


@dataclass(frozen=True)
class ThermoacousticConstants:
    """Thermal / thermoelastic constants used for pressure generation.

    gruneisen        dimensionless Grueneisen parameter
    beta             volumetric thermal expansion coefficient, 1/K
    c_p              specific heat capacity, J/(kg K)
    alpha_thermal    thermal diffusivity, m^2/s

    If beta, c_p and a sound speed are all supplied, gruneisen is
    cross-checked against beta * v_s^2 / c_p (or derived from it when not
    given explicitly).
    """

    gruneisen: float | None = None
    beta: float | None = None
    c_p: float | None = None
    alpha_thermal: float | None = None
    sound_speed: float | None = None

    def __post_init__(self):
        derivable = (
            self.beta is not None
            and self.c_p is not None
            and self.sound_speed is not None
        )
        if self.gruneisen is None:
            if not derivable:
                raise ConfigurationError(
                    "gruneisen not given and not derivable (need beta, c_p "
                    "and sound_speed)"
                )
            object.__setattr__(
                self, "gruneisen",
                self.beta * self.sound_speed**2 / self.c_p,
            )
        elif derivable:
            derived = self.beta * self.sound_speed**2 / self.c_p
            if abs(derived - self.gruneisen) > 1e-9 * max(abs(self.gruneisen), 1e-300):
                raise ConfigurationError(
                    f"inconsistent thermoacoustic constants: gruneisen "
                    f"{self.gruneisen} vs beta*v^2/c_p = {derived}"
                )
        if self.gruneisen < 0:
            raise ConfigurationError("gruneisen must be >= 0")


# Water around room temperature; gruneisen follows from beta * v^2 / c_p.
WATER_THERMO = ThermoacousticConstants(
    beta=2.07e-4, c_p=4181.0, alpha_thermal=1.4e-7, sound_speed=1480.0,
)

# Brain: a single constant Grueneisen value; thermal diffusivity ~ water.
BRAIN_THERMO = ThermoacousticConstants(gruneisen=0.8, alpha_thermal=1.4e-7)


@dataclass(frozen=True)
class Absorber:
    """A spherical chromophore inclusion inside the brain.

    center         (x, y, z) of the sphere center, m, grid frame
    radius         m
    material       label of a chromophore with an extinction entry
    concentration  molar concentration, mol/L
    """

    center: tuple[float, float, float]
    radius: float
    material: str
    concentration: float

    def __post_init__(self):
        if self.radius < 0:
            raise ConfigurationError("absorber radius must be >= 0")
        if self.concentration < 0:
            raise ConfigurationError("absorber concentration must be >= 0")
        mat = material_lookup(self.material)
        if mat.extinction is None:
            raise ConfigurationError(
                f"material {self.material!r} has no extinction coefficient; "
                "it cannot be used as a dissolved absorber"
            )


@dataclass(frozen=True)
class PhantomSpec:
    """Geometric description of the phantom and its sampling grid.

    head_radius, skull_thickness, brain_radius   m; brain + skull = head
    grid_spacing    isotropic voxel pitch, m
    grid_dims       number of voxels per axis
    head_center     head center in the grid frame, m. The grid frame puts
                    the center of voxel (0,0,0) at ``origin`` and the voxel
                    centers at origin + i*spacing. By default the head sits
                    at the geometric center of the grid.
    absorbers       chromophore inclusions, placed in listed order
    """

    head_radius: float = 5.0e-3
    skull_thickness: float = 0.5e-3
    brain_radius: float = 4.5e-3
    grid_spacing: float = 230e-6
    grid_dims: tuple[int, int, int] = (64, 64, 64)
    head_center: tuple[float, float, float] | None = None
    absorbers: tuple[Absorber, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.grid_spacing <= 0:
            raise ConfigurationError("grid spacing must be positive")
        if min(self.grid_dims) < 4:
            raise ConfigurationError("grid must be at least 4 voxels per axis")
        if self.head_radius <= 0 or self.skull_thickness <= 0:
            raise ConfigurationError("head radius and skull thickness must be positive")
        if abs(self.brain_radius + self.skull_thickness - self.head_radius) > 1e-12:
            raise ConfigurationError(
                f"brain_radius + skull_thickness must equal head_radius "
                f"({self.brain_radius} + {self.skull_thickness} != {self.head_radius})"
            )

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical box size spanned by the voxels, m."""
        return tuple(n * self.grid_spacing for n in self.grid_dims)

    def resolved_head_center(self) -> np.ndarray:
        if self.head_center is not None:
            return np.asarray(self.head_center, dtype=float)
        # geometric center of the voxel box
        return 0.5 * (np.asarray(self.grid_dims) - 1) * self.grid_spacing


@dataclass(frozen=True)
class PhantomGrid:
    """Voxelized phantom: labels plus per-voxel material property fields.

    All arrays share the grid shape and are read-only; operations that
    modify the phantom return a new instance.
    """

    spacing: float
    origin: np.ndarray          # coordinate of the center of voxel (0,0,0)
    labels: np.ndarray          # int16 material label per voxel
    label_names: dict[int, str]
    sound_speed: np.ndarray     # m/s
    density: np.ndarray         # kg/m^3
    alpha_db: np.ndarray        # dB/(MHz^y cm)
    attenuation_exponent: float
    mu_a: np.ndarray            # 1/m
    mu_s: np.ndarray            # 1/m
    anisotropy_g: np.ndarray    # dimensionless
    head_center: np.ndarray
    head_radius: float
    brain_radius: float

    def __post_init__(self):
        for arr in (self.labels, self.sound_speed, self.density, self.alpha_db,
                    self.mu_a, self.mu_s, self.anisotropy_g):
            arr.setflags(write=False)
        self.origin.setflags(write=False)
        self.head_center.setflags(write=False)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.labels.shape

    def axis_coords(self, axis: int) -> np.ndarray:
        """Voxel-center coordinates along one axis, m."""
        return self.origin[axis] + self.spacing * np.arange(self.dims[axis])

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable (x, y, z) voxel-center coordinate arrays."""
        x = self.axis_coords(0)[:, None, None]
        y = self.axis_coords(1)[None, :, None]
        z = self.axis_coords(2)[None, None, :]
        return x, y, z

    @property
    def voxel_volume(self) -> float:
        return self.spacing**3

    def counts(self) -> dict[str, int]:
        """Voxel count per label name (handy for sanity checks and dumps)."""
        out = {}
        for value, name in sorted(self.label_names.items()):
            out[name] = int(np.count_nonzero(self.labels == value))
        return out


def _fill_fields(labels, label_materials):
    """Broadcast per-label scalars into per-voxel arrays."""
    shape = labels.shape
    c = np.empty(shape)
    rho = np.empty(shape)
    alpha = np.empty(shape)
    mu_a = np.empty(shape)
    mu_s = np.empty(shape)
    g = np.empty(shape)
    for value, props in label_materials.items():
        mask = labels == value
        c[mask] = props["sound_speed"]
        rho[mask] = props["density"]
        alpha[mask] = props["alpha_db"]
        mu_a[mask] = props["mu_a"]
        mu_s[mask] = props["mu_s"]
        g[mask] = props["anisotropy_g"]
    return c, rho, alpha, mu_a, mu_s, g


def build_phantom(spec: PhantomSpec) -> PhantomGrid:
    """Voxelize a PhantomSpec into a PhantomGrid.

    The head (plus a water margin of at least two voxels) must fit inside
    the grid, otherwise the sphere would be clipped and the acoustics of
    the truncated shell would be silently wrong.
    """
    dims = tuple(int(n) for n in spec.grid_dims)
    origin = np.zeros(3)
    center = spec.resolved_head_center()

    extent = spec.extent
    for ax in range(3):
        lo = center[ax] - spec.head_radius
        hi = center[ax] + spec.head_radius
        margin = 2 * spec.grid_spacing
        if lo < origin[ax] - 0.5 * spec.grid_spacing + margin or \
           hi > origin[ax] - 0.5 * spec.grid_spacing + extent[ax] - margin:
            raise ConfigurationError(
                f"head (radius {spec.head_radius} m at {tuple(center)}) does not "
                f"fit inside the grid with a two-voxel water margin on axis {ax}: "
                f"grid extent {extent[ax]} m"
            )

    x = origin[0] + spec.grid_spacing * np.arange(dims[0])
    y = origin[1] + spec.grid_spacing * np.arange(dims[1])
    z = origin[2] + spec.grid_spacing * np.arange(dims[2])
    r2 = ((x[:, None, None] - center[0]) ** 2
          + (y[None, :, None] - center[1]) ** 2
          + (z[None, None, :] - center[2]) ** 2)

    labels = np.full(dims, LABEL_WATER, dtype=np.int16)
    labels[r2 <= spec.head_radius**2] = LABEL_SKULL
    labels[r2 <= spec.brain_radius**2] = LABEL_BRAIN

    label_names = dict(BASE_LABEL_NAMES)
    label_materials = {}
    for value, name in BASE_LABEL_NAMES.items():
        props = material_lookup(name)
        label_materials[value] = {
            "sound_speed": props.sound_speed,
            "density": props.density,
            "alpha_db": props.alpha_db,
            "mu_a": props.mu_a,
            "mu_s": props.mu_s,
            "anisotropy_g": props.anisotropy_g,
        }

    c, rho, alpha, mu_a, mu_s, g = _fill_fields(labels, label_materials)

    exponents = {material_lookup(n).attenuation_exponent for n in BASE_LABEL_NAMES.values()}
    if len(exponents) != 1:
        raise ConfigurationError(
            "all materials must share one acoustic attenuation exponent"
        )

    grid = PhantomGrid(
        spacing=spec.grid_spacing,
        origin=origin,
        labels=labels,
        label_names=label_names,
        sound_speed=c,
        density=rho,
        alpha_db=alpha,
        attenuation_exponent=exponents.pop(),
        mu_a=mu_a,
        mu_s=mu_s,
        anisotropy_g=g,
        head_center=np.asarray(center, dtype=float),
        head_radius=spec.head_radius,
        brain_radius=spec.brain_radius,
    )

    for absorber in spec.absorbers:
        grid = place_absorber(
            grid, absorber.center, absorber.radius,
            absorber.material, absorber.concentration,
        )
    return grid


def uniform_grid(dims, spacing: float, *, mu_a: float = 0.0, mu_s: float = 0.0,
                 anisotropy_g: float = 0.9, sound_speed: float = 1500.0,
                 density: float = 1000.0, alpha_db: float = 0.0,
                 attenuation_exponent: float = 1.05,
                 label_name: str = "medium") -> PhantomGrid:
    """Homogeneous block phantom -- the workhorse of oracle/validation scenes
    (Beer-Lambert slabs, scattering cubes, plane-wave boxes)."""
    dims = tuple(int(n) for n in dims)
    shape = dims
    full = np.full
    return PhantomGrid(
        spacing=spacing,
        origin=np.zeros(3),
        labels=np.zeros(shape, dtype=np.int16),
        label_names={0: label_name},
        sound_speed=full(shape, float(sound_speed)),
        density=full(shape, float(density)),
        alpha_db=full(shape, float(alpha_db)),
        attenuation_exponent=attenuation_exponent,
        mu_a=full(shape, float(mu_a)),
        mu_s=full(shape, float(mu_s)),
        anisotropy_g=full(shape, float(anisotropy_g)),
        head_center=0.5 * (np.asarray(dims) - 1) * spacing,
        head_radius=0.0,
        brain_radius=0.0,
    )


def place_absorber(grid: PhantomGrid, center, radius: float,
                   label: str, concentration: float) -> PhantomGrid:
    """Embed a spherical chromophore inclusion; returns a new grid.

    The sphere must lie entirely in brain-labelled voxels. Acoustically the
    inclusion keeps brain properties (a dissolved dye or blood pocket does
    not change the bulk acoustics at these scales); optically it gets
    mu_a from the chromophore's extinction and concentration while keeping
    the brain scattering background.
    """
    props = material_lookup(label)
    if props.extinction is None:
        raise ConfigurationError(
            f"material {label!r} has no extinction coefficient"
        )
    if radius < 0:
        raise ConfigurationError("absorber radius must be >= 0")
    if concentration < 0:
        raise ConfigurationError("concentration must be >= 0")
    if radius == 0.0:
        return grid

    center = np.asarray(center, dtype=float)
    x = grid.axis_coords(0)
    y = grid.axis_coords(1)
    z = grid.axis_coords(2)
    r2 = ((x[:, None, None] - center[0]) ** 2
          + (y[None, :, None] - center[1]) ** 2
          + (z[None, None, :] - center[2]) ** 2)
    inside = r2 <= radius**2

    if not inside.any():
        # a sphere smaller than half a voxel can miss every voxel center
        return grid

    bad = inside & (grid.labels != LABEL_BRAIN)
    if bad.any():
        names = sorted({grid.label_names[v] for v in np.unique(grid.labels[bad])})
        raise ConfigurationError(
            f"absorber {label!r} (radius {radius} m at {tuple(center)}) overlaps "
            f"non-brain voxels: {', '.join(names)}"
        )

    new_value = int(grid.labels.max()) + 1
    if new_value < FIRST_ABSORBER_LABEL:
        new_value = FIRST_ABSORBER_LABEL

    labels = grid.labels.copy()
    labels[inside] = new_value
    label_names = dict(grid.label_names)
    label_names[new_value] = label

    mu_a = grid.mu_a.copy()
    mu_a[inside] = molar_mu_a(props.extinction, concentration)

    return replace(
        grid,
        labels=labels,
        label_names=label_names,
        mu_a=mu_a,
        # acoustic fields and scattering inherit the brain values already
        # present in those voxels; copies keep the old grid untouched
        sound_speed=grid.sound_speed.copy(),
        density=grid.density.copy(),
        alpha_db=grid.alpha_db.copy(),
        mu_s=grid.mu_s.copy(),
        anisotropy_g=grid.anisotropy_g.copy(),
    )
