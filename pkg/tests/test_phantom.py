"""Phantom geometry, material table and chromophore absorption oracles."""

import math

import numpy as np
import pytest

from arpam.errors import ConfigurationError, DomainError, UnknownMaterialError
from arpam.phantom import (
    LABEL_BRAIN,
    LABEL_SKULL,
    LABEL_WATER,
    Absorber,
    PhantomSpec,
    ThermoacousticConstants,
    build_phantom,
    mass_to_molar,
    material_lookup,
    molar_mu_a,
    place_absorber,
)

# hand-computed oracle values, frozen
MU_A_816_1M = 187890.94358831415        # ln(10)*816*100, 1/m at 1 mol/L
MU_A_HB_150 = 436.9556827635212         # 1/m at 150 g/L, molar mass 64500
GRUNEISEN_WATER = 453.4128 / 4181.0     # 2.07e-4 * 1480^2 = 453.4128 exactly


def test_material_table_acoustics():
    water = material_lookup("water")
    assert water.sound_speed == 1480.0
    assert water.density == 1000.0
    assert water.alpha_db == 0.002

    skull = material_lookup("skull")
    assert skull.sound_speed == 4180.0
    assert skull.density == 1900.0
    assert skull.alpha_db == 20.0

    brain = material_lookup("brain")
    assert brain.sound_speed == 1550.0
    assert brain.density == 1030.0
    assert brain.alpha_db == 0.8


def test_material_table_chromophores():
    hb = material_lookup("hemoglobin")
    assert hb.extinction == 816.0
    assert hb.sound_speed is None   # rides on brain acoustics
    icg = material_lookup("icg")
    assert icg.extinction == 154550.0
    # the ratio drives the contrast-agent comparison study
    assert icg.extinction / hb.extinction == pytest.approx(189.4, rel=1e-3)


def test_unknown_material_lists_known():
    with pytest.raises(UnknownMaterialError) as err:
        material_lookup("bone")
    assert "brain" in str(err.value) and "icg" in str(err.value)


def test_molar_mu_a_frozen_values():
    assert molar_mu_a(816.0, 1.0) == pytest.approx(MU_A_816_1M, rel=1e-12)
    c_hb = mass_to_molar(150.0, 64500.0)
    assert molar_mu_a(816.0, c_hb) == pytest.approx(MU_A_HB_150, rel=1e-12)
    # 4.37 1/cm is the round-number sanity value for whole blood at ~800 nm
    assert molar_mu_a(816.0, c_hb) / 100.0 == pytest.approx(4.37, rel=1e-3)


def test_molar_mu_a_linearity_and_domain():
    rng = np.random.default_rng(42)
    for _ in range(50):
        eps = rng.uniform(1.0, 2e5)
        a, b = rng.uniform(0.0, 0.1, size=2)
        lhs = molar_mu_a(eps, a + b)
        rhs = molar_mu_a(eps, a) + molar_mu_a(eps, b)
        assert lhs == pytest.approx(rhs, rel=1e-12)
    assert molar_mu_a(816.0, 0.0) == 0.0
    with pytest.raises(DomainError):
        molar_mu_a(816.0, -1e-6)
    with pytest.raises(DomainError):
        molar_mu_a(-1.0, 1e-3)


def test_gruneisen_water_value():
    water = ThermoacousticConstants(
        beta=2.07e-4, c_p=4181.0, sound_speed=1480.0, alpha_thermal=1.4e-7,
    )
    assert water.gruneisen == pytest.approx(GRUNEISEN_WATER, rel=1e-12)
    assert water.gruneisen == pytest.approx(0.1084, abs=5e-5)


def test_thermo_constants_consistency_check():
    with pytest.raises(ConfigurationError):
        ThermoacousticConstants(
            gruneisen=0.5, beta=2.07e-4, c_p=4181.0, sound_speed=1480.0,
        )
    with pytest.raises(ConfigurationError):
        ThermoacousticConstants()  # nothing given, nothing derivable
    # explicit value alone is fine
    assert ThermoacousticConstants(gruneisen=0.8).gruneisen == 0.8


def test_phantom_spec_radius_budget():
    with pytest.raises(ConfigurationError):
        PhantomSpec(head_radius=5e-3, skull_thickness=0.5e-3, brain_radius=4.6e-3)


def test_head_must_fit_with_margin():
    with pytest.raises(ConfigurationError):
        build_phantom(PhantomSpec(grid_dims=(16, 16, 16), grid_spacing=230e-6))


def _brute_force_labels(grid, spec):
    """Independent re-derivation of the voxel labelling rule."""
    center = spec.resolved_head_center()
    expect = np.empty(grid.dims, dtype=np.int16)
    for i in range(grid.dims[0]):
        for j in range(grid.dims[1]):
            for k in range(grid.dims[2]):
                p = grid.origin + grid.spacing * np.array([i, j, k])
                r = math.dist(p, center)
                if r > spec.head_radius:
                    expect[i, j, k] = LABEL_WATER
                elif r > spec.brain_radius:
                    expect[i, j, k] = LABEL_SKULL
                else:
                    expect[i, j, k] = LABEL_BRAIN
    return expect


def test_labels_match_brute_force():
    spec = PhantomSpec(
        head_radius=2.0e-3, skull_thickness=0.5e-3, brain_radius=1.5e-3,
        grid_spacing=0.25e-3, grid_dims=(24, 24, 24),
    )
    grid = build_phantom(spec)
    expect = _brute_force_labels(grid, spec)
    assert np.array_equal(grid.labels, expect)
    counts = grid.counts()
    assert counts["water"] + counts["skull"] + counts["brain"] == 24**3


def test_boundary_voxel_belongs_to_inner_region():
    # head radius exactly 2 mm, spacing 1 mm: voxels at distance exactly
    # 2.0 mm from the center must be skull (inner region), not water
    spec = PhantomSpec(
        head_radius=2e-3, skull_thickness=0.5e-3, brain_radius=1.5e-3,
        grid_spacing=1e-3, grid_dims=(17, 17, 17),
        head_center=(8e-3, 8e-3, 8e-3),
    )
    grid = build_phantom(spec)
    assert grid.labels[10, 8, 8] == LABEL_SKULL
    assert grid.labels[11, 8, 8] == LABEL_WATER


def _small_brain_spec(**kw):
    return PhantomSpec(
        head_radius=3.0e-3, skull_thickness=0.5e-3, brain_radius=2.5e-3,
        grid_spacing=0.2e-3, grid_dims=(36, 36, 36), **kw,
    )


def test_place_absorber_voxel_count_and_mu_a():
    spec = _small_brain_spec()
    grid = build_phantom(spec)
    center = spec.resolved_head_center()
    radius = 0.8e-3
    conc = 150.0 / 64500.0
    placed = place_absorber(grid, center, radius, "hemoglobin", conc)

    # independent count of voxel centers inside the sphere
    n_expect = 0
    for i in range(grid.dims[0]):
        for j in range(grid.dims[1]):
            for k in range(grid.dims[2]):
                p = grid.origin + grid.spacing * np.array([i, j, k])
                if math.dist(p, center) <= radius:
                    n_expect += 1
    label_value = placed.labels.max()
    assert int(np.count_nonzero(placed.labels == label_value)) == n_expect
    assert placed.label_names[label_value] == "hemoglobin"

    inside = placed.labels == label_value
    assert np.allclose(placed.mu_a[inside], MU_A_HB_150, rtol=1e-12)
    # acoustics inherited from brain
    assert np.all(placed.sound_speed[inside] == 1550.0)
    assert np.all(placed.density[inside] == 1030.0)
    # original untouched
    assert np.count_nonzero(grid.labels == label_value) == 0


def test_place_absorber_zero_radius_is_noop():
    grid = build_phantom(_small_brain_spec())
    out = place_absorber(grid, (3e-3, 3e-3, 3e-3), 0.0, "icg", 1e-3)
    assert np.array_equal(out.labels, grid.labels)


def test_place_absorber_rejects_skull_overlap():
    spec = _small_brain_spec()
    grid = build_phantom(spec)
    center = spec.resolved_head_center() + np.array([2.3e-3, 0, 0])
    with pytest.raises(ConfigurationError, match="overlaps"):
        place_absorber(grid, center, 0.5e-3, "hemoglobin", 1e-3)


def test_absorbers_cannot_overlap_each_other():
    spec = _small_brain_spec()
    grid = build_phantom(spec)
    center = tuple(spec.resolved_head_center())
    grid = place_absorber(grid, center, 0.6e-3, "hemoglobin", 1e-3)
    with pytest.raises(ConfigurationError, match="overlaps"):
        place_absorber(grid, center, 0.6e-3, "icg", 1e-3)


def test_absorber_volume_scales_with_radius_cubed():
    spec = PhantomSpec(
        head_radius=4.0e-3, skull_thickness=0.5e-3, brain_radius=3.5e-3,
        grid_spacing=0.115e-3, grid_dims=(78, 78, 78),
    )
    grid = build_phantom(spec)
    center = spec.resolved_head_center()
    small = place_absorber(grid, center, 234e-6, "hemoglobin", 1e-3)
    big = place_absorber(grid, center, 936e-6, "hemoglobin", 1e-3)
    n_small = np.count_nonzero(small.labels == small.labels.max())
    n_big = np.count_nonzero(big.labels == big.labels.max())
    assert n_small > 0 and n_big > 0
    assert n_big / n_small == pytest.approx(64.0, rel=0.30)


def test_grid_arrays_are_read_only():
    grid = build_phantom(_small_brain_spec())
    with pytest.raises(ValueError):
        grid.labels[0, 0, 0] = 5
    with pytest.raises(ValueError):
        grid.mu_a[0, 0, 0] = 1.0


def test_absorber_dataclass_validation():
    with pytest.raises(ConfigurationError):
        Absorber(center=(0, 0, 0), radius=-1e-4, material="icg", concentration=1e-3)
    with pytest.raises(ConfigurationError):
        # water has no extinction coefficient
        Absorber(center=(0, 0, 0), radius=1e-4, material="water", concentration=1e-3)
    with pytest.raises(UnknownMaterialError):
        Absorber(center=(0, 0, 0), radius=1e-4, material="dye42", concentration=1e-3)
