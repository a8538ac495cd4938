"""Declarative run configuration: strict TOML with explicit unit suffixes.

Every physical key carries its unit in the name (``depths_mm``,
``pulse_duration_ns``, ``fluence_mj_per_cm2``); bare physical keys are
rejected with a message naming the suffixed key, and unknown keys or
sections are errors. A minimal file containing only the study kind gets
the full default parameter set: the reference pulse (5 ns, 800 nm, skin
exposure limit), the 97-element 1.4 mm detection cap with 3 MHz bandwidth,
and the coarse 230 um grid option over the same physical volume that the
high-resolution studies use.
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import math
from dataclasses import dataclass

from .errors import ConfigurationError
from .experiments import PipelineSettings, StudySpec

# f64 round-trips through repr, so serialize(parse(x)) is stable
_SECTIONS = ("run", "study", "phantom", "laser", "array", "solver",
             "optics", "analysis")

# key -> (type tag, default); "float?" marks an optional quantity whose
# absence means "derive it" (exposure-limit fluence, stability-bound dt)
_SCHEMA = {
    "run": {
        "out_dir": ("str", "out"),
        "plots": ("bool", False),
        "threads": ("int", 1),
        "verbose": ("bool", False),
    },
    "study": {
        "kind": ("str", "size"),
        "seed": ("int", 0),
        "sizes_um": ("float_list", [234.0, 468.0, 702.0, 936.0]),
        "concentrations_g_per_l": ("float_list", [0.5e-3, 0.5, 5.0, 50.0]),
        "depths_mm": ("float_list", [1.1, 1.3, 1.5]),
        "absorber_depth_mm": ("float", 1.5),
        "absorber_radius_um": ("float", 234.0),
        "hemoglobin_g_per_l": ("float", 150.0),
        "equal_molar_mol_per_l": ("float", 1.0e-5),
        "linear_limit_g_per_l": ("float", 10.0),
    },
    "phantom": {
        "grid_dims": ("int_list", [48, 48, 48]),
        "grid_spacing_um": ("float", 230.0),
        "head_radius_mm": ("float", 4.0),
        "skull_thickness_mm": ("float", 0.5),
        "head_shift_mm": ("float", -0.8),
    },
    "laser": {
        "wavelength_nm": ("float", 800.0),
        "pulse_duration_ns": ("float", 5.0),
        "fluence_mj_per_cm2": ("float?", None),
    },
    "array": {
        "n_elements": ("int", 97),
        "radius_mm": ("float", 1.4),
        "half_angle_deg": ("float", 60.0),
        "max_frequency_mhz": ("float", 3.0),
    },
    "solver": {
        "cfl": ("float", 0.3),
        "dt_ns": ("float?", None),
        "pml_thickness": ("int", 8),
        "pml_attenuation": ("float", 2.0),
        "t_end_us": ("float", 6.0),
    },
    "optics": {
        "method": ("str", "rte"),
        "rte_max_orders": ("int", 40),
        "rte_tol": ("float", 1.0e-3),
        "mc_photons": ("int", 1_000_000),
        "mc_workers": ("int", 8),
    },
    "analysis": {
        "welch_nfft": ("int", 4096),
        "peak_nfft": ("int", 8192),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """One fully resolved invocation: the study to run plus output and
    execution options. Values are exactly the (suffixed) config units."""

    study: StudySpec
    out_dir: str = "out"
    plots: bool = False
    threads: int = 1
    verbose: bool = False
    raw: tuple = ()  # ((section, key, value), ...) after defaulting

    def raw_dict(self) -> dict:
        doc: dict = {}
        for section, key, value in self.raw:
            doc.setdefault(section, {})[key] = value
        return doc


def _stem(key: str) -> str:
    for suffix in ("_um", "_mm", "_nm", "_ns", "_us", "_mhz", "_deg",
                   "_mj_per_cm2", "_g_per_l", "_mol_per_l"):
        if key.endswith(suffix):
            return key[: -len(suffix)]
    return key


def _unknown_key_error(section: str, key: str) -> ConfigurationError:
    # a bare physical stem gets a unit-violation message naming the real key
    for known in _SCHEMA[section]:
        stem = _stem(known)
        if stem != known and key in (stem, stem.rstrip("s")):
            return ConfigurationError(
                f"[{section}].{key}: physical quantities need an explicit "
                f"unit suffix; use '{known}'"
            )
    valid = ", ".join(sorted(_SCHEMA[section]))
    return ConfigurationError(
        f"unknown key '{key}' in [{section}]; valid keys: {valid}"
    )


def _coerce(section: str, key: str, tag: str, value):
    path = f"[{section}].{key}"
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path} must be a boolean, got "
                                     f"{value!r}")
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path} must be an integer, got "
                                     f"{value!r}")
        return value
    if tag in ("float", "float?"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path} must be a number, got "
                                     f"{value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigurationError(f"{path} must be finite")
        return value
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigurationError(f"{path} must be a string, got "
                                     f"{value!r}")
        return value
    if tag in ("float_list", "int_list"):
        if not isinstance(value, list) or not value:
            raise ConfigurationError(f"{path} must be a non-empty array")
        item_tag = tag.split("_")[0]
        return [_coerce(section, key, item_tag, v) for v in value]
    raise AssertionError(f"unhandled schema tag {tag}")


def _resolve(doc: dict) -> dict:
    """Validate a parsed TOML document against the schema and fill
    defaults; returns {section: {key: value}} with every key present."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be a table")
    for section in doc:
        if section not in _SCHEMA:
            valid = ", ".join(_SECTIONS)
            raise ConfigurationError(
                f"unknown section [{section}]; valid sections: {valid}"
            )
        if not isinstance(doc[section], dict):
            raise ConfigurationError(f"[{section}] must be a table")
    resolved = {}
    for section, keys in _SCHEMA.items():
        given = doc.get(section, {})
        for key in given:
            if key not in keys:
                raise _unknown_key_error(section, key)
        out = {}
        for key, (tag, default) in keys.items():
            if key in given:
                out[key] = _coerce(section, key, tag, given[key])
            else:
                out[key] = default if not isinstance(default, list) \
                    else list(default)
        resolved[section] = out
    return resolved


def _build_settings(r: dict) -> PipelineSettings:
    ph, la, ar, so, op, an = (r["phantom"], r["laser"], r["array"],
                              r["solver"], r["optics"], r["analysis"])
    dims = ph["grid_dims"]
    if len(dims) != 3:
        raise ConfigurationError("[phantom].grid_dims needs three entries")
    fluence = la["fluence_mj_per_cm2"]
    dt = so["dt_ns"]
    return PipelineSettings(
        grid_dims=tuple(dims),
        grid_spacing=ph["grid_spacing_um"] * 1e-6,
        head_radius=ph["head_radius_mm"] * 1e-3,
        skull_thickness=ph["skull_thickness_mm"] * 1e-3,
        head_shift=ph["head_shift_mm"] * 1e-3,
        wavelength_nm=la["wavelength_nm"],
        pulse_duration=la["pulse_duration_ns"] * 1e-9,
        fluence_j_per_m2=None if fluence is None else fluence * 10.0,
        n_elements=ar["n_elements"],
        array_radius=ar["radius_mm"] * 1e-3,
        array_half_angle=math.radians(ar["half_angle_deg"]),
        max_frequency=ar["max_frequency_mhz"] * 1e6,
        cfl=so["cfl"],
        solver_dt=None if dt is None else dt * 1e-9,
        pml_thickness=so["pml_thickness"],
        pml_attenuation=so["pml_attenuation"],
        t_end=so["t_end_us"] * 1e-6,
        optics_method=op["method"],
        rte_max_orders=op["rte_max_orders"],
        rte_tol=op["rte_tol"],
        mc_photons=op["mc_photons"],
        mc_workers=op["mc_workers"],
        welch_nfft=an["welch_nfft"],
        peak_nfft=an["peak_nfft"],
    )


def _build_config(resolved: dict) -> RunConfig:
    st = resolved["study"]
    spec = StudySpec(
        kind=st["kind"],
        sizes_um=tuple(st["sizes_um"]),
        concentrations_g_per_l=tuple(st["concentrations_g_per_l"]),
        depths_mm=tuple(st["depths_mm"]),
        absorber_depth_mm=st["absorber_depth_mm"],
        absorber_radius_um=st["absorber_radius_um"],
        hemoglobin_g_per_l=st["hemoglobin_g_per_l"],
        equal_molar_mol_per_l=st["equal_molar_mol_per_l"],
        linear_limit_g_per_l=st["linear_limit_g_per_l"],
        settings=_build_settings(resolved),
        seed=st["seed"],
    )
    run = resolved["run"]
    if run["threads"] < 1:
        raise ConfigurationError("[run].threads must be >= 1")
    raw = tuple((section, key, value if not isinstance(value, list)
                 else tuple(value))
                for section in _SECTIONS
                for key, value in resolved[section].items())
    return RunConfig(study=spec, out_dir=run["out_dir"], plots=run["plots"],
                     threads=run["threads"], verbose=run["verbose"], raw=raw)


def parse_config_text(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:  # message carries line/column
        raise ConfigurationError(f"config parse error: {exc}") from None
    return _build_config(_resolve(doc))


def parse_config(path) -> RunConfig:
    """Read, validate, and fully default a config file."""
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: "
                                 f"{exc.strerror}") from None
    return parse_config_text(text)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize {type(value).__name__} "
                             "into a config file")


def serialize_config(config: RunConfig) -> str:
    """Render a RunConfig back to TOML; parsing the result reproduces an
    equal RunConfig (optional keys that were left unset stay omitted)."""
    doc = config.raw_dict()
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            value = doc[section][key]
            if value is None:
                continue  # optional quantity left to its derivation rule
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)
