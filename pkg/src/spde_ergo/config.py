"""Sectioned ``key = value`` run configuration.

Sections are ``[grid]``, ``[time]``, ``[coefficients]``, ``[truncation]``,
``[noise]`` and ``[experiment]``.  Every key has a type and a default; unknown
keys are errors.  Parsing collects all problems before failing, and the fully
resolved configuration can be written back out and re-parsed unchanged.
"""

from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .coefficients import Polynomial, make_preset
from .errors import ConfigurationError, HypothesisViolation
from .grid_noise import SpatialGrid
from .solver import SimConfig


def _real(text):
    value = float(text)
    if math.isnan(value):
        raise ValueError("NaN is not allowed")
    return value


def _integer(text):
    return int(text.strip(), 0)


def _u64(text):
    value = int(text.strip(), 0)
    if not 0 <= value < 2**64:
        raise ValueError("must fit in an unsigned 64-bit integer")
    return value


def _boolean(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _reals(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(_real(p) for p in text.replace(";", ",").split(","))


def _optional(conv):
    def parse(text):
        if text.strip().lower() in ("", "auto", "none"):
            return None
        return conv(text)

    parse.optional = True
    return parse


def _choice(*options):
    def parse(text):
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return value

    return parse


PSI_CHOICES = ("mode_1", "tanh_mode_1", "indicator_mode_1")

# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "grid": {"n_cells": (_integer, 64)},
    "time": {"dt": (_real, 1e-4), "T": (_real, 1.0), "save_every": (_integer, 1)},
    "coefficients": {
        "preset": (_choice("burgers", "reaction_diffusion", "custom"), "burgers"),
        "sigma_const": (_real, 1.0),
        "sigma_amp": (_real, 0.0),
        "sigma_freq": (_real, 1.0),
        "b_coeffs": (_reals, ()),
        "b_sin_amp": (_real, 0.0),
        "b_sin_freq": (_real, 1.0),
        "g1_coeffs": (_reals, ()),
        "g2_coeffs": (_reals, ()),
        "K": (_real, 1.0),
        "L": (_real, 1.0),
        "k1": (_optional(_real), None),
        "k2": (_optional(_real), None),
        "mollification": (_optional(_integer), None),
        "c_cfl": (_real, 0.25),
    },
    "truncation": {"R": (_real, math.inf)},
    "noise": {"seed": (_u64, 0), "stream_id": (_u64, 0)},
    "experiment": {
        "initial_modes": (_reals, ()),
        "n_paths": (_integer, 1),
        "exit_levels": (_reals, ()),
        "burn_in": (_optional(_real), None),
        "bins": (_integer, 20),
        "f2_modes": (_reals, ()),
        "uniqueness": (_boolean, False),
        "n_boot": (_integer, 200),
        "target_modes": (_reals, (0.5,)),
        "radius": (_real, 1.0),
        "t1": (_optional(_real), None),
        "K": (_optional(_real), None),
        "include_b": (_boolean, False),
        "n_pilot": (_integer, 200),
        "psi": (_choice(*PSI_CHOICES), "tanh_mode_1"),
        "psi_scale": (_real, 1.0),
        "direction_modes": (_reals, (1.0,)),
        "n_samples": (_integer, 1000),
        "eps": (_real, 1e-3),
        "fd_reference": (_boolean, True),
        "kernel_modes": (_integer, 64),
        "dump_profiles": (_boolean, True),
    },
}


def format_value(value) -> str:
    """Inverse of the schema parsers; reals keep 17 significant digits."""
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return "inf" if value == math.inf else "-inf" if value == -math.inf else repr(value)
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    """Resolved configuration: the simulation config, experiment settings and raw values."""

    sim: SimConfig
    experiment: Dict[str, Any]
    values: Dict[str, Dict[str, Any]]

    def to_text(self) -> str:
        return dump_values(self.values)

    @property
    def grid(self) -> SpatialGrid:
        return self.sim.grid


def dump_values(values) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {format_value(values[section][key])}")
        lines.append("")
    return "\n".join(lines)


class ConfigErrors(ConfigurationError):
    """All problems found in one configuration."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


def _read_parser(text, source):
    parser = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    parser.optionxform = str  # keys are case sensitive (K vs k1)
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigErrors([f"{source}:{exc.lineno}: key outside of a [section] header"]) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigErrors([f"{source}:{exc.lineno}: {exc.message if hasattr(exc, 'message') else exc}"]) from None
    except configparser.ParsingError as exc:
        raise ConfigErrors([f"{source}:{lineno}: cannot parse line {line.strip()}" for lineno, line in exc.errors]) from None
    return parser


def _line_numbers(text):
    """Map (section, key) to its line number for error messages."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif "=" in s and section and not s.startswith(("#", ";")):
            out[(section, s.split("=", 1)[0].strip())] = i
    return out


def parse_text(text: str, source: str = "<config>", seed: Optional[int] = None) -> RunConfig:
    """Parse and validate configuration text; see :func:`parse_config`."""
    parser = _read_parser(text, source)
    lines = _line_numbers(text)
    errors: List[str] = []
    values: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        values[section] = {}
        given = parser[section] if parser.has_section(section) else {}
        for key in given:
            if key not in keys:
                where = lines.get((section, key))
                errors.append(f"{source}:{where}: unknown key {section}.{key}")
        for key, (conv, default) in keys.items():
            if key in given:
                try:
                    values[section][key] = conv(given[key])
                except ValueError as exc:
                    where = lines.get((section, key))
                    errors.append(f"{source}:{where}: {section}.{key}: {exc}")
                    # keep checking the rest against the default
                    values[section][key] = default
            else:
                values[section][key] = default
    if seed is not None:
        values["noise"]["seed"] = int(seed)
    return resolve(values, errors)


def _checks(values, errors):
    g, t, e = values["grid"], values["time"], values["experiment"]
    if g["n_cells"] < 4:
        errors.append("grid.n_cells must be an integer >= 4")
    if not t["dt"] > 0:
        errors.append("time.dt must be positive")
    elif not t["T"] >= t["dt"]:
        errors.append("time.T must be at least time.dt")
    if t["save_every"] < 1:
        errors.append("time.save_every must be >= 1")
    if not values["truncation"]["R"] > 0:
        errors.append("truncation.R must be positive")
    moll = values["coefficients"]["mollification"]
    if moll is not None and moll < 1:
        errors.append("coefficients.mollification must be >= 1")
    for key in ("n_paths", "bins", "n_boot", "n_pilot", "n_samples", "kernel_modes"):
        if e[key] < 1:
            errors.append(f"experiment.{key} must be >= 1")
    if not e["radius"] > 0:
        errors.append("experiment.radius must be positive")
    if not e["eps"] > 0:
        errors.append("experiment.eps must be positive")
    if e["t1"] is not None and not 0 < e["t1"] < t["T"]:
        errors.append("experiment.t1 must lie in (0, time.T)")
    n_int = g["n_cells"] - 1
    for key in ("initial_modes", "f2_modes", "target_modes", "direction_modes"):
        if len(e[key]) > n_int:
            errors.append(f"experiment.{key} lists more modes than the grid resolves ({n_int})")


def build_coefficients(c):
    params = dict(
        sigma_const=c["sigma_const"], sigma_amp=c["sigma_amp"], sigma_freq=c["sigma_freq"],
        K=c["K"], L=c["L"], k1=c["k1"], k2=c["k2"],
    )
    preset = c["preset"]
    if preset == "reaction_diffusion":
        params.update(b_coeffs=c["b_coeffs"] or (0.0, -1.0), b_sin_amp=c["b_sin_amp"], b_sin_freq=c["b_sin_freq"])
    elif preset == "custom":
        params.update(
            b=Polynomial(c["b_coeffs"] or (0.0,)),
            g1=Polynomial(c["g1_coeffs"] or (0.0,)),
            g2=Polynomial(c["g2_coeffs"] or (0.0,)),
        )
    return make_preset(preset, **params)


def resolve(values, errors=None) -> RunConfig:
    errors = [] if errors is None else errors
    _checks(values, errors)
    coeffs = None
    if values["coefficients"]["K"] <= 0 or values["coefficients"]["L"] <= 0:
        errors.append("coefficients.K and coefficients.L must be positive")
        raise ConfigErrors(errors)
    try:
        coeffs = build_coefficients(values["coefficients"])
    except HypothesisViolation as exc:
        errors.append(f"coefficients: {exc}")
    except ConfigurationError as exc:
        errors.append(f"coefficients: {exc}")
    if errors:
        raise ConfigErrors(errors)
    c = values["coefficients"]
    # fill scanned bounds so the resolved file states them explicitly
    c["k1"] = coeffs.k1
    c["k2"] = coeffs.k2
    e, t = values["experiment"], values["time"]
    if e["burn_in"] is None:
        e["burn_in"] = t["T"] / 10.0
    if e["t1"] is None:
        e["t1"] = t["T"] - 0.01 * t["T"]
    grid = SpatialGrid(values["grid"]["n_cells"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        sim = _sim_config(values, coeffs, grid, c, e, t)
    for w in caught:
        warnings.warn(str(w.message), RuntimeWarning, stacklevel=3)
    return RunConfig(sim, dict(e), values)


def _sim_config(values, coeffs, grid, c, e, t):
    return SimConfig(
        n_cells=values["grid"]["n_cells"],
        dt=t["dt"],
        T=t["T"],
        coefficients=coeffs,
        R=values["truncation"]["R"],
        mollification=c["mollification"],
        seed=values["noise"]["seed"],
        stream_id=values["noise"]["stream_id"],
        save_every=t["save_every"],
        initial=grid.from_modes(e["initial_modes"]),
        exit_levels=e["exit_levels"],
        c_cfl=c["c_cfl"],
    )


def parse_config(path, seed: Optional[int] = None) -> RunConfig:
    """Read and validate a configuration file.

    Raises :class:`ConfigErrors` listing every problem (with line numbers
    for syntax errors and ``section.key`` names otherwise); ``OSError`` if the
    file cannot be read.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_text(text, str(path), seed)
