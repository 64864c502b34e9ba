"""TOML problem configuration: parsing, defaults and the resolved echo.

Layout::

    horizon = 1.0

    [variables]
    n = 1
    m = 1

    [dynamics]
    f = ["-x1"]
    h = ["x1"]

    [sets.X]            # also E, E_T, L
    type = "box"        # or "ball"
    lower = [-1.0]
    upper = [1.0]
    # ball: center = [...], radius = r

    [relaxation]
    degree = 4

    [solver]
    tol = 1e-7
    max_iter = 200

    [selector]
    k = 1000
    grid_e = 201
    grid_l = 101

    [validator]
    e_count = 41
    l_count = 41
    x0_count = 25
    steps = 1000
    seed = 0
    polar = "auto"      # "auto", true or false
    extra_x0 = 0

    [output]
    dir = "out"
"""
from __future__ import annotations

import copy
import json

import tomli

from .poly import PolynomialParseError, UnknownVariableError
from .problem import ObserverProblem
from .semialg import make_ball, make_box

__all__ = ["ConfigError", "DEFAULTS", "load_config", "parse_config", "build_problem",
           "resolved_json"]

DEFAULTS = {
    "horizon": 1.0,
    "relaxation": {"degree": 4},
    "solver": {"tol": 1e-7, "max_iter": 200},
    "selector": {"k": 1000, "grid_e": 201, "grid_l": 101, "threads": 1},
    "validator": {"e_count": 41, "l_count": 41, "x0_count": 25, "steps": 1000, "seed": 0,
                  "polar": "auto", "extra_x0": 0},
    "output": {"dir": "out"},
}
REQUIRED = ("variables", "dynamics", "sets")
SET_NAMES = ("X", "E", "E_T", "L")
SET_KEYS = {"box": {"type", "lower", "upper"}, "ball": {"type", "center", "radius"}}


class ConfigError(ValueError):
    def __init__(self, section, msg):
        super().__init__(f"[{section}] {msg}")
        self.section = section


def _check_keys(section, table, allowed):
    if not isinstance(table, dict):
        raise ConfigError(section, "must be a table")
    extra = sorted(set(table) - set(allowed))
    if extra:
        raise ConfigError(section, f"unknown key(s): {', '.join(extra)}")


def _num(section, key, value, kind=float, low=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(section, f"{key} must be a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(section, f"{key} must be an integer, got {value!r}")
    value = kind(value)
    if low is not None and value < low:
        raise ConfigError(section, f"{key} must be >= {low}, got {value}")
    return value


def _vector(section, key, value, size):
    if not isinstance(value, list) or len(value) != size:
        raise ConfigError(section, f"{key} must be a list of {size} numbers")
    return [_num(section, key, v) for v in value]


def parse_config(data: dict) -> dict:
    """Validate a raw config mapping and fill every default; returns the resolved dict."""
    _check_keys("config", data, set(DEFAULTS) | set(REQUIRED))
    for name in REQUIRED:
        if name not in data:
            raise ConfigError(name, "section is missing")
    out = copy.deepcopy(DEFAULTS)
    out["horizon"] = _num("config", "horizon", data.get("horizon", DEFAULTS["horizon"]))
    if not out["horizon"] > 0:
        raise ConfigError("config", "horizon must be positive")

    var = data["variables"]
    _check_keys("variables", var, {"n", "m"})
    for key in ("n", "m"):
        if key not in var:
            raise ConfigError("variables", f"{key} is missing")
    n = _num("variables", "n", var["n"], int, 1)
    m = _num("variables", "m", var["m"], int, 1)
    out["variables"] = {"n": n, "m": m}

    dyn = data["dynamics"]
    _check_keys("dynamics", dyn, {"f", "h"})
    for key, size in (("f", n), ("h", m)):
        val = dyn.get(key)
        if not isinstance(val, list) or len(val) != size or not all(isinstance(s, str) for s in val):
            raise ConfigError("dynamics", f"{key} must be a list of {size} polynomial strings")
    out["dynamics"] = {"f": list(dyn["f"]), "h": list(dyn["h"])}

    sets = data["sets"]
    _check_keys("sets", sets, set(SET_NAMES))
    dims = {"X": n, "E": n, "E_T": n, "L": n * m}
    out["sets"] = {}
    for name in SET_NAMES:
        sec = f"sets.{name}"
        if name not in sets:
            raise ConfigError(sec, "section is missing")
        rec = sets[name]
        if not isinstance(rec, dict) or rec.get("type") not in SET_KEYS:
            raise ConfigError(sec, "type must be 'box' or 'ball'")
        _check_keys(sec, rec, SET_KEYS[rec["type"]])
        for key in SET_KEYS[rec["type"]] - {"type"}:
            if key not in rec:
                raise ConfigError(sec, f"{key} is missing")
        if rec["type"] == "box":
            out["sets"][name] = {"type": "box",
                                 "lower": _vector(sec, "lower", rec["lower"], dims[name]),
                                 "upper": _vector(sec, "upper", rec["upper"], dims[name])}
        else:
            out["sets"][name] = {"type": "ball",
                                 "center": _vector(sec, "center", rec["center"], dims[name]),
                                 "radius": _num(sec, "radius", rec["radius"])}

    for section in ("relaxation", "solver", "selector", "validator", "output"):
        given = data.get(section, {})
        _check_keys(section, given, DEFAULTS[section])
        out[section].update(given)
    out["relaxation"]["degree"] = _num("relaxation", "degree", out["relaxation"]["degree"], int, 1)
    out["solver"]["tol"] = _num("solver", "tol", out["solver"]["tol"])
    out["solver"]["max_iter"] = _num("solver", "max_iter", out["solver"]["max_iter"], int, 1)
    for key in ("k", "threads"):
        out["selector"][key] = _num("selector", key, out["selector"][key], int, 1)
    for key in ("grid_e", "grid_l"):
        out["selector"][key] = _num("selector", key, out["selector"][key], int, 2)
    for key in ("e_count", "l_count", "x0_count", "steps"):
        out["validator"][key] = _num("validator", key, out["validator"][key], int, 1)
    out["validator"]["seed"] = _num("validator", "seed", out["validator"]["seed"], int, 0)
    out["validator"]["extra_x0"] = _num("validator", "extra_x0", out["validator"]["extra_x0"], int, 0)
    if out["validator"]["polar"] not in ("auto", True, False):
        raise ConfigError("validator", "polar must be 'auto', true or false")
    if not isinstance(out["output"]["dir"], str):
        raise ConfigError("output", "dir must be a string")
    return out


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("config", f"invalid TOML: {exc}") from None
    return parse_config(data)


def _set_factory(rec, vars_of):
    if rec["type"] == "box":
        return lambda reg: make_box(reg, vars_of(reg), rec["lower"], rec["upper"])
    return lambda reg: make_ball(reg, vars_of(reg), rec["center"], rec["radius"])


def build_problem(cfg: dict) -> ObserverProblem:
    """Resolved config -> :class:`ObserverProblem` (errors mention the section)."""
    n = cfg["variables"]["n"]
    x = lambda reg: [f"x{i + 1}" for i in range(n)]
    e = lambda reg: [f"e{i + 1}" for i in range(n)]
    l = lambda reg: [v for v in reg.names if v.startswith("l")]
    factories = {name: _set_factory(cfg["sets"][name], {"X": x, "E": e, "E_T": e, "L": l}[name])
                 for name in SET_NAMES}
    try:
        return ObserverProblem.from_strings(cfg["dynamics"]["f"], cfg["dynamics"]["h"],
                                            factories["X"], factories["E"], factories["E_T"],
                                            factories["L"], cfg["horizon"])
    except (PolynomialParseError, UnknownVariableError) as exc:
        raise ConfigError("dynamics", str(exc)) from None
    except ValueError as exc:
        msg = str(exc)
        section = "dynamics" if msg.startswith(("f[", "h[")) else "sets"
        raise ConfigError(section, msg) from None


def resolved_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True) + "\n"
