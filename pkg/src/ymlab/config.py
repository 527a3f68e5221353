"""Run configuration: INI text with a fixed schema, plus the built-in presets.

Every key has a type and a documented default (see :data:`SCHEMA`); unknown
sections or keys are rejected with the offending line number.  ``auto`` is
accepted wherever the default is ``auto`` and means "derive from the
lattice" (see the key's doc string).
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from typing import Any, Callable

from .flow import FlowConfig
from .hym import ComplexTorusGeometry, HymConfig
from .lattice import LatticeGeometry, TwistCocycle, build_torus
from .monitors import MonitorConfig


class ConfigError(ValueError):
    pass


AUTO = "auto"


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | str | bool | ints | floats | float? | choice
    default: Any
    doc: str
    choices: tuple[str, ...] = ()


SCHEMA: dict[str, dict[str, Key]] = {
    "experiment": {
        "preset": Key("str", "custom", "name recorded in the summary"),
        "mode": Key("choice", "ym", "ym: Yang-Mills flow of a connection; hym: metric flow",
                    ("ym", "hym")),
        "description": Key("str", "", "free text"),
    },
    "geometry": {
        "n": Key("int", 3, "real dimension of the torus (even for hym)"),
        "sizes": Key("ints", (8,), "sites per axis; one value is used for every axis"),
        "spacing": Key("float?", AUTO, "lattice spacing a; auto gives a unit torus (a = 1/sizes[0])"),
    },
    "bundle": {
        "rank": Key("int", 1, "fiber rank r"),
        "kind": Key("choice", "complex", "unitary (complex) or orthogonal (real) structure group",
                    ("complex", "real")),
        "twists": Key("str", "", "fluxes as 'mu-nu:k' items separated by commas, e.g. '0-1:1'"),
    },
    "initial": {
        "kind": Key("choice", "zero", "zero | random | bump | file (ym); identity | random | file (hym)",
                    ("zero", "random", "bump", "file", "identity")),
        "amplitude": Key("float", 0.0, "noise amplitude (random) or bump multiplier (bump)"),
        "scale": Key("float", 0.0, "bump scale lambda"),
        "seed": Key("int", 0, "RNG seed"),
        "energy": Key("float?", None, "bump only: rescale the amplitude to hit this energy"),
        "min_sites": Key("float", 4.0, "bump only: smallest allowed scale in lattice spacings"),
        "modes": Key("int", 2, "hym random metric: number of Fourier modes per axis"),
        "path": Key("str", "", "file only: checkpoint holding the initial field"),
    },
    "flow": {
        "scheme": Key("choice", "heun", "time integrator", ("euler", "heun", "rk4")),
        "dt_init": Key("float", 1e-3, "first trial step"),
        "dt_min": Key("float", 1e-10, "stiffness stop threshold"),
        "dt_max": Key("float?", AUTO, "step cap; auto uses the explicit stability limit"),
        "safety": Key("float", 0.9, "step controller safety factor"),
        "t_end": Key("float", 1.0, "final flow time"),
        "tolerance": Key("float", 1e-6, "local error and energy-increase tolerance"),
        "gtol": Key("float", 1e-10, "convergence threshold on sup|D_A^* F|"),
        "max_steps": Key("int", 1_000_000, "accepted-step budget"),
    },
    "monitor": {
        "eps0": Key("float", 0.02, "epsilon-regularity energy threshold"),
        "delta0": Key("float", 0.1, "epsilon-regularity shrink factor, in (0, 1/4)"),
        "sigma1": Key("float?", AUTO, "concentration threshold; auto = eps0 / 2"),
        "radii": Key("floats", (), "ball radii for the concentration profile (<= i_M)"),
        "persistence": Key("int", 10, "consecutive hot records needed for 'concentrating'"),
        "sup_fraction": Key("float", 1e-3, "minimum sup|F|^2 relative to 16 (delta0 r_min)^-4"),
        "flat_tol": Key("float", 1e-6, "sup|F| below which a critical point counts as flat"),
        "epsreg_centers": Key("int", 4, "epsilon-regularity sample centers per time"),
        "epsreg_every": Key("int", 10, "register an epsilon-regularity sample every k records"),
        "stop_on_concentration": Key("bool", False, "stop the run once the detector fires"),
    },
    "hym": {
        "normalize": Key("bool", True, "conformally normalize the initial metric (det h = 1 gauge)"),
        "ktol": Key("float", 1e-10, "convergence threshold on sup|i Lambda F - lambda|"),
        "eig_floor": Key("float", 1e-8, "reject steps whose metric eigenvalues fall below this"),
    },
    "output": {
        "cadence": Key("int", 1, "emit a record every k accepted steps"),
        "checkpoint_every": Key("int", 0, "write a checkpoint every k steps (0: final only)"),
        "csv": Key("str", "series.csv", "time-series file name"),
        "summary": Key("str", "summary.json", "run summary file name"),
        "figures": Key("bool", True, "render PNG figures next to the CSV"),
        "threads": Key("int", 1, "numba thread count, recorded in the summary"),
    },
}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _split(s: str) -> list[str]:
    return [p for p in re.split(r"[,\s]+", s.strip()) if p]


_PARSERS: dict[str, Callable[[str], Any]] = {
    "int": lambda s: int(s),
    "float": lambda s: float(s),
    "str": lambda s: s.strip(),
    "bool": _parse_bool,
    "ints": lambda s: tuple(int(p) for p in _split(s)),
    "floats": lambda s: tuple(float(p) for p in _split(s)),
    "float?": lambda s: AUTO if s.strip().lower() == AUTO else (
        None if s.strip().lower() in ("", "none") else float(s)),
}


def _format(kind: str, value: Any) -> str:
    if value is None:
        return "none"
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats"):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section:
            m = re.match(r"\s*([^=:#;\s]+)\s*[=:]", line)
            if m and m.group(1).strip().lower() == key:
                return i
    return None


def _where(text: str, section: str, key: str | None = None) -> str:
    line = _line_of(text, section, key)
    loc = f"[{section}]" + (f" {key}" if key else "")
    return f"line {line}: {loc}" if line else loc


def parse_twists(spec: str, n: int) -> dict[tuple[int, int], int]:
    out: dict[tuple[int, int], int] = {}
    for item in [p for p in spec.split(",") if p.strip()]:
        m = re.fullmatch(r"\s*(\d+)\s*-\s*(\d+)\s*:\s*(-?\d+)\s*", item)
        if not m:
            raise ValueError(f"bad twist item {item.strip()!r}; expected 'mu-nu:k'")
        mu, nu, k = (int(g) for g in m.groups())
        if not (0 <= mu < n and 0 <= nu < n) or mu == nu:
            raise ValueError(f"twist axes {mu}, {nu} invalid for n = {n}")
        if mu > nu:
            mu, nu, k = nu, mu, -k
        out[(mu, nu)] = k
    return out


class RunConfig:
    """Validated configuration values, keyed by section and key."""

    def __init__(self, values: dict[str, dict[str, Any]], source: str = ""):
        self._values = {s: dict(v) for s, v in values.items()}
        self.source = source
        self._check()

    def __getitem__(self, section: str) -> dict[str, Any]:
        return dict(self._values[section])

    def get(self, section: str, key: str) -> Any:
        return self._values[section][key]

    def replace(self, **updates: dict[str, Any]) -> "RunConfig":
        """Copy with ``section={key: value}`` overrides, e.g. ``replace(output={'cadence': 5})``."""
        values = {s: dict(v) for s, v in self._values.items()}
        for section, kv in updates.items():
            for key, value in kv.items():
                if key not in SCHEMA.get(section, {}):
                    raise ConfigError(f"[{section}] {key}: unknown key")
                values[section][key] = value
        return RunConfig(values, self.source)

    # -- derived objects --------------------------------------------------------------

    @property
    def mode(self) -> str:
        return self._values["experiment"]["mode"]

    def sizes(self) -> tuple[int, ...]:
        n = self.get("geometry", "n")
        sizes = self.get("geometry", "sizes")
        return tuple(sizes) * n if len(sizes) == 1 else tuple(sizes)

    def spacing(self) -> float:
        a = self.get("geometry", "spacing")
        return 1.0 / self.sizes()[0] if a == AUTO else float(a)

    def twist(self) -> TwistCocycle:
        n = self.get("geometry", "n")
        rank = self.get("bundle", "rank")
        complex_kind = self.get("bundle", "kind") == "complex"
        fluxes = parse_twists(self.get("bundle", "twists"), n)
        if not any(fluxes.values()):
            return TwistCocycle.untwisted(n, rank, complex_kind)
        return TwistCocycle.thooft(n, rank, fluxes)

    def lattice(self) -> tuple[LatticeGeometry, TwistCocycle]:
        return build_torus(self.get("geometry", "n"), self.sizes(), self.spacing(), self.twist())

    def complex_geometry(self) -> ComplexTorusGeometry:
        return ComplexTorusGeometry.build(self.get("geometry", "n") // 2, self.sizes(), self.spacing())

    def flow_config(self) -> FlowConfig:
        f = self._values["flow"]
        return FlowConfig(dt_init=f["dt_init"], dt_min=f["dt_min"],
                          dt_max=None if f["dt_max"] == AUTO else f["dt_max"],
                          safety=f["safety"], t_end=f["t_end"], scheme=f["scheme"],
                          tolerance=f["tolerance"], gtol=f["gtol"], max_steps=f["max_steps"])

    def hym_config(self) -> HymConfig:
        f = self._values["flow"]
        return HymConfig(dt_init=f["dt_init"], dt_min=f["dt_min"],
                         dt_max=None if f["dt_max"] == AUTO else f["dt_max"],
                         safety=f["safety"], t_end=f["t_end"], tolerance=f["tolerance"],
                         eig_floor=self.get("hym", "eig_floor"), max_steps=f["max_steps"])

    def monitor_config(self) -> MonitorConfig:
        m = dict(self._values["monitor"])
        if m["sigma1"] == AUTO:
            m["sigma1"] = None
        return MonitorConfig(cadence=self.get("output", "cadence"),
                             gtol=self.get("flow", "gtol"), **m)

    # -- rendering --------------------------------------------------------------------

    def to_text(self) -> str:
        """Canonical INI text; parsing it gives back an equal configuration."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key, spec in keys.items():
                lines.append(f"{key} = {_format(spec.kind, self._values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.to_text() == other.to_text()

    def _check(self) -> None:
        n = self.get("geometry", "n")
        sizes = self.get("geometry", "sizes")
        if n < 1:
            raise ConfigError("[geometry] n: must be >= 1")
        if len(sizes) not in (1, n):
            raise ConfigError(f"[geometry] sizes: need 1 or {n} values, got {len(sizes)}")
        if self.get("geometry", "spacing") == AUTO and len(set(self.sizes())) != 1:
            raise ConfigError("[geometry] spacing: auto needs equal sizes")
        if self.get("bundle", "rank") < 1:
            raise ConfigError("[bundle] rank: must be >= 1")
        try:
            fluxes = parse_twists(self.get("bundle", "twists"), n)
        except ValueError as exc:
            raise ConfigError(f"[bundle] twists: {exc}") from None
        if any(fluxes.values()) and self.get("bundle", "kind") == "real":
            raise ConfigError("[bundle] twists: flux needs a complex bundle")
        if self.get("output", "cadence") < 1:
            raise ConfigError("[output] cadence: must be >= 1")
        if self.get("output", "threads") < 1:
            raise ConfigError("[output] threads: must be >= 1")
        kind = self.get("initial", "kind")
        if self.mode == "ym" and kind == "identity":
            raise ConfigError("[initial] kind: 'identity' is a metric initializer (mode = hym)")
        if self.mode == "hym":
            if n % 2:
                raise ConfigError("[geometry] n: hym mode needs an even real dimension")
            if kind in ("bump", "zero"):
                raise ConfigError(f"[initial] kind: {kind!r} is not a metric initializer")
        if kind == "file" and not self.get("initial", "path"):
            raise ConfigError("[initial] path: required for kind = file")
        try:
            self.flow_config()
            self.monitor_config()
            if self.mode == "hym":
                self.hym_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def defaults() -> dict[str, dict[str, Any]]:
    return {s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()}


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: {_where(text, section)}: unknown section")
        for key, raw in parser.items(section):
            spec = SCHEMA[section].get(key)
            if spec is None:
                raise ConfigError(f"{source}: {_where(text, section, key)}: unknown key")
            try:
                value = _PARSERS[spec.kind if spec.kind != "choice" else "str"](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: {_where(text, section, key)}: {exc}") from None
            if spec.kind == "choice" and value not in spec.choices:
                raise ConfigError(f"{source}: {_where(text, section, key)}: "
                                  f"{value!r} not in {spec.choices}")
            if spec.kind == "float?" and value == AUTO and spec.default != AUTO:
                raise ConfigError(f"{source}: {_where(text, section, key)}: 'auto' not allowed")
            values[section][key] = value
    try:
        return RunConfig(values, source)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


# -- presets ----------------------------------------------------------------------------

def preset_names() -> list[str]:
    files = resources.files("ymlab").joinpath("presets").iterdir()
    return sorted(f.name[:-4] for f in files if f.name.endswith(".ini"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return resources.files("ymlab").joinpath("presets", f"{name}.ini").read_text(encoding="utf-8")


def load_preset(name: str) -> RunConfig:
    return parse_config(preset_text(name), f"preset:{name}")


def resolve(config_arg: str) -> RunConfig:
    """A config path, or the name of a built-in preset."""
    if config_arg in preset_names():
        return load_preset(config_arg)
    try:
        return load_config(config_arg)
    except FileNotFoundError:
        raise ConfigError(f"{config_arg}: no such file or preset") from None


def schema_text() -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            default = _format(spec.kind, spec.default) if spec.default != () else "(empty)"
            lines.append(f"  {key:<22} {spec.kind:<7} default {default:<12} {spec.doc}")
    return "\n".join(lines)


def config_digest(config: RunConfig) -> str:
    return hashlib.sha256(config.to_text().encode()).hexdigest()[:16]


__all__ = ["AUTO", "ConfigError", "Key", "RunConfig", "SCHEMA", "config_digest", "defaults",
           "load_config", "load_preset", "parse_config", "parse_twists", "preset_names",
           "preset_text", "resolve", "schema_text"]
