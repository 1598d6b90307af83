import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .errors import ConfigError, Violation

FloatList = Tuple[float, ...]


@dataclass(frozen=True)
class MollifierConfig:
    dr: float = 1e-3


@dataclass(frozen=True)
class SHEConfig:
    dt: float = 0.0025
    spacing: float = 0.125
    box: float = 0.0
    t: float = 1.0


@dataclass(frozen=True)
class TilingConfig:
    n_base: int = 4
    levels: FloatList = (0, 1, 2, 3)


@dataclass(frozen=True)
class StatsConfig:
    batches: int = 100
    realizations: int = 10000
    thetas: FloatList = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    horizons: FloatList = (5.0, 10.0, 20.0, 40.0)
    separations: FloatList = (0.0, 1.0, 2.0, 3.0)
    eps_list: FloatList = (1.0, 0.5, 0.25)
    lambdas: FloatList = (1.0, 0.5, 0.25)
    m: float = 2.0
    x0: float = 0.0
    inner_small: int = 2
    inner_large: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    """Every physical and numerical parameter of a run.

    Top level keys are the polymer scale parameters; lattice, tiling,
    statistics and table settings live in dotted namespaces
    (``she.dt``, ``tiling.n_base``, ``stats.batches``, ``mollifier.dr``).
    """

    d: int = 3
    beta: float = 0.2
    eps: float = 1.0
    T: float = 20.0
    delta: float = 0.05
    a: float = 0.25
    M: int = 10000
    seed: int = 0
    workers: int = 1
    chunk: int = 256
    mollifier: MollifierConfig = field(default_factory=MollifierConfig)
    she: SHEConfig = field(default_factory=SHEConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)

    @property
    def steps(self) -> int:
        return steps_for(self.T, self.delta)

    def with_values(self, **values) -> "ExperimentConfig":
        """Copy of the config with dotted keys replaced, e.g.
        ``config.with_values(beta=0.0, **{"she.dt": 1e-3})``."""
        return from_mapping({k: v for k, v in values.items()}, base=self)


NAMESPACES = {
    "mollifier": MollifierConfig,
    "she": SHEConfig,
    "tiling": TilingConfig,
    "stats": StatsConfig,
}


def steps_for(horizon: float, step: float) -> int:
    """Number of slabs of length ``step`` in ``horizon``; rounds to the
    nearest integer, callers check divisibility through ``validate``."""
    return int(round(horizon / step))


def is_multiple(value: float, step: float, tol: float = 1e-9) -> bool:
    ratio = value / step
    return abs(ratio - round(ratio)) <= tol * max(1.0, abs(ratio))


def is_dyadic(value: float) -> bool:
    """True for 2^{-m}, m >= 0."""
    if not value > 0 or value > 1:
        return False
    exponent = -math.log2(value)
    return abs(exponent - round(exponent)) < 1e-12


def _known_keys() -> Dict[str, type]:
    keys = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in NAMESPACES:
            for sub in dataclasses.fields(NAMESPACES[f.name]):
                keys[f"{f.name}.{sub.name}"] = sub.type
        else:
            keys[f.name] = f.type
    return keys


def _coerce(key: str, kind, raw) -> object:
    if not isinstance(raw, str):
        if kind in (FloatList, "FloatList") and not isinstance(raw, tuple):
            return tuple(float(v) for v in raw)
        return raw

    raw = raw.strip()
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)

    return tuple(float(v) for v in raw.split(",") if v.strip())


def parse_text(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines. Blank lines and ``#`` comments are
    skipped.

    Raises
    ------
        ConfigError
            Malformed lines or repeated keys, all reported together
    """
    values = {}
    violations = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue

        if "=" not in line:
            violations.append(Violation("syntax", "expected key = value", {"line": number}))
            continue

        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            violations.append(Violation("syntax", "repeated key", {"key": key, "line": number}))
        values[key] = value

    if violations:
        raise ConfigError(violations)

    return values


def from_mapping(
    mapping: Dict[str, object], base: Optional[ExperimentConfig] = None
) -> ExperimentConfig:
    """Build a config from dotted keys on top of ``base`` (defaults when
    omitted). Unknown keys and values that do not parse are rejected."""
    base = base or ExperimentConfig()
    known = _known_keys()
    top = {}
    nested = {name: {} for name in NAMESPACES}
    violations = []

    for key, raw in mapping.items():
        if key not in known:
            violations.append(Violation("unknown-key", "key is not recognised", {"key": key}))
            continue

        try:
            value = _coerce(key, known[key], raw)
        except ValueError:
            violations.append(Violation("type", "value does not parse", {"key": key, "value": raw}))
            continue

        if "." in key:
            space, name = key.split(".", 1)
            nested[space][name] = value
        else:
            top[key] = value

    if violations:
        raise ConfigError(violations)

    for space, values in nested.items():
        if values:
            top[space] = dataclasses.replace(getattr(base, space), **values)

    return dataclasses.replace(base, **top)


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError([Violation("syntax", "override must be key=value", {"override": pair})])
        key, value = pair.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    mapping = {}
    if path is not None:
        with open(path) as f:
            mapping.update(parse_text(f.read()))
        logging.info(f"loaded config from {path}")

    mapping.update(parse_overrides(overrides))
    return from_mapping(mapping)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_mapping(config: ExperimentConfig) -> Dict[str, object]:
    values = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name in NAMESPACES:
            for sub in dataclasses.fields(value):
                values[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            values[f.name] = value
    return values


def to_text(config: ExperimentConfig) -> str:
    """Normalized text form: sorted keys, one ``key = value`` per line."""
    mapping = to_mapping(config)
    return "".join(f"{key} = {_format(mapping[key])}\n" for key in sorted(mapping))


def config_hash(config: ExperimentConfig) -> str:
    """Git blob hash of the normalized config text."""
    data = to_text(config).encode("utf-8")
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def _alignment(config: ExperimentConfig) -> List[Violation]:
    """Anchors of the rescaled views and lattice runs must sit on cell
    boundaries of the base grid at every refinement ``eps``."""
    found = []

    def misaligned(message: str, **values):
        found.append(Violation("dyadic-alignment", message, values))

    if not is_dyadic(config.a):
        misaligned("a must be 2^-m", a=config.a)
    if not is_dyadic(config.she.spacing):
        misaligned("she.spacing must be 2^-m", spacing=config.she.spacing)
    if not (config.delta > 0 and config.she.dt > 0):
        return found

    she = config.she
    for eps in sorted({config.eps, *config.stats.eps_list}, reverse=True):
        if not is_dyadic(eps):
            continue
        if not is_multiple(she.t, config.delta * eps**2):
            misaligned("she.t must be a multiple of delta eps^2", t=she.t, delta=config.delta, eps=eps)
        if not is_multiple(she.t, she.dt * eps**2):
            misaligned("she.t must be a multiple of she.dt eps^2", t=she.t, dt=she.dt, eps=eps)
        if not (is_multiple(config.stats.x0, config.a * eps) and is_multiple(config.stats.x0, she.spacing * eps)):
            misaligned("stats.x0 must be a multiple of a eps and she.spacing eps", x0=config.stats.x0, eps=eps)
    return found


def violations(config: ExperimentConfig) -> List[Violation]:
    found = []

    def check(ok: bool, constraint: str, message: str, **values):
        if not ok:
            found.append(Violation(constraint, message, values))

    check(config.d >= 3, "dimension", "d must be at least 3", d=config.d)
    check(config.beta >= 0, "beta", "beta must be nonnegative", beta=config.beta)
    check(is_dyadic(config.eps), "dyadic-alignment", "eps must be 2^-m", eps=config.eps)
    for eps in config.stats.eps_list:
        check(is_dyadic(eps), "dyadic-alignment", "stats.eps_list entries must be 2^-m", eps=eps)
    check(config.delta > 0 and config.a > 0, "grid", "delta and a must be positive", delta=config.delta, a=config.a)
    if config.delta > 0:
        check(
            is_multiple(config.T, config.delta),
            "horizon",
            "T must be a multiple of delta",
            T=config.T,
            delta=config.delta,
        )
        for horizon in config.stats.horizons:
            check(
                is_multiple(horizon, config.delta),
                "horizon",
                "stats.horizons must be multiples of delta",
                T=horizon,
                delta=config.delta,
            )
    check(config.M >= 2, "samples", "M must be at least 2", M=config.M)
    check(config.workers >= 1, "workers", "workers must be positive", workers=config.workers)
    check(config.chunk >= 1, "workers", "chunk must be positive", chunk=config.chunk)

    she = config.she
    bound = she.spacing**2 / (2 * config.d)
    check(she.dt <= bound * (1 + 1e-12), "stability", "she.dt exceeds spacing^2/(2d)", dt=she.dt, bound=bound)
    check(
        she.dt > 0 and is_multiple(she.t, she.dt),
        "horizon",
        "she.t must be a multiple of she.dt",
        t=she.t,
        dt=she.dt,
    )
    found.extend(_alignment(config))
    check(
        config.tiling.n_base >= max(config.tiling.levels, default=0),
        "tiling-level",
        "tiling.n_base must cover every level",
        n_base=config.tiling.n_base,
        levels=config.tiling.levels,
    )
    check(config.mollifier.dr > 0, "grid", "mollifier.dr must be positive", dr=config.mollifier.dr)
    return found


def validate(config: ExperimentConfig) -> ExperimentConfig:
    """Check every constraint and report all failures together.

    Returns
    --------
    ExperimentConfig
        The normalized config; validating it again returns an equal object.

    Raises
    ------
        ConfigError
            One entry per violated constraint
    """
    found = violations(config)
    if found:
        raise ConfigError(found)

    return from_mapping(parse_text(to_text(config)))
