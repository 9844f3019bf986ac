"""Named plug-in constructors and flat scalar configs.

Five namespaces hold user-registrable constructors: models, criterions,
tasks, optimizers and LR schedulers. Each registration declares the config
keys it understands together with their defaults; named architectures layer
overrides on top of a registered model.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence, Union

Scalar = Union[str, int, float, bool]

NAMESPACES = ("model", "criterion", "task", "optimizer", "scheduler")

DEFAULT, ARCHITECTURE, USER = "default", "architecture", "user"


class RegistrationConflict(ValueError):
    pass


class UnknownComponent(KeyError):
    def __str__(self):
        return self.args[0]


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    """Flat key -> scalar map; each key remembers where its value came from."""

    values: dict[str, Scalar] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def set(self, key: str, value: Scalar, source: str) -> None:
        self.values[key] = value
        self.provenance[key] = source

    def __getitem__(self, key: str) -> Scalar:
        return self.values[key]

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def keys(self):
        return self.values.keys()

    def copy(self) -> Config:
        return Config(dict(self.values), dict(self.provenance))

    def updated(self, overrides: Mapping[str, Scalar], source: str = USER) -> Config:
        out = self.copy()
        for k, v in overrides.items():
            out.set(k, v, source)
        return out

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values and self.provenance == other.provenance


@dataclass
class Entry:
    namespace: str
    name: str
    constructor: Callable[..., Any]
    defaults: dict[str, Scalar]
    origin: str


@dataclass
class ArchitectureDef:
    name: str
    model: str
    overrides: dict[str, Scalar]


def _origin(fn) -> str:
    mod = getattr(fn, "__module__", "?")
    return f"{mod}.{getattr(fn, '__qualname__', repr(fn))}"


class Registry:
    """``builtins`` names modules imported on first lookup; they register themselves."""

    def __init__(self, builtins: Sequence[str] = ()):
        self._entries: dict[str, dict[str, Entry]] = {ns: {} for ns in NAMESPACES}
        self._archs: dict[str, ArchitectureDef] = {}
        self._frozen = False
        self._builtins = tuple(builtins)
        self._loaded = not self._builtins

    def _load(self) -> None:
        if self._loaded:
            return
        self._loaded = True
        for mod in self._builtins:
            importlib.import_module(mod)

    def freeze(self) -> None:
        self._frozen = True

    def _check_open(self):
        if self._frozen:
            raise RuntimeError("registry is frozen")

    def register(self, namespace: str, name: str, constructor=None, defaults: Optional[Mapping] = None):
        """Register a constructor; usable directly or as a decorator."""
        if namespace not in self._entries:
            raise ValueError(f"unknown namespace {namespace!r}; expected one of {NAMESPACES}")
        if not name:
            raise ValueError("plug-in names must be non-empty")

        def do(fn):
            self._check_open()
            table = self._entries[namespace]
            if name in table:
                raise RegistrationConflict(
                    f"{namespace} {name!r} is already registered by {table[name].origin}; "
                    f"refusing second registration from {_origin(fn)}"
                )
            table[name] = Entry(namespace, name, fn, dict(defaults or {}), _origin(fn))
            return fn

        return do if constructor is None else do(constructor)

    def register_architecture(self, name: str, model: str, overrides: Mapping[str, Scalar]) -> None:
        self._check_open()
        if name in self._archs:
            raise RegistrationConflict(f"architecture {name!r} is already registered")
        entry = self.lookup("model", model)
        unknown = set(overrides) - set(entry.defaults)
        if unknown:
            raise ConfigError(f"architecture {name!r} overrides undeclared keys {sorted(unknown)}")
        self._archs[name] = ArchitectureDef(name, model, dict(overrides))

    def lookup(self, namespace: str, name: str) -> Entry:
        self._load()
        table = self._entries[namespace]
        if name not in table:
            raise UnknownComponent(f"no {namespace} named {name!r}; registered: {sorted(table)}")
        return table[name]

    def names(self, namespace: str) -> list[str]:
        self._load()
        return sorted(self._entries[namespace])

    def architectures(self) -> list[str]:
        self._load()
        return sorted(self._archs)

    def architecture(self, name: str) -> ArchitectureDef:
        self._load()
        if name not in self._archs:
            raise UnknownComponent(f"no architecture named {name!r}; registered: {self.architectures()}")
        return self._archs[name]

    def resolve_architecture(self, arch_name: str, user: Optional[Mapping[str, Scalar]] = None) -> Config:
        """defaults, then architecture overrides, then user values."""
        arch = self.architecture(arch_name)
        defaults = self.lookup("model", arch.model).defaults
        user = dict(user or {})
        unknown = set(user) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config key(s) for architecture {arch_name!r}: {sorted(unknown)}")
        cfg = Config()
        for k, v in defaults.items():
            cfg.set(k, v, DEFAULT)
        for k, v in arch.overrides.items():
            cfg.set(k, v, ARCHITECTURE)
        for k, v in user.items():
            cfg.set(k, _coerce(v, defaults[k]), USER)
        return cfg

    def resolve(self, namespace: str, name: str, user: Optional[Mapping[str, Scalar]] = None) -> Config:
        entry = self.lookup(namespace, name)
        user = dict(user or {})
        unknown = set(user) - set(entry.defaults)
        if unknown:
            raise ConfigError(f"unknown config key(s) for {namespace} {name!r}: {sorted(unknown)}")
        cfg = Config()
        for k, v in entry.defaults.items():
            cfg.set(k, v, DEFAULT)
        for k, v in user.items():
            cfg.set(k, _coerce(v, entry.defaults[k]), USER)
        return cfg

    def instantiate(self, namespace: str, name: str, config: Config, **context):
        entry = self.lookup(namespace, name)
        try:
            return entry.constructor(config, **context)
        except (ValueError, TypeError, KeyError) as e:
            raise ConfigError(f"{namespace} {name!r} rejected its config: {e}") from e


def _coerce(value: Scalar, like: Scalar) -> Scalar:
    """Convert textual values to the type of the declared default."""
    if not isinstance(value, str) or isinstance(like, str):
        if isinstance(like, float) and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def parse_scalar(text: str) -> Scalar:
    """Best-effort typing of a config-file value."""
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def parse_config_text(text: str) -> dict[str, Scalar]:
    """``key = value`` lines with ``#`` comments."""
    out: dict[str, Scalar] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_scalar(v)
    return out


REGISTRY = Registry(
    ("seqforge.models.transformer", "seqforge.criterions", "seqforge.optim", "seqforge.tasks")
)


def register(namespace: str, name: str, defaults: Optional[Mapping] = None):
    """Decorator registering into the process-wide registry."""
    return REGISTRY.register(namespace, name, defaults=defaults)
