"""Run configuration: one JSON document per experiment, overridable from the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

_PATH_KEYS = ("events", "network", "users", "items", "params", "truth", "output")


@dataclass(frozen=True)
class SimulationSettings:
    n_users: int = 50
    n_items: int = 50
    avg_degree: float = 5.0
    horizon: float | None = None
    target_events: float | None = None
    max_events: int | None = None

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1:
            raise ConfigError("simulation needs at least one user and one item")
        if self.horizon is None and self.target_events is None:
            raise ConfigError("simulation needs either horizon or target_events")
        if self.horizon is not None and self.horizon < 0:
            raise ConfigError("horizon must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs; paths are resolved against the config file's directory.

    ``horizon`` is the end of the observation window of the event log; when
    unset the latest timestamp is used.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    events: str | None = None
    network: str | None = None
    users: str | None = None
    items: str | None = None
    params: str | None = None
    truth: str | None = None
    horizon: float | None = None
    output: str = "output"
    seed: int = 0
    tol: float = 1e-4
    max_iter: int = 500
    truncation: float | None = 10.0
    split_fraction: float = 0.8
    ks: tuple = (1, 5, 10, 20)
    return_samples: int = 1000
    return_queries: int | None = 500
    timeline_items: tuple = ()
    timeline_points: int = 200
    simulation: SimulationSettings = field(
        default_factory=lambda: SimulationSettings(horizon=1.0))

    def __post_init__(self):
        if self.horizon is not None and not self.horizon >= 0:
            raise ConfigError("horizon must be non-negative")
        if not 0 < self.split_fraction <= 1:
            raise ConfigError("split_fraction must lie in (0, 1]")
        if self.tol < 0 or self.max_iter < 1:
            raise ConfigError("tol must be non-negative and max_iter positive")
        if any(k <= 0 for k in self.ks):
            raise ConfigError("evaluation ks must be positive")
        if self.return_samples < 1:
            raise ConfigError("return_samples must be at least 1")
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        object.__setattr__(self, "timeline_items", tuple(int(p) for p in self.timeline_items))

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "simulation" in d:
                d["simulation"] = SimulationSettings(**d["simulation"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if base_dir is not None:
            for key in _PATH_KEYS:
                if d.get(key) is not None:
                    d[key] = str(Path(base_dir) / d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        """JSON-ready form; paths are made absolute so the file can live anywhere."""
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in _PATH_KEYS:
            if out[key] is not None:
                out[key] = str(Path(out[key]).resolve())
        out["model"] = self.model.to_dict()
        out["simulation"] = asdict(self.simulation)
        out["ks"] = list(self.ks)
        out["timeline_items"] = list(self.timeline_items)
        return out

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def override(self, **changes) -> "RunConfig":
        """Copy with the non-``None`` entries of ``changes`` applied."""
        changes = {k: v for k, v in changes.items() if v is not None}
        model_keys = {"variant", "n_components"}
        model_changes = {k: changes.pop(k) for k in list(changes) if k in model_keys}
        cfg = replace(self, **changes)
        if model_changes:
            cfg = replace(cfg, model=replace(cfg.model, **model_changes))
        return cfg
