"""Flat ``key = value`` run configuration with a fixed schema."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .bench import SETTINGS, default_lagrangian
from .metric_learn import MetricConfig
from .nlot import NlotConfig


class ConfigError(ValueError):
    pass


def _int_tuple(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    out = tuple(int(p) for p in parts)
    if any(v < 1 for v in out):
        raise ValueError("layer sizes must be positive")
    return out


def _fmt_tuple(v: tuple[int, ...]) -> str:
    return ",".join(str(x) for x in v)


def _positive_int(text) -> int:
    v = int(text)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _nonneg_int(text) -> int:
    v = int(text)
    if v < 0:
        raise ValueError("must be non-negative")
    return v


def _positive_float(text) -> float:
    v = float(text)
    if not v > 0:
        raise ValueError("must be positive")
    return v


def _setting(text) -> str:
    if text not in SETTINGS:
        raise ValueError(f"unknown setting; valid settings: {', '.join(SETTINGS)}")
    return text


def _head(text) -> str:
    if text not in ("angle", "doubled"):
        raise ValueError("must be 'angle' or 'doubled'")
    return text


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    fmt: Callable[[Any], str] = repr
    help: str = ""


SCHEMA: dict[str, Key] = {
    "setting": Key(_setting, "translation", str, "dataset name"),
    "seed": Key(int, 0, str),
    "steps": Key(_nonneg_int, 2000, str, "training steps (metric steps for train-metric)"),
    "out": Key(str, "runs/default", str, "run directory"),
    "lagrangian": Key(str, "auto", str, "kinetic, potential.<name>, metric.<name> or auto"),
    "knots": Key(_positive_int, 30, str),
    "quad.nodes": Key(_positive_int, 100, str, "midpoint quadrature nodes for path energies"),
    "slope": Key(_positive_float, 0.01, repr, "leaky ReLU negative slope"),
    "g.hidden": Key(_int_tuple, (64, 64, 64, 64), _fmt_tuple),
    "y.hidden": Key(_int_tuple, (64, 64, 64, 64), _fmt_tuple),
    "spline.hidden": Key(_int_tuple, (1024, 1024), _fmt_tuple),
    "g.rate_start": Key(_positive_float, 1e-4),
    "g.rate_end": Key(_positive_float, 1e-2),
    "y.rate_start": Key(_positive_float, 1e-4),
    "y.rate_end": Key(_positive_float, 1e-2),
    "spline.rate": Key(_positive_float, 1e-4),
    "batch": Key(_positive_int, 1024, str),
    "lbfgs.iters": Key(_nonneg_int, 20, str),
    "fine_tune.train": Key(_nonneg_int, 0, str, "spline fine-tuning steps inside training"),
    "fine_tune.eval": Key(_nonneg_int, 0, str, "spline fine-tuning steps for exported paths"),
    "fine_tune.rate": Key(_positive_float, 1e-2),
    "metric.hidden": Key(_int_tuple, (64, 64, 64, 64), _fmt_tuple),
    "metric.head": Key(_head, "angle", str, "rotation net output: angle or doubled"),
    "metric.rate": Key(_positive_float, 5e-3),
    "metric.update_frequency": Key(_positive_int, 10, str),
    "metric.grid": Key(_positive_int, 20, str),
    "metric.eps": Key(_positive_float, 0.1),
    "metric.delta": Key(_positive_float, 0.1),
    "potential.m1": Key(float, 0.01),
    "potential.m2": Key(float, 1.0),
    "potential.m3": Key(float, 0.05),
    "potential.m4": Key(float, 0.01),
    "potential.m5": Key(float, 0.1),
    "potential.sharpness": Key(_positive_float, 40.0),
    "data.n": Key(_nonneg_int, 0, str, "samples per measure; 0 uses the setting default"),
    "eval.samples": Key(_positive_int, 4096, str, "held-out samples for the W2 error"),
    "log.every": Key(_positive_int, 100, str, "steps between metric log lines"),
    "checkpoint.every": Key(_positive_int, 500, str),
    "paths.count": Key(_positive_int, 64, str, "paths written by export-paths"),
    "paths.resolution": Key(_positive_int, 64, str),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: s.default for k, s in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # -- construction -------------------------------------------------------
    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]], base: "RunConfig | None" = None) -> "RunConfig":
        values = dict((base or cls()).values)
        for key, raw in pairs:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                values[key] = SCHEMA[key].parse(raw.strip())
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
        return cls(values)

    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            pairs.append((key.strip(), raw.strip()))
        return cls.from_pairs(pairs, base)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def with_overrides(self, items: list[str]) -> "RunConfig":
        pairs = []
        for item in items:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            pairs.append((key.strip(), raw))
        return RunConfig.from_pairs(pairs, self)

    # -- serialisation ------------------------------------------------------
    def dumps(self) -> str:
        width = max(len(k) for k in SCHEMA)
        return "".join(f"{k.ljust(width)} = {SCHEMA[k].fmt(self.values[k])}\n" for k in SCHEMA)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    # -- derived objects ----------------------------------------------------
    @property
    def lagrangian_name(self) -> str:
        name = self["lagrangian"]
        return default_lagrangian(self["setting"]) if name == "auto" else name

    def lagrangian_kwargs(self) -> dict[str, float]:
        out = {k.split(".", 1)[1]: self[k] for k in SCHEMA if k.startswith("potential.")}
        out["eps"] = self["metric.eps"]
        out["delta"] = self["metric.delta"]
        return out

    def nlot(self) -> NlotConfig:
        return NlotConfig(
            knots=self["knots"], g_hidden=self["g.hidden"], y_hidden=self["y.hidden"],
            spline_hidden=self["spline.hidden"], slope=self["slope"],
            g_rate=(self["g.rate_start"], self["g.rate_end"]), y_rate=(self["y.rate_start"], self["y.rate_end"]),
            spline_rate=self["spline.rate"], batch=self["batch"], lbfgs_iters=self["lbfgs.iters"],
            quad_nodes=self["quad.nodes"], steps=self["steps"],
            fine_tune_train=self["fine_tune.train"], fine_tune_eval=self["fine_tune.eval"],
            fine_tune_rate=self["fine_tune.rate"])

    def metric(self) -> MetricConfig:
        # the inner schedules span every inner step of the run
        inner = replace(self.nlot(), steps=self["steps"] * self["metric.update_frequency"])
        return MetricConfig(inner=inner, rotation_hidden=self["metric.hidden"],
                            rotation_head=self["metric.head"], rate=self["metric.rate"],
                            update_frequency=self["metric.update_frequency"], steps=self["steps"],
                            grid=self["metric.grid"])


def schema_help() -> str:
    width = max(len(k) for k in SCHEMA)
    return "\n".join(f"  {k.ljust(width)}  default {SCHEMA[k].fmt(SCHEMA[k].default)}"
                     + (f"  ({SCHEMA[k].help})" if SCHEMA[k].help else "") for k in SCHEMA)
