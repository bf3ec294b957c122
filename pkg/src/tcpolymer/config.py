"""Flat ``key = value`` experiment configuration.

Keys are dotted (``walk.kind``, ``field.sigma``, ``scan.betas``); arrays
are comma separated; ``walk.steps`` lists ``x,y,z:p`` entries separated by
``;``.  Lines starting with ``#`` are comments.  :meth:`ExperimentConfig.emit`
writes every key in sorted order with floats in shortest round-trip form,
so ``parse(emit(c)) == c`` and the emitted text hashes stably.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .environment import KINDS, FieldSpec
from .errors import ConfigError, PolymerError
from .walk import WalkModel

U64_MAX = (1 << 64) - 1


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _parse_float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"{s!r} is not finite")
    return v


def _parse_int(s: str) -> int:
    return int(s, 0)


def _list(parse):
    def inner(s: str):
        s = s.strip()
        return tuple(parse(t.strip()) for t in s.split(",")) if s else ()

    return inner


def _optional(parse):
    def inner(s: str):
        s = s.strip()
        return None if s in ("", "none", "None") else parse(s)

    return inner


def _parse_steps(s: str):
    out = []
    for entry in s.split(";"):
        entry = entry.strip()
        if not entry:
            continue
        off, _, p = entry.partition(":")
        if not p:
            raise ValueError(f"step entry {entry!r} needs the form x,y,z:p")
        out.append((tuple(int(c) for c in off.split(",")), float(p)))
    return tuple(out)


def _emit_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _fmt_float(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(",".join(str(c) for c in off) + ":" + _fmt_float(p) for off, p in v)
        return ",".join(_emit_value(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    "walk.kind": Key(str, "nn", "nn (nearest neighbour) or custom"),
    "walk.d": Key(_parse_int, 3, "dimension, at least 3"),
    "walk.steps": Key(_parse_steps, (), "custom steps x,y,z:p;..."),
    "field.kind": Key(str, "iid_gaussian", "one of " + ", ".join(KINDS)),
    "field.sigma": Key(_parse_float, 1.0, "standard deviation"),
    "field.p": Key(_parse_float, 0.5, "Bernoulli probability of the upper value"),
    "field.values": Key(_list(_parse_float), (0.0, 1.0), "Bernoulli values low,high"),
    "field.a": Key(_parse_float, 0.5, "AR(1) coefficient in (0, 1)"),
    "field.box": Key(_list(_parse_int), (), "gff box extents, time first (empty: fitted to the window)"),
    "field.margin": Key(_optional(_parse_int), None, "gff margin (empty: default)"),
    "field.C": Key(_parse_float, 1.0, "mixing constant C"),
    "field.g": Key(_optional(_parse_float), None, "mixing rate g (empty: default)"),
    "scan.betas": Key(_list(_parse_float), (0.0, 0.5, 1.0), "inverse temperatures"),
    "scan.Ns": Key(_list(_parse_int), (16, 32), "polymer lengths"),
    "run.n_disorder": Key(_parse_int, 100, "disorder replicas"),
    "run.seed": Key(_parse_int, 0, "master seed, unsigned 64-bit"),
    "annealed.mode": Key(str, "auto", "auto, exact, analytic or mc"),
    "lambda.kappa": Key(_optional(_parse_float), None, "kappa for Lambda (empty: estimated)"),
    "partition.method": Key(str, "dp", "dp or enum"),
    "lln.N_max": Key(_parse_int, 256, "longest running average"),
    "lln.n_paths": Key(_parse_int, 200, "independent (field, path) replicas"),
    "lln.checkpoints": Key(_list(_parse_int), (), "checkpoints (empty: dyadic)"),
    "tau.Ls": Key(_list(_parse_int), (1, 2, 3, 4), "run lengths"),
    "tau.ps": Key(_list(_parse_float), (1.0, 2.0), "moment orders"),
    "tau.samples": Key(_parse_int, 10000, "samples per L"),
    "regen.L": Key(_parse_int, 1, "run length of ones"),
    "regen.l": Key(_parse_float, 0.5, "truncation level"),
    "regen.blocks": Key(_parse_int, 10, "regeneration blocks"),
    "regen.inner": Key(_parse_int, 10000, "samples for the block constants"),
    "regen.replicas": Key(_parse_int, 100, "replicas of H"),
    "regen.tilt": Key(_parse_float, 0.75, "eps proposal tilt in [0, 1]"),
    "regen.proposal": Key(str, "tilted", "tilted or plain"),
    "concentration.N": Key(_parse_int, 64, "polymer length"),
    "concentration.eps": Key(_list(_parse_float), (0.5,), "deviation levels"),
    "concentration.beta": Key(_parse_float, 0.5, "inverse temperature"),
    "criteria.kappa": Key(_parse_float, 1.0, "kappa for the window test"),
    "criteria.beta_max": Key(_parse_float, 50.0, "search bound for the threshold"),
    "green.box": Key(_list(_parse_int), (4, 5, 5, 5), "box extents, time first"),
    "green.margin": Key(_optional(_parse_int), None, "margin (empty: default)"),
}

CHOICES = {
    "walk.kind": ("nn", "custom"),
    "field.kind": KINDS,
    "annealed.mode": ("auto", "exact", "analytic", "mc"),
    "partition.method": ("dp", "enum"),
    "regen.proposal": ("tilted", "plain"),
}


def _parse_lines(text: str, source: str) -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        raw[key.strip()] = value.strip()
    return raw


@dataclass(frozen=True)
class ExperimentConfig:
    values: tuple  # sorted (key, value) pairs covering every schema key

    @classmethod
    def from_raw(cls, raw: dict[str, str]) -> "ExperimentConfig":
        vals = {k: spec.default for k, spec in SCHEMA.items()}
        for k, v in raw.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            try:
                vals[k] = SCHEMA[k].parse(v)
            except ValueError as exc:
                raise ConfigError(f"{k}: cannot parse {v!r} ({exc})") from None
        return cls(tuple(sorted(vals.items())))

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        return cls.from_raw(_parse_lines(text, source))

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        raw = _parse_lines(text, str(path))
        raw.update(parse_overrides(overrides))
        return cls.from_raw(raw)

    def emit(self) -> str:
        return "".join(f"{k} = {_emit_value(v)}\n" for k, v in self.values)

    def digest(self) -> str:
        return hashlib.sha256(self.emit().encode()).hexdigest()

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    def replace(self, **kw) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        return ExperimentConfig(tuple(sorted(vals.items())))

    def with_overrides(self, overrides) -> "ExperimentConfig":
        raw = {k: _emit_value(v) for k, v in self.values}
        raw.update(parse_overrides(overrides))
        return ExperimentConfig.from_raw(raw)

    # -- model objects ---------------------------------------------------

    def walk(self) -> WalkModel:
        kind, d = self["walk.kind"], self["walk.d"]
        if kind == "nn":
            return WalkModel.nearest_neighbour(d)
        if not self["walk.steps"]:
            raise ConfigError("walk.steps: custom walk needs at least one step")
        return WalkModel(d, self["walk.steps"])

    def field_spec(self) -> FieldSpec:
        kind = self["field.kind"]
        box = self["field.box"] or None
        return FieldSpec(kind, sigma=self["field.sigma"], p=self["field.p"], values=self["field.values"],
                         a=self["field.a"], box=box, margin=self["field.margin"], C=self["field.C"],
                         g=self["field.g"])

    def validate(self) -> list[str]:
        """Every violated constraint, one message per problem."""
        problems = []
        for key, choices in CHOICES.items():
            if self[key] not in choices:
                problems.append(f"{key}: {self[key]!r} not one of {', '.join(choices)}")
        try:
            self.walk()
        except PolymerError as exc:
            problems.append(f"walk: {exc}")
        try:
            self.field_spec()
        except PolymerError as exc:
            problems.append(f"field: {exc}")
        betas = self["scan.betas"]
        if not betas:
            problems.append("scan.betas: empty grid")
        elif any(b < 0 for b in betas):
            problems.append("scan.betas: beta must be non-negative")
        elif any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
            problems.append("scan.betas: grid must be strictly increasing")
        Ns = self["scan.Ns"]
        if not Ns or min(Ns) < 1:
            problems.append("scan.Ns: lengths must be at least 1")

        def at_least(key, lo):
            if self[key] < lo:
                problems.append(f"{key}: must be at least {lo}, got {self[key]}")

        at_least("run.n_disorder", 2)
        at_least("lln.N_max", 10)
        at_least("lln.n_paths", 1)
        at_least("tau.samples", 100)
        at_least("regen.L", 1)
        at_least("regen.blocks", 1)
        at_least("regen.inner", 2)
        at_least("regen.replicas", 2)
        at_least("concentration.N", 1)
        if not 0 <= self["run.seed"] <= U64_MAX:
            problems.append("run.seed: must be an unsigned 64-bit integer")
        if not self["regen.l"] > 0:
            problems.append("regen.l: truncation level must be positive")
        if not 0.0 <= self["regen.tilt"] <= 1.0:
            problems.append("regen.tilt: must lie in [0, 1]")
        if not self["tau.Ls"] or min(self["tau.Ls"]) < 1:
            problems.append("tau.Ls: run lengths must be at least 1")
        if not self["tau.ps"] or min(self["tau.ps"]) < 1:
            problems.append("tau.ps: moment orders must be at least 1")
        if any(e <= 0 for e in self["concentration.eps"]) or not self["concentration.eps"]:
            problems.append("concentration.eps: levels must be positive")
        if self["concentration.beta"] < 0:
            problems.append("concentration.beta: must be non-negative")
        if self["criteria.kappa"] <= 0:
            problems.append("criteria.kappa: must be positive")
        k = self["lambda.kappa"]
        if k is not None and k <= 0:
            problems.append("lambda.kappa: must be positive")
        cps = self["lln.checkpoints"]
        if cps and (min(cps) < 1 or max(cps) > self["lln.N_max"]):
            problems.append("lln.checkpoints: must lie in 1..lln.N_max")
        if len(self["green.box"]) != self["walk.d"] + 1 or min(self["green.box"], default=0) < 1:
            problems.append(f"green.box: needs {self['walk.d'] + 1} positive extents")
        return problems


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def default_config() -> ExperimentConfig:
    return ExperimentConfig.from_raw({})
