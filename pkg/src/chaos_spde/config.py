"""Experiment configuration: ``key = value`` lines with dotted sections.

Example::

    T = 1.0
    N = 4
    noise.1.kind = white
    noise.2.kind = ou
    noise.2.b = 1.0
    B.1.kind = diagonal
    B.1.sigma = 0.5
    B.2.kind = multiplier
    B.2.h_cos = 1.0, 0.3
    u0.sin = 1.0

Lines starting with ``#`` are comments. Listing any ``noise.*`` (or
``B.*``) key replaces the whole default list; indices must run from 1
without gaps. Unknown keys are rejected.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .chaos import DEFAULT_ENUM_LIMIT
from .noise import NoiseSpec
from .propagator import OperatorA, OperatorB, SpectralField

__all__ = ["ConfigError", "NoiseConf", "BConf", "ExperimentConfig", "parse_config", "load_config", "dump_config"]


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class NoiseConf:
    kind: str = "white"
    b: float = 1.0
    H: float = 0.75

    def spec(self, T: float) -> NoiseSpec:
        if self.kind == "white":
            return NoiseSpec.white(T)
        if self.kind == "ou":
            return NoiseSpec.ou(self.b, T)
        if self.kind == "fractional":
            return NoiseSpec.fractional(self.H, T)
        raise ConfigError(f"unknown noise kind {self.kind!r}")


@dataclass(frozen=True)
class BConf:
    kind: str = "diagonal"
    sigma: float = 0.5
    h_cos: tuple = (1.0,)
    h_sin: tuple = ()

    def operator(self) -> OperatorB:
        if self.kind == "diagonal":
            return OperatorB.diagonal(self.sigma)
        if self.kind == "multiplier":
            Qh = max(len(self.h_cos) - 1, len(self.h_sin), 0)
            return OperatorB.multiplier(SpectralField.from_trig(Qh, sin=self.h_sin, cos=self.h_cos))
        raise ConfigError(f"unknown operator kind {self.kind!r}")


_INT_KEYS = ("K_steps", "Q", "M", "N", "n", "r", "mc_samples", "seed", "report_times", "x_points", "sample_rows", "enum_limit")
_FLOAT_KEYS = ("T", "c0")


@dataclass(frozen=True)
class ExperimentConfig:
    """All experiment parameters; every field has a default.

    ``M`` is the number of time subintervals of each one-step solve (the
    multistep scheme uses ``M`` per step).
    """

    T: float = 1.0
    K_steps: int = 1
    Q: int = 32
    M: int = 512
    N: int = 4
    n: int = 16
    r: int = 2
    c0: float = 0.0
    mc_samples: int = 1000
    seed: int = 12345
    report_times: int = 9
    x_points: int = 64
    sample_rows: int = 10
    enum_limit: int = DEFAULT_ENUM_LIMIT
    out: str = ""
    noises: tuple = (NoiseConf("white"), NoiseConf("ou", b=1.0))
    B: tuple = (BConf("diagonal", sigma=0.5), BConf("diagonal", sigma=0.25))
    u0_sin: tuple = (1.0,)
    u0_cos: tuple = ()
    sweep_values: tuple = ()

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.T > 0, "T must be positive")
        need(self.K_steps >= 1, "K_steps must be >= 1")
        need(self.Q >= 1, "Q must be >= 1")
        need(self.M >= 2, "M must be >= 2")
        need(self.N >= 0, "N must be >= 0")
        need(self.n >= 1, "n must be >= 1")
        need(len(self.noises) >= 1, "at least one noise is required")
        need(len(self.B) == len(self.noises), "need exactly one B entry per noise")
        need(1 <= self.r <= len(self.noises), "r must be between 1 and the number of noises")
        need(self.mc_samples >= 0, "mc_samples must be >= 0")
        need(0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer")
        need(self.report_times >= 2, "report_times must be >= 2")
        need(self.x_points >= 1, "x_points must be >= 1")
        need(self.sample_rows >= 0, "sample_rows must be >= 0")
        need(self.enum_limit >= 1, "enum_limit must be >= 1")
        need(self.c0 <= 1, "c0 must be <= 1")
        need(len(self.u0_sin) <= self.Q and len(self.u0_cos) <= self.Q + 1, "u0 modes exceed Q")
        need(any(self.u0_sin) or any(self.u0_cos), "u0 must be nonzero")
        for i, nz in enumerate(self.noises, 1):
            need(nz.kind in ("white", "ou", "fractional"), f"noise.{i}.kind: unknown kind {nz.kind!r}")
            need(nz.kind != "ou" or nz.b > 0, f"noise.{i}.b must be positive")
            need(nz.kind != "fractional" or 0.5 < nz.H < 1, f"noise.{i}.H must lie in (1/2, 1)")
        for i, b in enumerate(self.B, 1):
            need(b.kind in ("diagonal", "multiplier"), f"B.{i}.kind: unknown kind {b.kind!r}")
            need(b.kind != "multiplier" or any(b.h_cos) or any(b.h_sin), f"B.{i}: multiplier h is zero")
        return self

    # solver inputs
    def operator_A(self) -> OperatorA:
        return OperatorA(self.c0)

    def noise_specs(self, T: Optional[float] = None) -> list[NoiseSpec]:
        return [nz.spec(self.T if T is None else T) for nz in self.noises]

    def operators_B(self) -> list[OperatorB]:
        return [b.operator() for b in self.B]

    def initial_field(self) -> SpectralField:
        return SpectralField.from_trig(self.Q, sin=self.u0_sin, cos=self.u0_cos)


def _fmt(x) -> str:
    if isinstance(x, tuple):
        return ", ".join(_fmt(v) for v in x)
    if isinstance(x, float):
        return repr(x)
    return str(x)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize in canonical key order; ``parse_config`` inverts it."""
    lines = []
    for f in fields(ExperimentConfig):
        if f.name in ("noises", "B", "u0_sin", "u0_cos", "sweep_values"):
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for i, nz in enumerate(cfg.noises, 1):
        lines.append(f"noise.{i}.kind = {nz.kind}")
        if nz.kind == "ou":
            lines.append(f"noise.{i}.b = {_fmt(nz.b)}")
        if nz.kind == "fractional":
            lines.append(f"noise.{i}.H = {_fmt(nz.H)}")
    for i, b in enumerate(cfg.B, 1):
        lines.append(f"B.{i}.kind = {b.kind}")
        if b.kind == "diagonal":
            lines.append(f"B.{i}.sigma = {_fmt(b.sigma)}")
        else:
            lines.append(f"B.{i}.h_cos = {_fmt(b.h_cos)}")
            lines.append(f"B.{i}.h_sin = {_fmt(b.h_sin)}")
    lines.append(f"u0.sin = {_fmt(cfg.u0_sin)}")
    lines.append(f"u0.cos = {_fmt(cfg.u0_cos)}")
    lines.append(f"sweep.values = {_fmt(cfg.sweep_values)}")
    return "\n".join(lines) + "\n"


def _float(key: str, v: str) -> float:
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _int(key: str, v: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _floats(key: str, v: str) -> tuple:
    v = v.strip()
    if not v:
        return ()
    return tuple(_float(key, p.strip()) for p in v.split(","))


def _indexed(entries: dict, prefix: str, cls, casts: dict):
    """Collect ``prefix.<i>.<attr>`` entries into a tuple of ``cls``."""
    if not entries:
        return None
    idx = sorted(entries)
    if idx != list(range(1, len(idx) + 1)):
        raise ConfigError(f"{prefix} indices must be 1..k without gaps, got {idx}")
    out = []
    for i in idx:
        kw = {}
        for attr, v in entries[i].items():
            if attr not in casts:
                raise ConfigError(f"unknown key {prefix}.{i}.{attr}")
            kw[attr] = casts[attr](f"{prefix}.{i}.{attr}", v)
        if "kind" not in kw:
            raise ConfigError(f"{prefix}.{i}.kind is required")
        out.append(cls(**kw))
    return tuple(out)


_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*=\s*(.*?)\s*$")


def parse_config(text: str) -> ExperimentConfig:
    """Parse configuration text; raises :class:`ConfigError` on any problem."""
    top: dict = {}
    noise_e: dict = {}
    b_e: dict = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _LINE.match(line)
        if not m:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = m.groups()
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        seen.add(key)
        parts = key.split(".")
        if parts[0] in ("noise", "B") and len(parts) == 3 and parts[1].isdigit():
            target = noise_e if parts[0] == "noise" else b_e
            target.setdefault(int(parts[1]), {})[parts[2]] = val
        elif key in ("u0.sin", "u0.cos", "sweep.values"):
            top[key.replace(".", "_")] = _floats(key, val)
        elif key in _INT_KEYS:
            top[key] = _int(key, val)
        elif key in _FLOAT_KEYS:
            top[key] = _float(key, val)
        elif key == "out":
            top[key] = val
        else:
            raise ConfigError(f"line {lineno}: unknown key {key}")
    noises = _indexed(
        noise_e, "noise", NoiseConf, {"kind": lambda k, v: v, "b": _float, "H": _float}
    )
    bs = _indexed(
        b_e, "B", BConf,
        {"kind": lambda k, v: v, "sigma": _float, "h_cos": _floats, "h_sin": _floats},
    )
    cfg = ExperimentConfig(**top)
    if noises is not None:
        cfg = replace(cfg, noises=noises)
    if bs is not None:
        cfg = replace(cfg, B=bs)
    if "sweep_values" in top:
        cfg = replace(cfg, sweep_values=top["sweep_values"])
    return cfg.validate()


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
