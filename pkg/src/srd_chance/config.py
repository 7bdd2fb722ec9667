"""Experiment configuration: INI text with one ``[experiment]`` section."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields

from .errors import ConfigError

PROBLEMS = ("linear", "bilinear")
ESTIMATORS = ("mc", "srd-mc", "srd-qmc")
MODES = ("problem", "ball", "halfspace")


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(float(t)) for t in text.replace(",", " ").split())


def _strs(text):
    return tuple(t for t in text.replace(",", " ").split())


def _fmt(value):
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of the CLI commands; defaults reproduce the reference setup.

    Bounds ``lower``/``upper`` serve ``estimate`` and ``optimize``;
    ``converge_bounds`` and ``variance_bounds`` are symmetric half-widths.
    """

    problem: str = "linear"
    mode: str = "problem"
    n: int = 128
    K: int = 20
    lower: float = -0.3
    upper: float = 0.3
    gamma: float = 4.0
    alpha_reg: float = 1e-5
    alpha_cov: float = 0.1
    noise_amplitude: float = 1.0
    constraint_stride: int = 1
    estimators: tuple = ESTIMATORS
    N: int = 100000
    N_schedule: tuple = (100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000, 100000)
    reference_N: int = 10_000_000
    seed: int = 0
    repetitions: int = 50
    converge_bounds: tuple = (0.3, 0.7)
    variance_bounds: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)
    variance_N: int = 500
    variance_repetitions: int = 100
    K_list: tuple = (10, 15, 20)
    K_reference: int = 30
    p_list: tuple = (0.9,)
    max_iter: int = 100
    kkt_tol: float = 1e-6
    opt_N: int = 1000
    oracle_radius: float = 3.0
    oracle_offset: float = 0.0
    threads: int = 1

    _converters = {
        "estimators": _strs, "N_schedule": _ints, "converge_bounds": _floats, "variance_bounds": _floats,
        "K_list": _ints, "p_list": _floats,
    }

    def validate(self) -> "ExperimentConfig":
        err = []
        if self.problem not in PROBLEMS:
            err.append(f"problem must be one of {PROBLEMS}")
        if self.mode not in MODES:
            err.append(f"mode must be one of {MODES}")
        if self.n < 3:
            err.append("n must be at least 3")
        if self.K < 1 or self.K_reference < 1 or any(k < 1 for k in self.K_list):
            err.append("KL truncations must be positive")
        if any(k > self.K_reference for k in self.K_list):
            err.append("K_list entries may not exceed K_reference")
        if not self.lower < self.upper:
            err.append(f"lower bound {self.lower} must be below upper bound {self.upper}")
        if any(e not in ESTIMATORS for e in self.estimators) or not self.estimators:
            err.append(f"estimators must be a non-empty subset of {ESTIMATORS}")
        for name in ("N", "reference_N", "repetitions", "variance_N", "variance_repetitions", "opt_N",
                     "threads", "constraint_stride"):
            if getattr(self, name) < 1:
                err.append(f"{name} must be positive")
        if any(N < 2 for N in self.N_schedule) or not self.N_schedule:
            err.append("N_schedule needs entries >= 2")
        if any(b <= 0 for b in self.converge_bounds + self.variance_bounds):
            err.append("bound half-widths must be positive")
        if any(not 0 < p < 1 for p in self.p_list):
            err.append("target probabilities must lie in (0, 1)")
        for name in ("gamma", "alpha_cov", "noise_amplitude", "kkt_tol", "oracle_radius"):
            if not getattr(self, name) > 0:
                err.append(f"{name} must be positive")
        if self.alpha_reg < 0 or self.seed < 0 or self.max_iter < 0:
            err.append("alpha_reg, seed and max_iter must be non-negative")
        if err:
            raise ConfigError("; ".join(err))
        return self

    # -- text form ----------------------------------------------------
    def to_text(self) -> str:
        lines = ["[experiment]"]
        for f in fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        if not cp.has_section("experiment"):
            raise ConfigError("config needs an [experiment] section")
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in cp.items("experiment"):
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _convert(key, raw, known[key])
        return cls(**kw).validate()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def sha256(self) -> str:
        """Hash of the experiment definition; the thread count does not change results and is left out."""
        text = "".join(line + "\n" for line in self.to_text().splitlines() if not line.startswith("threads ="))
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw).validate()

    def fast(self) -> "ExperimentConfig":
        """Desk-scale profile: n = 64, sample counts capped at 1e4, R = 20."""
        cap = 10_000
        return self.replace(
            n=64 if self.problem == "linear" else self.n,
            N=min(self.N, cap),
            N_schedule=tuple(N for N in self.N_schedule if N <= cap) or (min(self.N_schedule[0], cap),),
            reference_N=min(self.reference_N, 1_000_000),
            repetitions=min(self.repetitions, 20),
            variance_repetitions=min(self.variance_repetitions, 20),
            opt_N=min(self.opt_N, cap),
        )


def _convert(key, raw, f):
    conv = ExperimentConfig._converters.get(key)
    try:
        if conv is not None:
            return conv(raw)
        if f.type in ("int", int):
            v = float(raw)
            if v != int(v):
                raise ValueError(f"{raw!r} is not an integer")
            return int(v)
        if f.type in ("float", float):
            v = float(raw)
            if math.isnan(v):
                raise ValueError("NaN")
            return v
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
