"""Experiment configuration files: flat ``key = value`` text under ``[experiment]``."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .forms import VARIANTS

KINDS = (
    "convergence-h",
    "convergence-p",
    "robustness-theta",
    "robustness-kappa",
    "robustness-thetakappa",
    "superconvergence",
)

# swept physical parameter per kind (None: no sweep)
SWEEP_KEY = {
    "robustness-theta": "theta",
    "superconvergence": "nu_pT",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    N: tuple[int, ...]
    ell: tuple[int, ...]
    variants: tuple[str, ...] = ("stab",)
    seed: int = 0
    lloyd_iterations: int = 100
    # physical overrides; None keeps the convergence-test value
    theta: tuple[float, ...] | None = None
    kappa: float | None = None
    abc: float | None = None
    cf: float | None = None
    nu_u: float = 1.0
    nu_pT: tuple[float, ...] = (1.0,)
    mirrored: bool = False
    # solver
    tol: float = 1e-10
    max_iter: int = 1000
    stopping_norm: str = "absolute"
    solver: str = "auto"
    workers: int = 1
    heavy_N: int = 10000
    heavy_ell: int = 5
    out: str | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.N or not self.ell or not self.variants:
            raise ConfigError("N, ell and variants must be nonempty")
        if min(self.ell) < 1:
            raise ConfigError("degrees must be >= 1")
        if min(self.N) < 1:
            raise ConfigError("N must be positive")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}")
        if self.theta is not None and not self.theta:
            raise ConfigError("theta sweep is empty")
        if self.kind == "robustness-theta" and self.theta is None:
            raise ConfigError("robustness-theta needs a theta list")
        if self.max_iter < 1 or self.tol <= 0:
            raise ConfigError("need tol > 0 and max_iter >= 1")

    def sweep(self) -> list[float | None]:
        key = SWEEP_KEY.get(self.kind)
        if key is None:
            return [None]
        return list(getattr(self, key))

    def is_heavy(self, N: int, ell: int) -> bool:
        return N >= self.heavy_N or ell >= self.heavy_ell


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {
    "kind": str.strip,
    "N": _ints,
    "ell": _ints,
    "variants": _words,
    "seed": int,
    "lloyd_iterations": int,
    "theta": _floats,
    "kappa": float,
    "abc": float,
    "cf": float,
    "nu_u": float,
    "nu_pT": _floats,
    "mirrored": _bool,
    "tol": float,
    "max_iter": int,
    "stopping_norm": str.strip,
    "solver": str.strip,
    "workers": int,
    "heavy_N": int,
    "heavy_ell": int,
    "out": str.strip,
}


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case (N vs n)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if "experiment" not in cp:
        raise ConfigError(f"{source}: missing [experiment] section")
    known = {f.name for f in fields(ExperimentConfig)} - {"extra"}
    kw = {}
    for key, raw in cp["experiment"].items():
        if key not in known:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            kw[key] = _PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from exc
    for req in ("kind", "N", "ell"):
        if req not in kw:
            raise ConfigError(f"{source}: missing required key {req!r}")
    return ExperimentConfig(**kw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
