"""Flat key/value experiment configuration.

A config file is TOML without tables: every key sits at the top level and
every key has a matching CLI flag.  Unknown keys are rejected.

Example::

    model = "linear_gaussian"
    x0_law = "gaussian"
    x0_params = [0.0, 0.05]
    y0 = 2.0
    dt = 0.05
    delta = 0.01
    paths = 30000
    particles = 500
    seed = 11
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from ..model import (DiffusionModel, InitialLaw, LinearGaussianParams, ModelError, SimGrid, SteinSteinParams,
                     linear_gaussian_model, stein_stein_model)
from ..rmc import BasisSet, default_basis, linear_gaussian_basis, stein_stein_basis


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


MODELS = ("linear_gaussian", "stein_stein")
ALGOS = ("ls", "tvr")
SOLVERS = ("mc", "pde", "european")
FORMATS = ("csv", "json")
BASES = ("default", "linear_gaussian", "stein_stein", "stein_stein_plain")

_MODEL_KEYS = {
    "linear_gaussian": {f.name for f in fields(LinearGaussianParams)},
    "stein_stein": {f.name for f in fields(SteinSteinParams)},
}
_PARAM_KEYS = set().union(*_MODEL_KEYS.values())


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun one experiment.

    Model parameters not given fall back to the model defaults.  ``y0``
    defaults to 2 for the linear-Gaussian model and to ``ln(110)`` (log of
    the initial price) for Stein-Stein.  ``substeps = 0`` means one Euler
    step per 0.01 of observation interval.
    """

    model: str = "linear_gaussian"
    params: dict = field(default_factory=dict)
    x0_law: str | None = None
    x0_params: tuple | None = None
    y0: float | None = None
    T: float = 1.0
    dt: float = 0.05
    delta: float = 0.01
    substeps: int = 0
    paths: int = 30000
    particles: int = 500
    basis: str = "default"
    algo: str = "ls"
    solver: str = "mc"
    seed: int = 11
    eur_order: int = 8
    european_paths: int = 1000000
    pde_n1: int = 400
    pde_n2: int = 400
    out: str | None = None
    format: str = "json"

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))
        if self.x0_law is None:
            law = ("gaussian", (0.0, 0.05)) if self.model == "linear_gaussian" else ("dirac", (0.15,))
            object.__setattr__(self, "x0_law", law[0])
            if self.x0_params is None:
                object.__setattr__(self, "x0_params", law[1])
        if self.x0_params is None:
            raise ConfigError(f"x0_params are required for x0_law {self.x0_law!r}")
        if isinstance(self.x0_params, (int, float)):
            object.__setattr__(self, "x0_params", (self.x0_params,))
        object.__setattr__(self, "x0_params", tuple(float(v) for v in self.x0_params))
        if self.y0 is None:
            object.__setattr__(self, "y0", 2.0 if self.model == "linear_gaussian" else math.log(110.0))
        self.validate()

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.model in MODELS, f"model must be one of {MODELS}, got {self.model!r}")
        need(self.algo in ALGOS, f"algo must be one of {ALGOS}, got {self.algo!r}")
        need(self.solver in SOLVERS, f"solver must be one of {SOLVERS}, got {self.solver!r}")
        need(self.format in FORMATS, f"format must be one of {FORMATS}, got {self.format!r}")
        need(self.basis in BASES, f"basis must be one of {BASES}, got {self.basis!r}")
        extra = set(self.params) - _MODEL_KEYS[self.model]
        need(not extra, f"parameters {sorted(extra)} do not belong to model {self.model!r}")
        need(self.paths >= 2, "paths must be >= 2")
        need(self.particles >= 2, "particles must be >= 2")
        need(self.seed >= 0, "seed must be nonnegative")
        need(self.substeps >= 0, "substeps must be >= 0")
        need(self.eur_order >= 2, "eur_order must be >= 2")
        need(self.european_paths >= 2, "european_paths must be >= 2")
        need(self.pde_n1 >= 3 and self.pde_n2 >= 3, "PDE grids need at least 3 nodes per axis")
        need(math.isfinite(self.y0), "y0 must be finite")
        if "T" in self.params:
            need(float(self.params["T"]) == self.T, "model parameter T must match the grid horizon T")
        try:
            self.model_params()
            self.law()
            self.grid()
        except ModelError as exc:
            raise ConfigError(str(exc)) from None
        if self.model == "linear_gaussian":
            need(self.basis in ("default", "linear_gaussian"), "the Stein-Stein basis needs the Stein-Stein model")
        else:
            need(self.basis in ("default", "stein_stein", "stein_stein_plain"),
                 "the linear-Gaussian basis needs its own model")

    # -- builders ---------------------------------------------------------

    def model_params(self):
        kw = {k: float(v) for k, v in self.params.items()}
        kw["T"] = self.T
        cls = LinearGaussianParams if self.model == "linear_gaussian" else SteinSteinParams
        return cls(**kw)

    def build_model(self) -> DiffusionModel:
        p = self.model_params()
        return linear_gaussian_model(p) if self.model == "linear_gaussian" else stein_stein_model(p)

    def law(self) -> InitialLaw:
        kind = self.x0_law.replace("-", "_")
        params = self.x0_params
        if kind == "two_point" and len(params) == 2:
            params = (*params, 0.5)
        return InitialLaw(kind, tuple(params))

    def grid(self) -> SimGrid:
        return SimGrid(self.T, self.dt, self.delta, self.substeps or None)

    def build_basis(self) -> BasisSet:
        if self.basis == "linear_gaussian":
            return linear_gaussian_basis()
        if self.basis in ("stein_stein", "stein_stein_plain"):
            return stein_stein_basis(self.model_params(), bs_put=self.basis == "stein_stein")
        return default_basis(self.build_model())

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["x0_params"] = list(self.x0_params)
        return d

    def to_flat(self) -> dict[str, Any]:
        """Flat mapping with model parameters at the top level (the file layout)."""
        d = self.to_dict()
        params = d.pop("params")
        d.update(params)
        return d

    def record(self) -> dict[str, Any]:
        """Flat mapping without the output options, as stored next to results."""
        d = self.to_flat()
        d.pop("out")
        d.pop("format")
        return d

    def config_hash(self) -> str:
        """Short sha256 over the fields that determine the numbers (not ``out``/``format``)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("format")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with the non-``None`` overrides applied; model parameters may be given flat."""
        kw = {k: v for k, v in kw.items() if v is not None}
        params = dict(self.params)
        for k in list(kw):
            if k in _PARAM_KEYS and k != "T":
                params[k] = kw.pop(k)
        if "model" in kw and kw["model"] != self.model:
            params = {k: v for k, v in params.items() if k in _MODEL_KEYS.get(kw["model"], ())}
            kw.setdefault("y0", None)
            kw.setdefault("x0_law", None)
            kw.setdefault("x0_params", None)
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        try:
            return replace(self, params=params, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def config_from_mapping(data: dict[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from a flat mapping; nested tables are rejected."""
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"config must be flat; key {k!r} holds a table")
    base = base or ExperimentConfig(model=data.get("model", "linear_gaussian"))
    return base.with_overrides(**data)


def read_config_mapping(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except IsADirectoryError:
        raise ConfigError(f"config path is a directory: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read a flat TOML file; keys override ``base`` (or the defaults of the file's model)."""
    data = read_config_mapping(path)
    if base is not None and data.get("model", base.model) != base.model:
        base = None
    return config_from_mapping(data, base)
