"""Run configuration: a JSON document with named blocks and strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .diagnostics import DiagnosticsConfig
from .limit import Mode, SdeConfig
from .model import InitialProfile, Kernel, ModelSpec, ScalingParams, make_black_scholes, \
    make_constant_coefficients, make_example_1, make_example_2


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


@dataclass
class KernelBlock:
    family: str = "bump"
    width: float = 0.5
    amplitude: float = 1.0


@dataclass
class ModelBlock:
    name: str = "example_1"
    alpha: float = 1.0
    eta: float = 0.5
    q: float = 0.5
    c1: float = 2.0
    c2: float = 5.0
    M: float = 1.0
    l_0: int = 2
    kernel: KernelBlock = field(default_factory=KernelBlock)
    drift: float = 0.0
    vol: float = 1.0


@dataclass
class InitialBlock:
    b0: float = 0.8
    kind: str = "linear"
    slope: float = 1.0
    level: float = 0.0
    horizon: float = 6.0


@dataclass
class ScalingBlock:
    delta_x: Optional[float] = 0.02
    delta_p: Optional[float] = 0.1
    ladder: Optional[list] = None
    T: float = 1.0


@dataclass
class TruncationBlock:
    m: int = 2
    l_max: int = 4
    m_store: int = 0
    y_max: Optional[float] = None


@dataclass
class SdeBlock:
    delta: float = 1e-3
    mode: str = "constant_diffusion"


@dataclass
class DiagnosticsBlock:
    n_paths: int = 100
    n_draws: int = 100_000
    se_multiplier: float = 5.0
    ks_threshold: float = 0.1
    lindeberg_eps: float = 0.1
    trend_z: float = 2.0
    n_bootstrap: int = 200


@dataclass
class LimitBlock:
    n_paths: int = 500
    model: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    model: ModelBlock = field(default_factory=ModelBlock)
    initial: InitialBlock = field(default_factory=InitialBlock)
    scaling: ScalingBlock = field(default_factory=ScalingBlock)
    truncation: TruncationBlock = field(default_factory=TruncationBlock)
    sde: SdeBlock = field(default_factory=SdeBlock)
    diagnostics: DiagnosticsBlock = field(default_factory=DiagnosticsBlock)
    limit: Optional[LimitBlock] = None
    seed: int = 0

    # ---- derived objects

    def rungs(self) -> list[ScalingParams]:
        """Scaling parameters per rung; a single rung without a ladder."""
        s = self.scaling
        try:
            if s.ladder:
                return [ScalingParams(float(dx), float(dp)) for dx, dp in s.ladder]
            if s.delta_x is None or s.delta_p is None:
                raise ConfigError("scaling: give delta_x and delta_p, or a ladder")
            return [ScalingParams(s.delta_x, s.delta_p)]
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"scaling: {exc}") from exc

    def initial_profile(self) -> InitialProfile:
        i = self.initial
        return InitialProfile(i.kind, i.slope, i.level)

    def sde_config(self) -> SdeConfig:
        try:
            return SdeConfig(self.truncation.m, self.truncation.l_max, self.sde.delta, self.scaling.T,
                             Mode(self.sde.mode))
        except ValueError as exc:
            raise ConfigError(f"sde: {exc}") from exc

    def diagnostics_config(self) -> DiagnosticsConfig:
        d = self.diagnostics
        return DiagnosticsConfig(d.se_multiplier, d.ks_threshold, d.lindeberg_eps, (0.9, 1.1),
                                 d.trend_z, d.n_bootstrap)

    def build_model(self, params: Optional[ScalingParams], overrides: Optional[dict] = None) -> ModelSpec:
        m = self.model
        if overrides:
            m = _from_dict(ModelBlock, {**to_dict(m), **overrides}, "limit.model")
        kernel = Kernel(m.kernel.family, m.kernel.width, m.kernel.amplitude)
        common = dict(alpha=m.alpha, eta=m.eta, q=m.q, c1=m.c1, c2=m.c2, M=m.M, kernel=kernel)
        try:
            if m.name == "example_1":
                spec = make_example_1(params, **common)
            elif m.name == "example_2":
                spec = make_example_2(params, l_0=m.l_0, **common)
            elif m.name == "black_scholes":
                spec = make_black_scholes(m.drift, m.vol)
            elif m.name == "constant":
                spec = make_constant_coefficients(m.drift, m.vol)
            else:
                raise ConfigError(f"model.name: unknown model {m.name!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
        if self.truncation.y_max is not None:
            spec = dataclasses.replace(spec, y_max=float(self.truncation.y_max))
        return spec


_NESTED = {
    ("RunConfig", "model"): ModelBlock, ("RunConfig", "initial"): InitialBlock,
    ("RunConfig", "scaling"): ScalingBlock, ("RunConfig", "truncation"): TruncationBlock,
    ("RunConfig", "sde"): SdeBlock, ("RunConfig", "diagnostics"): DiagnosticsBlock,
    ("RunConfig", "limit"): LimitBlock, ("ModelBlock", "kernel"): KernelBlock,
}

_NUMBER = (int, float)


def _check_type(value, default, path: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, _NUMBER):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    defaults = cls()
    for name, f in names.items():
        if name not in data:
            continue
        where = f"{path}.{name}" if path else name
        nested = _NESTED.get((cls.__name__, name))
        if nested is not None and data[name] is not None:
            kwargs[name] = _from_dict(nested, data[name], where)
        else:
            kwargs[name] = _check_type(data[name], getattr(defaults, name), where)
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data, "")
    if cfg.scaling.ladder is not None:
        lad = cfg.scaling.ladder
        if not isinstance(lad, list) or not lad or not all(
                isinstance(r, list) and len(r) == 2 and all(isinstance(x, _NUMBER) for x in r) for r in lad):
            raise ConfigError("scaling.ladder: expected a nonempty list of [delta_x, delta_p] pairs")
    if cfg.initial.kind not in ("linear", "constant", "zero"):
        raise ConfigError(f"initial.kind: unknown profile {cfg.initial.kind!r}")
    try:
        Mode(cfg.sde.mode)
    except ValueError:
        raise ConfigError(f"sde.mode: unknown mode {cfg.sde.mode!r}") from None
    if cfg.limit is not None:
        _from_dict(ModelBlock, {**to_dict(cfg.model), **cfg.limit.model}, "limit.model")
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON ({exc})") from exc
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
