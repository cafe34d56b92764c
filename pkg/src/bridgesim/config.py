"""Validated JSON run configurations for the command line interface.

Every physical quantity carries its unit in the key name (``..._ns``,
``..._mhz``, ``..._mtesla``); conversions to the internal angular rad/ns
convention happen here, at the boundary, and nowhere else.  All schemas
reject unknown keys so a typo fails loudly instead of silently falling
back to a default.

Noise components are described by one of three shapes::

    [{"gamma_rad_per_ns": ..., "sigma_sq": ...}, ...]   explicit list
    {"one_over_f": {"f_min_hz": ..., "f_max_hz": ..., "n": ..., "p": ...}}
    {"quasi_static": {"p": ...}}

``sigma_sq`` is the squared diffusion amplitude in amplitude-units^2/ns;
``p`` carries the squared amplitude of the composite (see
:func:`bridgesim.stochastic.make_one_over_f` and
:func:`bridgesim.stochastic.quasi_static`).  Each explicit component may
give its relaxation rate either directly (``gamma_rad_per_ns``) or as a
corner frequency (``f0_hz``).
"""

from __future__ import annotations

import json
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .circuits import (
    PINK_EXCHANGE_AMP,
    PINK_EXCHANGE_BAND_HZ,
    PINK_EXCHANGE_COMPONENTS,
    PINK_FIELD_AMP_GHZ,
    PINK_FIELD_BAND_HZ,
    PINK_FIELD_COMPONENTS,
    STATIC_EXCHANGE_AMP,
    STATIC_FIELD_AMP_GHZ,
    NoiseModel,
    SpinChainConfig,
)
from .stochastic import OUParams, make_one_over_f, quasi_static

__all__ = [
    "ConfigError",
    "OUComponentSpec",
    "OneOverFBlock",
    "QuasiStaticBlock",
    "ComponentsSpec",
    "build_components",
    "NoiseChannelSpec",
    "ChainSpec",
    "ChainNoiseSpec",
    "SampleNoiseConfig",
    "SingleQubitConfig",
    "TwoQubitConfig",
    "ParityConfig",
    "CalibrateConfig",
    "CompareCoarseConfig",
    "load_config",
    "noise_block",
]


class ConfigError(ValueError):
    """A configuration file failed to parse or validate."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Noise-component grammar
# ---------------------------------------------------------------------------


class OUComponentSpec(_Strict):
    """One explicit OU component; give exactly one of the two rate keys."""

    gamma_rad_per_ns: Optional[float] = None
    f0_hz: Optional[float] = None
    sigma_sq: float = Field(ge=0.0)
    mu: float = 0.0

    @model_validator(mode="after")
    def _one_rate(self):
        if (self.gamma_rad_per_ns is None) == (self.f0_hz is None):
            raise ValueError(
                "give exactly one of gamma_rad_per_ns and f0_hz per component"
            )
        rate = self.gamma_rad_per_ns
        if rate is None:
            rate = 2.0 * np.pi * self.f0_hz * 1e-9
        if rate <= 0.0:
            raise ValueError(
                "explicit components need a positive rate; "
                "use the quasi_static block for a frozen component"
            )
        return self

    def build(self) -> OUParams:
        gamma = self.gamma_rad_per_ns
        if gamma is None:
            gamma = 2.0 * np.pi * self.f0_hz * 1e-9
        return OUParams(gamma=gamma, sigma=float(np.sqrt(self.sigma_sq)), mu=self.mu)


class OneOverFSpec(_Strict):
    f_min_hz: float = Field(gt=0.0)
    f_max_hz: float = Field(gt=0.0)
    n: int = Field(ge=1)
    p: float = Field(ge=0.0)

    @model_validator(mode="after")
    def _ordered_band(self):
        if self.f_max_hz < self.f_min_hz:
            raise ValueError("f_max_hz must be >= f_min_hz")
        return self


class OneOverFBlock(_Strict):
    one_over_f: OneOverFSpec


class QuasiStaticSpec(_Strict):
    p: float = Field(ge=0.0)


class QuasiStaticBlock(_Strict):
    quasi_static: QuasiStaticSpec


ComponentsSpec = Union[List[OUComponentSpec], OneOverFBlock, QuasiStaticBlock]


def build_components(spec, zero_mean: bool = True) -> tuple:
    """Turn a components block into a tuple of OUParams."""
    if isinstance(spec, OneOverFBlock):
        s = spec.one_over_f
        return tuple(make_one_over_f(s.f_min_hz, s.f_max_hz, s.n, s.p))
    if isinstance(spec, QuasiStaticBlock):
        return (quasi_static(spec.quasi_static.p),)
    comps = tuple(c.build() for c in spec)
    if zero_mean and any(c.mu != 0.0 for c in comps):
        raise ConfigError(
            "noise driving the dynamics must have zero mean; "
            "fold a bias into the control schedule instead"
        )
    return comps


# ---------------------------------------------------------------------------
# Shared blocks
# ---------------------------------------------------------------------------


class NoiseChannelSpec(_Strict):
    """A named channel of the raw sampler (sample-noise command)."""

    operator: str
    components: ComponentsSpec


class ChainSpec(_Strict):
    """Spin-chain parameters; defaults mirror the library defaults."""

    n_spins: int = 6
    g_factor: float = 2.0
    field_mtesla: float = 500.05
    deltas_mhz: Optional[List[float]] = None
    pulse_ns: float = 20.0
    idle_ns: float = 20.0
    ancilla_pair: int = 1

    def build(self) -> SpinChainConfig:
        deltas = self.deltas_mhz
        if deltas is None:
            if self.n_spins != 6:
                raise ConfigError("deltas_mhz is required when n_spins != 6")
            deltas = [10.0, 10.0, -10.0, -10.0, 10.0]
        return SpinChainConfig(
            n_spins=self.n_spins,
            g_factor=self.g_factor,
            field_mtesla=self.field_mtesla,
            deltas_mhz=tuple(deltas),
            pulse_ns=self.pulse_ns,
            idle_ns=self.idle_ns,
            ancilla_pair=self.ancilla_pair,
        )


class ChainNoiseSpec(_Strict):
    """Magnetic (rad/ns) and fractional-exchange noise of the chain."""

    label: str = "custom"
    magnetic: Optional[ComponentsSpec] = None
    exchange: Optional[ComponentsSpec] = None

    def build(self) -> NoiseModel:
        magnetic = () if self.magnetic is None else build_components(self.magnetic)
        exchange = () if self.exchange is None else build_components(self.exchange)
        return NoiseModel(label=self.label, magnetic=magnetic, exchange=exchange)


def noise_block(label: str) -> dict:
    """Config dict of a named noise model, matching the library constructors."""
    if label == "noiseless":
        return {"label": "noiseless"}
    if label == "one_over_f":
        return {
            "label": "one_over_f",
            "magnetic": {
                "one_over_f": {
                    "f_min_hz": PINK_FIELD_BAND_HZ[0],
                    "f_max_hz": PINK_FIELD_BAND_HZ[1],
                    "n": PINK_FIELD_COMPONENTS,
                    "p": (2.0 * np.pi * PINK_FIELD_AMP_GHZ) ** 2,
                }
            },
            "exchange": {
                "one_over_f": {
                    "f_min_hz": PINK_EXCHANGE_BAND_HZ[0],
                    "f_max_hz": PINK_EXCHANGE_BAND_HZ[1],
                    "n": PINK_EXCHANGE_COMPONENTS,
                    "p": PINK_EXCHANGE_AMP**2,
                }
            },
        }
    if label == "quasi_static":
        return {
            "label": "quasi_static",
            "magnetic": {
                "quasi_static": {"p": 0.5 * (2.0 * np.pi * STATIC_FIELD_AMP_GHZ) ** 2}
            },
            "exchange": {"quasi_static": {"p": 0.5 * STATIC_EXCHANGE_AMP**2}},
        }
    raise ConfigError(f"unknown noise model label {label!r}")


# ---------------------------------------------------------------------------
# Per-subcommand configurations
# ---------------------------------------------------------------------------


class SampleNoiseConfig(_Strict):
    """Fine-grained trajectory sampling plus spectral comparison."""

    channels: List[NoiseChannelSpec] = Field(min_length=1)
    duration_ns: float = Field(default=1e5, gt=0.0)
    dt_ns: float = Field(default=10.0, gt=0.0)
    n_realizations: int = Field(default=20, ge=1)
    welch_segment_length: int = Field(default=30, ge=4)
    dump_points: int = Field(default=1000, ge=2)
    seed: int = 0


class SingleQubitConfig(_Strict):
    """Single-qubit dephasing block: engine vs closed form vs oracle."""

    components: ComponentsSpec = Field(
        default_factory=lambda: [
            OUComponentSpec(gamma_rad_per_ns=0.05, sigma_sq=2.5e-4)
        ]
    )
    duration_ns: float = Field(default=40.0, gt=0.0)
    oracle_paths: int = Field(default=2000, ge=1)
    fine_dt_ns: float = Field(default=0.05, gt=0.0)
    seed: int = 0


class TwoQubitConfig(_Strict):
    """Exchange-coupled pair with multiplicative amplitude noise."""

    j_mhz: float = Field(default=100.0, gt=0.0)
    components: ComponentsSpec = Field(
        default_factory=lambda: QuasiStaticBlock(
            quasi_static=QuasiStaticSpec(p=0.5 * STATIC_EXCHANGE_AMP**2)
        )
    )
    duration_ns: float = Field(default=20.0, gt=0.0)
    oracle_paths: int = Field(default=2000, ge=1)
    fine_dt_ns: float = Field(default=0.05, gt=0.0)
    seed: int = 0


class ParityConfig(_Strict):
    """Repeated weight-2 parity checks on the six-spin chain."""

    chain: ChainSpec = Field(default_factory=ChainSpec)
    noise: ChainNoiseSpec
    rounds: int = Field(ge=1)
    coarse_ns: float = Field(default=40.0, gt=0.0)
    n_realizations: int = Field(ge=1)
    variant: Literal["standard", "instant_cnot", "perfect_measurement"] = "standard"
    bernoulli_q: float = Field(default=3e-3, ge=0.0, le=1.0)
    welch_segment_length: int = Field(default=30, ge=4)
    bootstrap_resamples: int = Field(default=1000, ge=1)
    seed: int = 0


class CalibrateConfig(_Strict):
    """T2* decay-curve experiments; None falls back to library defaults."""

    experiment: Literal["free_induction", "exchange"]
    noise: ChainNoiseSpec
    n_points: Optional[int] = Field(default=None, ge=8)
    dt_ns: Optional[float] = Field(default=None, gt=0.0)
    n_trajectories: int = Field(default=1000, ge=1)
    field_mtesla: Optional[float] = Field(default=None, gt=0.0)
    j_mhz: float = Field(default=100.0, gt=0.0)
    seed: int = 0


class CompareCoarseConfig(_Strict):
    """The same parity run at two coarse-graining scales."""

    chain: ChainSpec = Field(default_factory=ChainSpec)
    noise: ChainNoiseSpec
    rounds: int = Field(ge=1)
    n_realizations: int = Field(ge=1)
    coarse_scales_ns: Tuple[float, float] = (40.0, 120.0)
    bootstrap_resamples: int = Field(default=1000, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _distinct_scales(self):
        a, b = self.coarse_scales_ns
        if a <= 0 or b <= 0 or a == b:
            raise ValueError("coarse_scales_ns must be two distinct positive scales")
        return self


def load_config(path: str, model: type) -> _Strict:
    """Read and validate a JSON config file against a schema class."""
    try:
        with open(path, "r") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        issues = "; ".join(
            ".".join(str(p) for p in err["loc"]) + ": " + err["msg"]
            for err in exc.errors()
        )
        raise ConfigError(f"config file {path} failed validation: {issues}") from exc
