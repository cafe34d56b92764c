"""Ornstein-Uhlenbeck noise processes, conditioned bridges, and 1/f composites.

All times are in nanoseconds and relaxation rates ``gamma`` in 1/ns.
Amplitude units are carried by the caller (a channel coupling constant is
applied elsewhere); ``sigma`` has units of amplitude/sqrt(ns).

The exact single-step law of the OU process

    dX = gamma * (mu - X) dt + sigma dW

is used throughout -- there is no Euler discretization error anywhere in
this module.  Conditioning a stationary OU process on its values at two
grid points splits it into a deterministic interpolation (the conditional
mean, see :func:`bridge_mean`) plus a zero-boundary bridge fluctuation
with covariance :func:`bridge_covariance`.  That decomposition is what the
coarse-graining layer integrates against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "OUParams",
    "ou_step",
    "sample_coarse",
    "bridge_weights",
    "bridge_mean",
    "bridge_covariance",
    "sample_zero_bridge",
    "make_one_over_f",
    "quasi_static",
    "analytic_psd",
    "CoarseTrajectory",
    "sample_channels",
    "sample_sum_uniform",
    "STREAM_NOISE",
    "STREAM_MEAS",
    "STREAM_ORACLE",
]

# Top-level entries of the SeedSequence spawn key.  Every consumer of
# randomness in the package derives its generator from
# SeedSequence(entropy=seed, spawn_key=(stream, ...)) so that adding a new
# consumer can never shift the draws of an existing one.
STREAM_NOISE = 0  # noise trajectories: (STREAM_NOISE, realization, channel, component)
STREAM_MEAS = 1  # measurement outcomes: (STREAM_MEAS, realization)
STREAM_ORACLE = 2  # brute-force averaging paths: (STREAM_ORACLE,)

# Below this value of gamma*dt the process is treated as frozen over the
# interval (the exact formulas degrade to 0/0 only at gamma = 0 exactly,
# but the cutoff keeps downstream consumers honest about the crossover).
_FROZEN_CUTOFF = 1e-14


@dataclass(frozen=True)
class OUParams:
    """Parameters of a single Ornstein-Uhlenbeck component.

    Parameters
    ----------
    gamma : float
        Relaxation rate in 1/ns.  ``gamma = 0`` describes a quasi-static
        component: a value frozen in time, drawn once per trajectory.
    sigma : float
        Diffusion amplitude in amplitude-units/sqrt(ns).  Must be 0 when
        ``gamma = 0`` (a frozen component does not diffuse).
    mu : float
        Mean.  Noise channels use 0; a biased control would not.
    stationary_var : float, optional
        Variance of the stationary law.  Derived as ``sigma**2 / (2*gamma)``
        when ``gamma > 0``; required for a quasi-static component, where it
        is the variance of the frozen draw.
    """

    gamma: float
    sigma: float
    mu: float = 0.0
    stationary_var: Optional[float] = field(default=None)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.gamma > 0:
            derived = self.sigma**2 / (2.0 * self.gamma)
            if self.stationary_var is None:
                object.__setattr__(self, "stationary_var", derived)
            elif not np.isclose(self.stationary_var, derived, rtol=1e-12, atol=0.0):
                raise ValueError(
                    "stationary_var inconsistent with sigma**2/(2*gamma): "
                    f"{self.stationary_var} vs {derived}"
                )
        else:
            if self.sigma != 0.0:
                raise ValueError("a gamma = 0 component must have sigma = 0")
            if self.stationary_var is None:
                object.__setattr__(self, "stationary_var", 0.0)

    @property
    def stationary_std(self) -> float:
        return float(np.sqrt(self.stationary_var))

    def autocovariance(self, lag_ns) -> np.ndarray:
        """Stationary autocovariance  Var * exp(-gamma |lag|)."""
        lag = np.asarray(lag_ns, dtype=float)
        return self.stationary_var * np.exp(-self.gamma * np.abs(lag))


def ou_step(x, params: OUParams, dt: float, rng: np.random.Generator):
    """Advance OU values by ``dt`` using the exact transition law.

    ``x`` may be a scalar or an array; one Gaussian draw is made per entry.
    The update is

        x' = mu + (x - mu) e^(-gamma dt) + sqrt(Var_inf (1 - e^(-2 gamma dt))) n

    with n ~ N(0, 1), which is exact for every ``dt`` (no step-size error).
    A quasi-static component (gamma = 0) returns ``x`` unchanged.
    """
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    x = np.asarray(x, dtype=float)
    decay = np.exp(-params.gamma * dt)
    # -expm1 keeps full precision when gamma*dt is tiny.
    step_var = params.stationary_var * -np.expm1(-2.0 * params.gamma * dt)
    out = params.mu + (x - params.mu) * decay
    if step_var > 0.0:
        out = out + np.sqrt(step_var) * rng.standard_normal(x.shape)
    return out


def sample_coarse(
    params: OUParams,
    times: Sequence[float],
    n_paths: int,
    rng: np.random.Generator,
    x0=None,
) -> np.ndarray:
    """Sample OU paths at the given (sorted) times, exactly.

    Returns an array of shape ``(n_paths, len(times))``.  When ``x0`` is
    None the paths start from the stationary law at ``times[0]`` (for a
    quasi-static component this is the single frozen draw).
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a non-empty 1-d sequence")
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted ascending")
    out = np.empty((n_paths, times.size), dtype=float)
    if x0 is None:
        out[:, 0] = params.mu + params.stationary_std * rng.standard_normal(n_paths)
    else:
        out[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths,))
    for j in range(1, times.size):
        out[:, j] = ou_step(out[:, j - 1], params, times[j] - times[j - 1], rng)
    return out


def bridge_weights(gamma: float, dt: float, tau) -> tuple[np.ndarray, np.ndarray]:
    """Interpolation weights (w_start, w_end) of the conditional mean.

    Conditioning an OU process on its values at the ends of ``[0, dt]``
    gives a mean that interpolates the boundary values:

        E[X(tau) | X(0)=a, X(dt)=b] = mu + (a-mu) w_start(tau) + (b-mu) w_end(tau)

    with  w_start = sinh(gamma (dt-tau)) / sinh(gamma dt)  and
    w_end = sinh(gamma tau) / sinh(gamma dt).  The implementation uses the
    equivalent all-negative-exponent form, which stays finite for
    gamma*dt ~ 1e4 where sinh overflows, and degrades gracefully to the
    straight-line weights (dt-tau)/dt, tau/dt as gamma -> 0.
    """
    tau = np.asarray(tau, dtype=float)
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    g = gamma * dt
    if g < _FROZEN_CUTOFF:
        return (dt - tau) / dt, tau / dt
    # sinh(y)/sinh(Y) = e^(y-Y) expm1(-2y)/expm1(-2Y)
    den = np.expm1(-2.0 * g)
    w_start = np.exp(-gamma * tau) * np.expm1(-2.0 * gamma * (dt - tau)) / den
    w_end = np.exp(-gamma * (dt - tau)) * np.expm1(-2.0 * gamma * tau) / den
    return w_start, w_end


def bridge_mean(x_start: float, x_end: float, params: OUParams, dt: float, tau):
    """Conditional mean of the OU process on ``[0, dt]`` given both ends."""
    w_s, w_e = bridge_weights(params.gamma, dt, tau)
    return params.mu + (x_start - params.mu) * w_s + (x_end - params.mu) * w_e


def bridge_covariance(params: OUParams, dt: float, s, t) -> np.ndarray:
    """Covariance of the zero-boundary bridge fluctuation on ``[0, dt]``.

    For s <= t,

        C(s, t) = (sigma^2 / gamma) sinh(gamma s) sinh(gamma (dt-t)) / sinh(gamma dt),

    independent of the conditioned boundary values.  Implemented in the
    overflow-safe product form

        C(s, t) = Var_inf e^(-gamma (t-s)) expm1(-2 gamma s) expm1(-2 gamma (dt-t))
                  / expm1(-2 gamma dt),

    which also covers the Brownian-bridge limit sigma^2 s (dt-t)/dt as
    gamma -> 0.  ``s`` and ``t`` broadcast; the result is symmetrized so
    argument order does not matter.  Exactly zero on the boundary.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    lo = np.minimum(s, t)
    hi = np.maximum(s, t)
    g = params.gamma * dt
    if g < _FROZEN_CUTOFF:
        # Brownian-bridge limit; vanishes identically for a frozen component.
        return params.sigma**2 * lo * (dt - hi) / dt
    # (1 - e^-x) = -expm1(-x): the two numerator factors cancel signs, the
    # denominator contributes the leading minus.
    return (
        params.stationary_var
        * np.exp(-params.gamma * (hi - lo))
        * np.expm1(-2.0 * params.gamma * lo)
        * np.expm1(-2.0 * params.gamma * (dt - hi))
        / -np.expm1(-2.0 * g)
    )


def sample_zero_bridge(
    params: OUParams,
    dt: float,
    taus: Sequence[float],
    n_paths: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample zero-boundary bridge paths at interior times ``taus``.

    Construction: run an exact OU path Y from Y(0) = 0 over the requested
    times plus the right endpoint, then subtract its endpoint leakage,

        eta(tau) = Y(tau) - w_end(tau) Y(dt).

    The subtraction reproduces the bridge law exactly (Gaussian
    conditioning is linear) and pins both endpoints to exactly 0.0 in
    floating point.  Returns shape ``(n_paths, len(taus))``.
    """
    taus = np.asarray(taus, dtype=float)
    if np.any(taus < 0) or np.any(taus > dt):
        raise ValueError("bridge times must lie inside [0, dt]")
    if np.any(np.diff(taus) < 0):
        raise ValueError("bridge times must be sorted ascending")
    if params.gamma * dt < _FROZEN_CUTOFF:
        if params.sigma == 0.0:
            return np.zeros((n_paths, taus.size))
        # Brownian-bridge limit of the same construction.
        grid = np.concatenate([[0.0], taus, [dt]])
        incs = np.sqrt(np.maximum(np.diff(grid), 0.0)) * rng.standard_normal(
            (n_paths, taus.size + 1)
        )
        w = np.cumsum(incs, axis=1)  # Wiener values at taus + [dt]
        return (w[:, :-1] - np.outer(w[:, -1], taus / dt)) * params.sigma

    centered = OUParams(params.gamma, params.sigma, mu=0.0)
    grid = taus if taus.size and taus[-1] == dt else np.concatenate([taus, [dt]])
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    y = sample_coarse(centered, grid, n_paths, rng, x0=0.0)
    _, w_end = bridge_weights(params.gamma, dt, grid)
    bridged = y - np.outer(y[:, -1], w_end)
    # Map back onto the requested times.
    idx = np.searchsorted(grid, taus)
    return bridged[:, idx]


def make_one_over_f(f_min_hz: float, f_max_hz: float, n: int, p: float) -> list[OUParams]:
    """Build the OU components of a 1/f composite.

    ``n`` corner frequencies are log-spaced over [f_min_hz, f_max_hz]
    (endpoints included); each component gets gamma_k = 2 pi f_k and
    sigma_k^2 = p gamma_k, i.e. every component carries the same
    stationary variance p/2.  The summed one-sided power spectral density
    is proportional to 1/f between the extreme corners.
    """
    if not (0 < f_min_hz < f_max_hz):
        raise ValueError("need 0 < f_min_hz < f_max_hz")
    if n < 2:
        raise ValueError("need at least two components")
    if p < 0:
        raise ValueError("p must be >= 0")
    f_k = np.logspace(np.log10(f_min_hz), np.log10(f_max_hz), n)
    comps = []
    for f in f_k:
        gamma = 2.0 * np.pi * f * 1e-9  # Hz -> 1/ns
        comps.append(OUParams(gamma=gamma, sigma=np.sqrt(p * gamma)))
    return comps


def quasi_static(p: float) -> OUParams:
    """A frozen component: one draw of variance ``p`` held for the whole run."""
    if p < 0:
        raise ValueError("p must be >= 0")
    return OUParams(gamma=0.0, sigma=0.0, stationary_var=p)


@dataclass(frozen=True)
class CoarseTrajectory:
    """One realization of every noise component, sampled on a shared grid.

    Attributes
    ----------
    grid : ndarray, shape (n_times,)
        Strictly increasing sample times in ns.
    values : ndarray, shape (n_components_total, n_times)
        One row per component, channels concatenated in order.
    channel_slices : tuple of slice
        ``values[channel_slices[c]]`` are the rows of channel ``c``.
    """

    grid: np.ndarray
    values: np.ndarray
    channel_slices: tuple

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid must be 1-d with at least two points")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if values.ndim != 2 or values.shape[1] != grid.size:
            raise ValueError("values must have shape (n_components, len(grid))")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def n_channels(self) -> int:
        return len(self.channel_slices)

    def channel_values(self, channel: int) -> np.ndarray:
        return self.values[self.channel_slices[channel]]


def sample_channels(
    channels: Sequence[Sequence[OUParams]],
    grid: Sequence[float],
    seed: int,
    realization: int = 0,
) -> CoarseTrajectory:
    """Draw one coarse-grid realization of several noise channels.

    Each component of each channel gets its own counter-derived stream
    ``SeedSequence(seed, spawn_key=(STREAM_NOISE, realization, channel,
    component))``, so results are reproducible regardless of how many other
    channels exist and realizations can be generated in any order (or split
    across processes) without changing the draws.
    """
    grid = np.asarray(grid, dtype=float)
    rows = []
    slices = []
    start = 0
    for ci, comps in enumerate(channels):
        for ni, params in enumerate(comps):
            ss = np.random.SeedSequence(
                entropy=seed, spawn_key=(STREAM_NOISE, realization, ci, ni)
            )
            rng = np.random.default_rng(ss)
            rows.append(sample_coarse(params, grid, 1, rng)[0])
        slices.append(slice(start, start + len(comps)))
        start += len(comps)
    values = np.vstack(rows) if rows else np.zeros((0, grid.size))
    return CoarseTrajectory(grid=grid, values=values, channel_slices=tuple(slices))


def sample_sum_uniform(
    components: Sequence[OUParams],
    dt: float,
    n_points: int,
    n_paths: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample the summed process of many components on a uniform grid.

    Equivalent to summing :func:`sample_coarse` over ``components`` on
    ``np.arange(n_points) * dt`` but runs the exact one-step recursion
    ``x[j] = a x[j-1] + b n[j]`` through :func:`scipy.signal.lfilter`, which
    is orders of magnitude faster for the long traces needed by spectral
    estimates.  Returns shape ``(n_paths, n_points)``.
    """
    from scipy.signal import lfilter

    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    out = np.zeros((n_paths, n_points))
    for params in components:
        x0 = params.mu + params.stationary_std * rng.standard_normal(n_paths)
        if params.gamma * dt < _FROZEN_CUTOFF:
            out += x0[:, None]
            continue
        a = np.exp(-params.gamma * dt)
        b = np.sqrt(params.stationary_var * -np.expm1(-2.0 * params.gamma * dt))
        drive = b * rng.standard_normal((n_paths, n_points))
        # lfilter evaluates y[j] = drive[j] + a y[j-1] with y[-1] = 0, so
        # seeding drive[0] with the centered stationary draw makes y exact.
        drive[:, 0] = x0 - params.mu
        y = lfilter([1.0], [1.0, -a], drive, axis=1)
        out += params.mu + y
    return out


def analytic_psd(components: Sequence[OUParams], f_hz) -> np.ndarray:
    """One-sided PSD (amplitude^2 / Hz) of a sum of independent components.

    Each OU component contributes the Lorentzian

        S_k(f) = 2 sigma_k^2 / (gamma_k^2 + (2 pi f)^2)

    (in SI time units; the conversion from the internal 1/ns rates is done
    here).  Quasi-static components are spectrally singular at f = 0 and
    contribute nothing at f > 0.
    """
    f = np.asarray(f_hz, dtype=float)
    out = np.zeros_like(f)
    for c in components:
        if c.gamma <= 0.0:
            continue
        gamma_si = c.gamma * 1e9  # 1/ns -> 1/s
        sigma_sq_si = c.sigma**2 * 1e9  # u^2/ns -> u^2/s
        out = out + 2.0 * sigma_sq_si / (gamma_si**2 + (2.0 * np.pi * f) ** 2)
    return out
