"""Statistical post-processing for simulated measurement records.

Pure functions over in-memory arrays: parity-flip time series, Welch
spectral-density estimates, nonlinear decay fits, and percentile-bootstrap
confidence intervals.  Simulation modules produce ensembles of outcomes or
probabilities; the helpers here reduce them to fitted parameters, spectra,
and intervals.

Conventions
-----------
- Ensembles are rectangular ``(realization, time)`` arrays.
- Time units are whatever the producer used (nanoseconds for pulse-level
  curves, rounds for measurement records); fitted rates and decay times
  come out in the same unit.
- Every fit is a deterministic least-squares problem with an analytic
  Jacobian; fits that do not converge raise instead of returning garbage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize
import scipy.signal

__all__ = [
    "TimeSeriesEnsemble",
    "FitResult",
    "parity_flip_series",
    "welch_psd",
    "fit_saturation",
    "fit_t2star",
    "bootstrap_ci",
]

_INV_E = float(np.exp(-1.0))


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeSeriesEnsemble:
    """Rectangular ensemble of equally spaced series.

    ``values[i, j]`` is realization ``i`` sampled at time ``j * spacing``.
    ``spacing`` carries the time unit (nanoseconds, rounds, ...) and is
    inherited by anything fitted to the ensemble.
    """

    values: np.ndarray
    spacing: float
    label: str = ""

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("values must be a nonempty (realization, time) array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("values must be finite")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "spacing", float(self.spacing))

    @classmethod
    def from_series(
        cls, series: Sequence[Sequence[float]], spacing: float, label: str = ""
    ) -> "TimeSeriesEnsemble":
        rows = [np.asarray(row, dtype=float) for row in series]
        if not rows:
            raise ValueError("need at least one series")
        if any(row.ndim != 1 for row in rows):
            raise ValueError("each series must be one-dimensional")
        if len({row.size for row in rows}) != 1:
            raise ValueError("ragged ensembles are not supported; pad or trim first")
        return cls(np.stack(rows), spacing, label)

    @property
    def n_realizations(self) -> int:
        return self.values.shape[0]

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.spacing * np.arange(self.n_points)

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)


@dataclass(frozen=True)
class FitResult:
    """Parameters of a converged least-squares fit.

    The fitting helpers only construct this for converged fits, so holding
    a ``FitResult`` implies convergence.  ``covariance`` is the usual
    residual-variance-scaled Gauss-Newton estimate and ``stderr`` its
    diagonal square root.
    """

    names: Tuple[str, ...]
    estimates: np.ndarray
    stderr: np.ndarray
    covariance: np.ndarray
    residual_norm: float

    def __post_init__(self) -> None:
        n = len(self.names)
        est = np.array(self.estimates, dtype=float)
        err = np.array(self.stderr, dtype=float)
        cov = np.array(self.covariance, dtype=float)
        if est.shape != (n,) or err.shape != (n,) or cov.shape != (n, n):
            raise ValueError("parameter arrays must match the number of names")
        if not np.all(np.isfinite(est)):
            raise ValueError("estimates must be finite")
        if np.any(err < 0) or not np.all(np.isfinite(err)):
            raise ValueError("standard errors must be finite and nonnegative")
        for attr, arr in (("estimates", est), ("stderr", err), ("covariance", cov)):
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        object.__setattr__(self, "residual_norm", float(self.residual_norm))

    def _index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no parameter named {name!r}; have {self.names}") from None

    def value(self, name: str) -> float:
        return float(self.estimates[self._index(name)])

    def error(self, name: str) -> float:
        return float(self.stderr[self._index(name)])


# ---------------------------------------------------------------------------
# Parity-flip series and spectra
# ---------------------------------------------------------------------------


def parity_flip_series(outcomes: Sequence[int]) -> np.ndarray:
    """Map a 0/1 outcome record to its series of changes.

    Element 0 is always 0; element j is 1 exactly when outcome j differs
    from outcome j - 1.  A 2-d input is treated as a batch of records along
    the last axis.  The output has the same shape as the input.
    """
    arr = np.asarray(outcomes)
    if arr.size == 0:
        raise ValueError("outcomes must be nonempty")
    if arr.ndim not in (1, 2):
        raise ValueError("outcomes must be 1-d or a 2-d batch")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("outcomes must be 0/1 valued")
    flips = np.zeros(arr.shape, dtype=np.uint8)
    flips[..., 1:] = arr[..., 1:] != arr[..., :-1]
    return flips


def welch_psd(
    series: Sequence[float],
    segment_length: int = 30,
    spacing: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided Welch spectral density of one series or a batch.

    Hann window, 50% overlap, per-segment mean removal, density scaling:
    summing ``psd * df`` over the returned bins recovers the series
    variance (up to windowing bias of a few percent).  Frequencies are in
    cycles per unit of ``spacing``.  For a 2-d input the transform runs
    along the last axis and the leading (realization) axis is preserved.
    """
    arr = np.asarray(series, dtype=float)
    if arr.ndim not in (1, 2):
        raise ValueError("series must be 1-d or a 2-d batch")
    if segment_length < 2:
        raise ValueError("segment_length must be at least 2")
    if arr.shape[-1] < segment_length:
        raise ValueError(
            f"series length {arr.shape[-1]} is shorter than "
            f"segment_length {segment_length}"
        )
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    freqs, psd = scipy.signal.welch(
        arr,
        fs=1.0 / spacing,
        window="hann",
        nperseg=segment_length,
        noverlap=segment_length // 2,
        detrend="constant",
        scaling="density",
        axis=-1,
    )
    return freqs, psd


# ---------------------------------------------------------------------------
# Nonlinear least-squares fits
# ---------------------------------------------------------------------------


def _package_fit(
    names: Tuple[str, ...],
    result: scipy.optimize.OptimizeResult,
    transform: Optional[Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]] = None,
) -> FitResult:
    """Convert a least_squares result into a FitResult.

    ``transform`` optionally maps internal parameters to reported ones and
    returns the Jacobian of that map, used to propagate the covariance.
    """
    m, n = result.jac.shape
    dof = max(m - n, 1)
    resid_var = 2.0 * result.cost / dof
    _, sing, vt = np.linalg.svd(result.jac, full_matrices=False)
    cutoff = np.finfo(float).eps * max(m, n) * (sing[0] if sing.size else 0.0)
    inv_sq = np.where(sing > cutoff, 1.0 / np.maximum(sing, cutoff) ** 2, 0.0)
    cov = (vt.T * inv_sq) @ vt * resid_var
    estimates = np.asarray(result.x, dtype=float)
    if transform is not None:
        estimates, dmat = transform(estimates)
        cov = dmat @ cov @ dmat.T
    stderr = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return FitResult(names, estimates, stderr, cov, float(np.linalg.norm(result.fun)))


def fit_saturation(mean_outcomes: Sequence[float], spacing: float = 1.0) -> FitResult:
    """Fit ``amplitude * (1 - exp(-2 * rate * t))`` to a mean outcome curve.

    ``mean_outcomes[j]`` is the average outcome after ``j + 1`` rounds, so
    the model is evaluated at ``t_j = (j + 1) * spacing`` and ``rate``
    comes out in inverse units of ``spacing``.  Initialization takes the
    saturation value from the last point and the rate from the early
    log-linear slope; the solver is plain Levenberg-Marquardt with an
    analytic Jacobian and raises if it has not converged after 200
    function evaluations.
    """
    y = np.asarray(mean_outcomes, dtype=float)
    if y.ndim != 1:
        raise ValueError("mean_outcomes must be 1-d")
    if y.size < 10:
        raise ValueError("need at least 10 rounds to fit a saturation curve")
    if not np.all(np.isfinite(y)):
        raise ValueError("mean_outcomes must be finite")
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    t = spacing * np.arange(1, y.size + 1, dtype=float)

    amp0 = float(y[-1])
    if not amp0 > 1e-9:
        amp0 = max(float(np.abs(y).mean()), 1e-9)
    head = max(3, y.size // 10)
    shortfall = 1.0 - y[:head] / amp0
    keep = shortfall > 1e-12
    if int(keep.sum()) >= 2:
        slope = np.polyfit(t[:head][keep], np.log(shortfall[keep]), 1)[0]
        rate0 = max(-0.5 * float(slope), 1e-12 / spacing)
    else:
        rate0 = 1.0 / (2.0 * t[-1])

    def residuals(params: np.ndarray) -> np.ndarray:
        amp, rate = params
        return amp * (1.0 - np.exp(-2.0 * rate * t)) - y

    def jacobian(params: np.ndarray) -> np.ndarray:
        amp, rate = params
        decay = np.exp(-2.0 * rate * t)
        return np.column_stack((1.0 - decay, 2.0 * amp * t * decay))

    result = scipy.optimize.least_squares(
        residuals, x0=(amp0, rate0), jac=jacobian, method="lm", max_nfev=200
    )
    if not result.success:
        raise RuntimeError("saturation fit did not converge within 200 evaluations")
    return _package_fit(("amplitude", "rate"), result)


def _decay_scale_estimate(t: np.ndarray, envelope: np.ndarray) -> Tuple[float, float]:
    """Decay time from the interpolated 1/e crossing, stretch exponent from
    a log-log line through the mid-decay points.

    For any stretch exponent b the envelope exp(-(t/T)^b) crosses 1/e at
    t = T exactly, so the crossing is a b-independent scale estimate.
    """
    finite = np.isfinite(envelope)
    tt = t[finite]
    env = envelope[finite]
    below = np.nonzero(env < _INV_E)[0]
    if below.size == 0:
        raise ValueError(
            "curve never decays below 1/e inside the time window; "
            "extend the grid to at least twice the decay time"
        )
    idx = int(below[0])
    if idx == 0:
        scale = max(float(tt[0]), np.finfo(float).tiny)
    else:
        lo_t, lo_e = float(tt[idx - 1]), float(env[idx - 1])
        hi_t, hi_e = float(tt[idx]), float(env[idx])
        frac = (lo_e - _INV_E) / max(lo_e - hi_e, 1e-12)
        scale = lo_t + frac * (hi_t - lo_t)

    mid = finite & (envelope > 0.05) & (envelope < 0.95) & (t > 0)
    if int(mid.sum()) >= 3:
        with np.errstate(invalid="ignore"):
            slope = np.polyfit(np.log(t[mid]), np.log(-np.log(envelope[mid])), 1)[0]
        stretch = float(np.clip(slope, 0.3, 5.0))
    else:
        stretch = 2.0
    return scale, stretch


def fit_t2star(
    times: Sequence[float],
    probabilities: Sequence[float],
    model: str = "free_induction",
    exchange_freq_ghz: Optional[float] = None,
) -> FitResult:
    """Fit a stretched-exponential decay time to a probability curve.

    ``free_induction`` fits ``p = (1 + exp(-(t/T2)^b)) / 2`` for
    ``(t2star, b)``.  ``exchange`` fits
    ``p = a * exp(-(t/T2)^b) * cos(2 pi f t) + (1 - a)`` for
    ``(amplitude, t2star, b)`` at fixed frequency ``f = exchange_freq_ghz``
    (times in ns).  The time grid must extend to at least twice the decay
    time estimated from the curve's 1/e crossing; shorter grids raise
    ``ValueError``.  Internally T2 and b are optimized in log space so
    both stay positive; reported values and errors are in linear space.
    """
    t = np.asarray(times, dtype=float)
    p = np.asarray(probabilities, dtype=float)
    if t.ndim != 1 or t.shape != p.shape:
        raise ValueError("times and probabilities must be matching 1-d arrays")
    if t.size < 8:
        raise ValueError("need at least 8 points to fit a decay curve")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
        raise ValueError("times and probabilities must be finite")
    if np.any(np.diff(t) <= 0) or t[0] < 0:
        raise ValueError("times must be nonnegative and strictly increasing")

    if model == "free_induction":
        if exchange_freq_ghz is not None:
            raise ValueError("free_induction model takes no exchange frequency")
        envelope = 2.0 * p - 1.0
    elif model == "exchange":
        if exchange_freq_ghz is None or not exchange_freq_ghz > 0:
            raise ValueError("exchange model requires a positive exchange_freq_ghz")
        omega = 2.0 * np.pi * float(exchange_freq_ghz)
        tail = max(2, t.size // 4)
        floor = float(np.median(p[-tail:]))
        amp0 = float(np.clip(1.0 - floor, 0.02, 0.98))
        cosine = np.cos(omega * t)
        envelope = np.full(t.size, np.nan)
        steep = np.abs(cosine) > 0.5
        envelope[steep] = (p[steep] - (1.0 - amp0)) / (amp0 * cosine[steep])
    else:
        raise ValueError(f"unknown model {model!r}")

    scale0, stretch0 = _decay_scale_estimate(t, envelope)
    span = float(t[-1] - t[0])
    if span < 2.0 * scale0:
        raise ValueError(
            f"time span {span:g} must reach twice the estimated decay "
            f"time {scale0:g}"
        )

    positive = t > 0
    t_safe = np.where(positive, t, 1.0)
    log_u_base = np.where(positive, np.log(t_safe), 0.0)

    def decay_parts(log_scale: float, log_stretch: float):
        scale = np.exp(log_scale)
        stretch = np.exp(log_stretch)
        log_u = log_u_base - log_scale
        u_pow = np.where(positive, np.exp(stretch * log_u), 0.0)
        return np.exp(-u_pow), u_pow, np.where(positive, log_u, 0.0), stretch

    if model == "free_induction":
        names = ("t2star", "b")
        x0 = (np.log(scale0), np.log(stretch0))

        def residuals(theta: np.ndarray) -> np.ndarray:
            decay, _, _, _ = decay_parts(theta[0], theta[1])
            return 0.5 * (1.0 + decay) - p

        def jacobian(theta: np.ndarray) -> np.ndarray:
            decay, u_pow, log_u, stretch = decay_parts(theta[0], theta[1])
            d_scale = 0.5 * decay * stretch * u_pow
            d_stretch = -0.5 * decay * u_pow * log_u * stretch
            return np.column_stack((d_scale, d_stretch))

        def transform(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            vals = np.exp(theta)
            return vals, np.diag(vals)

    else:
        names = ("amplitude", "t2star", "b")
        x0 = (amp0, np.log(scale0), np.log(stretch0))

        def residuals(theta: np.ndarray) -> np.ndarray:
            decay, _, _, _ = decay_parts(theta[1], theta[2])
            return theta[0] * decay * cosine + (1.0 - theta[0]) - p

        def jacobian(theta: np.ndarray) -> np.ndarray:
            decay, u_pow, log_u, stretch = decay_parts(theta[1], theta[2])
            core = theta[0] * cosine * decay
            d_amp = decay * cosine - 1.0
            d_scale = core * stretch * u_pow
            d_stretch = -core * u_pow * log_u * stretch
            return np.column_stack((d_amp, d_scale, d_stretch))

        def transform(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            vals = np.array([theta[0], np.exp(theta[1]), np.exp(theta[2])])
            return vals, np.diag([1.0, vals[1], vals[2]])

    result = scipy.optimize.least_squares(
        residuals, x0=x0, jac=jacobian, method="lm", max_nfev=500
    )
    if not result.success:
        raise RuntimeError(f"{model} decay fit did not converge")
    return _package_fit(names, result, transform)


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def bootstrap_ci(
    samples: Sequence[float],
    n_resamples: int = 1000,
    level: float = 0.9545,
    seed: int = 0,
    statistic: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Percentile bootstrap interval for an across-realization statistic.

    ``samples`` holds one row per realization.  The statistic (default:
    mean over realizations, i.e. along axis 0) is recomputed on rows
    resampled with replacement; returned ``(lo, hi)`` bound the central
    ``level`` mass of the resampled statistic and have the statistic's
    shape.  The default level is the two-sigma-equivalent 95.45%.  Draws
    come from a generator seeded with ``seed``, so intervals are
    reproducible and, across levels at fixed seed, exactly nested.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 0:
        raise ValueError("samples must have a leading realization axis")
    n = arr.shape[0]
    if n < 30:
        raise ValueError(f"need at least 30 realizations, got {n}")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly between 0 and 1")
    if n_resamples < 1:
        raise ValueError("n_resamples must be positive")
    if statistic is None:
        def statistic(block: np.ndarray) -> np.ndarray:
            return block.mean(axis=0)
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        draws.append(np.asarray(statistic(arr[idx]), dtype=float))
    stack = np.stack(draws)
    tail = 100.0 * (1.0 - level) / 2.0
    lo = np.percentile(stack, tail, axis=0)
    hi = np.percentile(stack, 100.0 - tail, axis=0)
    return lo, hi
