"""Closed-form integrals of polynomial-exponential factors over segments.

The coarse-graining precompute needs three integral families on a pulse
piece ``[0, L]``:

* ``fourier_integrals``:   int_0^L f(t) e^{i w t} dt
* ``ordered_double``:      int_{0 <= t2 <= t1 <= L} f1(t1) e^{i w1 t1} f2(t2) e^{i w2 t2}
* products of the first kind for pairs of distinct pieces.

Here f is a short sum of terms  c * e^{lc} * t^m * e^{r t}  (``ExpPolyTerm``)
coming from either bridge interpolation shapes or bridge covariance
kernels, and the oscillation frequencies w are Bohr frequencies of the
piecewise-constant control Hamiltonian.  Gaussian quadrature is useless
here: transverse channels oscillate thousands of radians per piece while
relaxation exponents range from 1e-10 to ~2.5e3 per segment.  Everything
is therefore reduced to the moment function

    M_m(v, L) = int_0^L t^m e^{v t} dt

evaluated by a series for small ``|v L|`` and an upward recursion
otherwise, with explicit log-scale bookkeeping so that growing exponents
(which always arrive paired with compensating term coefficients) never
overflow.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import comb
from typing import Sequence

import numpy as np

__all__ = [
    "ExpPolyTerm",
    "term_values",
    "restrict_terms",
    "scale_terms",
    "moments",
    "fourier_integrals",
    "ordered_double",
]

_SERIES_RADIUS = 8.0
_SERIES_TERMS = 48
_INNER_SWITCH = 0.5  # |v2 L| below which the inner integral is expanded
_INNER_TERMS = 16
_MAX_POWER = 6  # largest t^m product supported (cubic x cubic shapes)
_LOG_TRUNC = -43.75  # log(1e-19): series tails below this are dropped


def _series_length(zmax: float, cap: int) -> int:
    """Smallest k with zmax^k / k! below the truncation target."""
    if zmax <= 0.0:
        return 1
    log_z = np.log(zmax)
    acc = 0.0
    for k in range(1, cap):
        acc += log_z - np.log(k)
        if acc < _LOG_TRUNC:
            return k
    return cap


@dataclass(frozen=True)
class ExpPolyTerm:
    """One factor term  coef * e^{log_coef} * t^power * e^{rate * t}.

    ``log_coef`` carries magnitude separately so that decaying anchors of
    strongly damped components (e.g. e^{-gamma(T - t)} rewritten as
    e^{-gamma T} e^{+gamma t}) can be represented without underflow of the
    product or overflow of the positive-rate factor.  The invariant
    ``log_coef + max(Re rate, 0) * L <= 0`` holds for every term built by
    the precompute, which is what makes all evaluations overflow-free.
    """

    coef: complex
    log_coef: float
    power: int
    rate: complex


def term_values(terms: Sequence[ExpPolyTerm], tau) -> np.ndarray:
    """Evaluate a term sum at times ``tau`` (diagnostics and tests)."""
    tau = np.asarray(tau, dtype=float)
    out = np.zeros(tau.shape, dtype=complex)
    for t in terms:
        out += t.coef * np.exp(t.log_coef + t.rate * tau) * tau**t.power
    return out


def scale_terms(terms: Sequence[ExpPolyTerm], factor: complex) -> list[ExpPolyTerm]:
    return [replace(t, coef=t.coef * factor) for t in terms]


def restrict_terms(terms: Sequence[ExpPolyTerm], offset: float) -> list[ExpPolyTerm]:
    """Re-express terms defined in segment time under ``tau = offset + tau_local``.

    Polynomial powers are expanded binomially; exponential factors pick up
    ``rate * offset``, which is folded into ``coef``/``log_coef`` keeping
    coefficients bounded (negative-rate terms shrink; positive-rate terms
    were anchored with a compensating ``log_coef`` by construction).
    """
    out = []
    for t in terms:
        shift = t.rate * offset
        coef = t.coef * np.exp(1j * shift.imag)
        log_coef = t.log_coef + shift.real
        if t.power == 0:
            out.append(ExpPolyTerm(coef, log_coef, 0, t.rate))
        else:
            for j in range(t.power + 1):
                c = coef * comb(t.power, j) * offset ** (t.power - j)
                out.append(ExpPolyTerm(c, log_coef, j, t.rate))
    return out


# --------------------------------------------------------------- moments


def moments(v, L: float, mmax: int):
    """Scaled moments of t^m e^{v t} on [0, L].

    Returns ``(vals, logscale)`` with ``M_m(v, L) = vals[m] * e^{logscale}``
    elementwise over the (arbitrary-shape) complex array ``v``;
    ``vals`` gains a leading axis of length ``mmax + 1`` and ``logscale``
    equals ``max(Re(v L), 0)`` so that ``vals`` stays bounded even for
    strongly growing exponents.
    """
    v = np.asarray(v, dtype=complex)
    z = v * L
    logscale = np.maximum(z.real, 0.0)
    small = np.abs(z) <= _SERIES_RADIUS
    vals = np.empty((mmax + 1,) + v.shape, dtype=complex)
    any_small = bool(np.any(small))
    all_small = bool(np.all(small))
    ms = np.arange(mmax + 1).reshape((mmax + 1,) + (1,) * v.ndim)

    if any_small:
        # Series branch: M_m = L^{m+1} sum_k z^k / (k! (k+m+1)).  For
        # strongly negative Re z the alternating sum cancels badly, so
        # reflect those entries onto the positive-exponent series first:
        #   M_m(v) = e^{vL} sum_j C(m,j) L^{m-j} (-1)^j M_j(-v).
        reflect = small & (z.real < -4.0)
        zs = np.where(reflect, -z, np.where(small, z, 0.0))
        n_terms = _series_length(float(np.abs(zs).max()), _SERIES_TERMS)
        powk = np.ones_like(zs)
        acc = np.zeros((mmax + 1,) + v.shape, dtype=complex)
        for k in range(n_terms):
            acc += powk * (1.0 / (k + ms + 1))
            powk = powk * zs * (1.0 / (k + 1))
        series = acc * L ** (ms + 1)
        if np.any(reflect):
            ez = np.exp(np.where(reflect, z, 0.0))
            refl = np.empty_like(series)
            for m in range(mmax + 1):
                s = np.zeros(v.shape, dtype=complex)
                for j in range(m + 1):
                    s += comb(m, j) * L ** (m - j) * (-1) ** j * series[j]
                refl[m] = ez * s
            series = np.where(reflect, refl, series)
        # Undo the logscale (<= series radius, harmless) for uniform scaling.
        series = series * np.exp(np.where(small, -logscale, 0.0))
        if all_small:
            vals[:] = series
            return vals, logscale

    # Recursion branch, on scaled values Mhat = M e^{-logscale}:
    #   Mhat_0 = (e^{z - ls} - e^{-ls}) / v
    #   Mhat_m = (L^m e^{z - ls} - m Mhat_{m-1}) / v
    with np.errstate(divide="ignore", invalid="ignore"):
        ez = np.exp(z - logscale)
        eo = np.exp(-logscale)
        rec = np.empty_like(vals)
        vsafe = np.where(small, 1.0, v)
        rec[0] = np.where(small, 0.0, (ez - eo) / vsafe)
        for m in range(1, mmax + 1):
            rec[m] = np.where(small, 0.0, (L**m * ez - m * rec[m - 1]) / vsafe)

    if any_small:
        vals[:] = np.where(small, series, rec)
    else:
        vals[:] = rec
    return vals, logscale


def fourier_integrals(terms: Sequence[ExpPolyTerm], omegas, L: float) -> np.ndarray:
    """int_0^L f(t) e^{i w t} dt for each w in ``omegas``."""
    om = np.asarray(omegas, dtype=float)
    out = np.zeros(om.shape, dtype=complex)
    if L == 0.0:
        return out
    for t in terms:
        v = t.rate + 1j * om
        vals, ls = moments(v, L, t.power)
        # log_coef + logscale <= 0 by the anchoring invariant.
        out += t.coef * np.exp(t.log_coef + ls) * vals[t.power]
    return out


# --------------------------------------------------------- ordered double


def _ordered_term(c1g, m1, v1, c2g, m2, v2, L: float):
    """One term pair of the ordered double integral, broadcast over v1/v2.

    Computes  e^{c1g + c2g} * int_{0<=t2<=t1<=L} t1^m1 e^{v1 t1} t2^m2 e^{v2 t2}.
    ``c1g``/``c2g`` are the log-coefficients; the sum of every exponent
    produced here with them is <= 0 by the anchoring invariant.
    """
    v1, v2 = np.broadcast_arrays(np.asarray(v1, complex), np.asarray(v2, complex))
    z2 = v2 * L
    small2 = np.abs(z2) <= _INNER_SWITCH
    out = np.zeros(v1.shape, dtype=complex)

    if np.any(small2):
        # Expand the inner integral: int_0^x t^m2 e^{v2 t} dt
        #   = sum_k v2^k x^{m2+k+1} / (k! (m2+k+1)).
        z2s = np.where(small2, z2, 0.0)
        n_inner = _series_length(float(np.abs(z2s).max()), _INNER_TERMS)
        mmax = m1 + m2 + n_inner
        vals, ls = moments(np.where(small2, v1, 0.0), L, mmax)
        powk = np.ones_like(v2)
        acc = np.zeros(v1.shape, dtype=complex)
        fact = 1.0
        for k in range(n_inner):
            acc += powk / (fact * (m2 + k + 1)) * vals[m1 + m2 + k + 1]
            powk = powk * z2s / L  # v2^{k+1} via z2/L
            fact *= k + 1
        out = np.where(small2, acc * np.exp(c1g + c2g + ls), out)

    if np.any(~small2):
        big = ~small2
        # Closed inner primitive: int_0^x t^m2 e^{v2 t} dt = e^{v2 x} P(x) - P(0)
        # with P defined by v2 P + P' = x^m2  (d_m2 = 1/v2, d_{j-1} = -j d_j / v2).
        v2b = np.where(big, v2, 1.0)
        d = [np.zeros(v1.shape, dtype=complex) for _ in range(m2 + 1)]
        d[m2] = 1.0 / v2b
        for j in range(m2, 0, -1):
            d[j - 1] = -j * d[j] / v2b
        v12 = v1 + v2
        mm = m1 + m2
        vals12, ls12 = moments(np.where(big, v12, 0.0), L, mm)
        vals1, ls1 = moments(np.where(big, v1, 0.0), L, m1)
        accb = np.zeros(v1.shape, dtype=complex)
        for j in range(m2 + 1):
            accb += d[j] * vals12[m1 + j] * np.exp(c1g + c2g + ls12)
        accb -= d[0] * vals1[m1] * np.exp(c1g + c2g + ls1)
        out = np.where(big, accb, out)

    return out


def ordered_double(
    terms1: Sequence[ExpPolyTerm],
    terms2: Sequence[ExpPolyTerm],
    omegas1,
    omegas2,
    L: float,
) -> np.ndarray:
    """Time-ordered double integral over the triangle of one piece.

    Returns the matrix over (w1, w2) of

        int_{0 <= t2 <= t1 <= L} f1(t1) e^{i w1 t1} f2(t2) e^{i w2 t2} dt2 dt1.
    """
    om1 = np.asarray(omegas1, dtype=float)
    om2 = np.asarray(omegas2, dtype=float)
    out = np.zeros((om1.size, om2.size), dtype=complex)
    if L == 0.0:
        return out
    for t1 in terms1:
        if t1.power > _MAX_POWER:
            raise ValueError(f"power {t1.power} beyond supported range")
        v1 = (t1.rate + 1j * om1)[:, None]
        for t2 in terms2:
            v2 = (t2.rate + 1j * om2)[None, :]
            out += (
                t1.coef
                * t2.coef
                * _ordered_term(t1.log_coef, t1.power, v1, t2.log_coef, t2.power, v2, L)
            )
    return out
