"""Ensemble-averaged segment propagators from coarse noise samples.

A segment is a stretch of piecewise-constant control with noise channels
coupling through fixed Hermitian operators, each channel a sum of
independent OU components.  Conditioning every component on its values at
the two segment boundaries splits the noise into a deterministic
interpolation plus zero-boundary bridge fluctuations.  The fluctuations
carry no memory across segments, so averaging over them yields one
propagator per segment that depends only on the boundary samples -- and
segment propagators concatenate into full sequences.

This module precomputes everything that does not depend on the sampled
boundary values:

- linear response coefficients of each boundary value (through the
  conditional-mean interpolation weights),
- quadratic (time-ordered commutator) coefficients for every pair of
  effective boundary coordinates,
- the boundary-independent relaxation generators obtained by integrating
  the bridge covariance against the interaction-picture couplings.

All time integrals are evaluated in closed form via
:mod:`.segment_integrals`; there is no quadrature anywhere.  Per segment
and boundary sample, assembling the generator is a handful of small
matrix products, and the propagator is one matrix exponential.

:func:`oracle_average` provides the brute-force counterpart -- explicit
bridge paths on a fine grid, propagated step by step and averaged -- used
to validate the closed-form propagators.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .liouville import (
    OperatorBasis,
    SuperOp,
    adjoint_matrices,
    btilde,
    schedule_unitary,
    structure_constants,
    unitary_superop,
)
from .segment_integrals import (
    ExpPolyTerm,
    fourier_integrals,
    ordered_double,
    restrict_terms,
)
from .stochastic import (
    STREAM_ORACLE,
    CoarseTrajectory,
    OUParams,
    bridge_mean,
    sample_zero_bridge,
)

__all__ = [
    "NoiseChannel",
    "SegmentPrecompute",
    "Generator",
    "LiouvilleState",
    "OracleAverage",
    "precompute_segment",
    "precompute_key",
    "save_precompute",
    "load_precompute",
    "assemble_generator",
    "assemble_generators",
    "batched_expm",
    "propagate",
    "concatenate_run",
    "oracle_average",
]

# Components with gamma * duration below this use the cubic expansion of the
# interpolation weights (relative error <= 7 (g*D)^4 / 360 ~ 2e-12 at the
# cutoff) and collapse into shared per-channel coordinates; faster
# components keep their exact exponential weights individually.
_SLOW_CUTOFF = 3e-3
# Below this gamma * duration the bridge covariance uses the expanded
# sinh-product form (truncation error (g*D)^6 / 5040 ~ 1e-16 at the
# cutoff); above it, the four-term exponential product form.
_KERNEL_SWITCH = 3e-2
# Relative tolerance for imaginary residue left after combining
# conjugate-frequency mode pairs of real quantities.
_IMAG_TOL = 1e-7
# Antisymmetric covariance residue below this (relative to the kernel
# scale) is rounding noise from reordered products, not signal; it is
# snapped to exactly zero so commuting couplings yield an exactly zero
# coherent correction.
_ANTISYM_SNAP = 1e-13
# Coefficient-vector norms may not grow under the averaged maps (they are
# trace preserving and unital); growth beyond this factor indicates an
# invalid generator.
_NORM_GROWTH_TOL = 1e-6

_CACHE_VERSION = 1


@dataclass(frozen=True)
class NoiseChannel:
    """One noise channel: a coupling operator driven by a sum of OU components.

    Parameters
    ----------
    name : str
        Stable identifier (used in cache keys and diagnostics).
    operator : ndarray, shape (d, d)
        Hermitian coupling operator multiplying the channel value.
    components : sequence of OUParams
        Independent components whose sum is the channel value.  All must
        have zero mean; a biased channel belongs in the control schedule.
    active : sequence of float or bool, optional
        Per-schedule-piece coupling gain: 0 switches the coupling off
        during that piece and other values scale it.  Multiplicative
        pulse-amplitude noise uses the pulse amplitude itself as the
        gain, so one segment can contain pulses of different strength
        sharing one underlying process.  Default: gain 1 everywhere.
    """

    name: str
    operator: np.ndarray
    components: tuple
    active: Optional[tuple] = None

    def __post_init__(self):
        op = np.asarray(self.operator, dtype=complex)
        if op.ndim != 2 or op.shape[0] != op.shape[1]:
            raise ValueError("operator must be a square matrix")
        if np.abs(op - op.conj().T).max() > 1e-10:
            raise ValueError(f"channel {self.name!r}: operator must be Hermitian")
        op = op.copy()
        op.setflags(write=False)
        object.__setattr__(self, "operator", op)
        comps = tuple(self.components)
        for c in comps:
            if not isinstance(c, OUParams):
                raise TypeError("components must be OUParams instances")
            if c.mu != 0.0:
                raise ValueError(
                    f"channel {self.name!r}: components must have zero mean"
                )
        object.__setattr__(self, "components", comps)
        if self.active is not None:
            gains = tuple(float(a) for a in self.active)
            if not all(np.isfinite(gains)):
                raise ValueError(f"channel {self.name!r}: gains must be finite")
            object.__setattr__(self, "active", gains)


# ---------------------------------------------------------------------------
# Boundary-coordinate shapes
#
# The conditional mean of component i on [0, D] is
#     x_det(tau) = x_start w_s(tau) + x_end w_e(tau)
# with sinh-ratio weights.  Slow components share the cubic expansion
#     w_s ~ l_s + gamma^2 q_s,   w_e ~ l_e + gamma^2 q_e
# so a whole channel contributes at most four drift coordinates
# (sum of starts, gamma^2-weighted starts, ends, gamma^2-weighted ends);
# fast components keep exact exponential weights, two coordinates each.
# ---------------------------------------------------------------------------


def _slow_shapes(delta: float) -> dict:
    t = ExpPolyTerm
    return {
        "l_s": [t(1.0, 0.0, 0, 0.0), t(-1.0 / delta, 0.0, 1, 0.0)],
        "q_s": [
            t(-delta / 3.0, 0.0, 1, 0.0),
            t(0.5, 0.0, 2, 0.0),
            t(-1.0 / (6.0 * delta), 0.0, 3, 0.0),
        ],
        "l_e": [t(1.0 / delta, 0.0, 1, 0.0)],
        "q_e": [t(-delta / 6.0, 0.0, 1, 0.0), t(1.0 / (6.0 * delta), 0.0, 3, 0.0)],
    }


def _fast_shapes(gamma: float, delta: float) -> tuple[list, list]:
    """Exact interpolation weights as anchored exponential terms.

    w_s = sinh(g (D - tau)) / sinh(g D) and w_e = sinh(g tau) / sinh(g D),
    rewritten with all exponents <= 0 over [0, D] so they survive
    gamma * D in the thousands.
    """
    g = gamma * delta
    den = -np.expm1(-2.0 * g)
    t = ExpPolyTerm
    w_s = [t(1.0 / den, 0.0, 0, -gamma), t(-1.0 / den, -2.0 * g, 0, gamma)]
    w_e = [t(1.0 / den, -g, 0, gamma), t(-1.0 / den, -g, 0, -gamma)]
    return w_s, w_e


def _build_coordinates(channels: Sequence[NoiseChannel], delta: float):
    """Compress per-component boundary values into effective coordinates.

    Returns ``(shapes, coords, wmap)`` where ``shapes`` is a list of term
    lists, ``coords`` a list of ``(channel_index, shape_index)`` pairs and
    ``wmap`` the (n_coords, 2 * n_components) map from the interleaved
    boundary vector ``[start_0, end_0, start_1, ...]`` to coordinates.
    """
    shapes: list = []
    shape_ids: dict = {}

    def shape_id(key, terms):
        if key not in shape_ids:
            shape_ids[key] = len(shapes)
            shapes.append(terms)
        return shape_ids[key]

    slow = _slow_shapes(delta)
    coords = []
    rows = []
    offset = 0
    for ci, ch in enumerate(channels):
        gammas = np.array([c.gamma for c in ch.components])
        slow_mask = gammas * delta <= _SLOW_CUTOFF
        slow_idx = offset + np.nonzero(slow_mask)[0]
        if slow_idx.size:
            g2 = gammas[slow_mask] ** 2
            for kind, col_shift in (("l_s", 0), ("l_e", 1)):
                cols = 2 * slow_idx + col_shift
                coords.append((ci, shape_id(kind, slow[kind])))
                rows.append((cols, np.ones(slow_idx.size)))
            if np.any(g2 > 0.0):
                for kind, col_shift in (("q_s", 0), ("q_e", 1)):
                    cols = 2 * slow_idx + col_shift
                    coords.append((ci, shape_id(kind, slow[kind])))
                    rows.append((cols, g2))
        for li, comp in enumerate(ch.components):
            if slow_mask[li]:
                continue
            w_s, w_e = _fast_shapes(comp.gamma, delta)
            gi = offset + li
            coords.append((ci, shape_id(("w_s", comp.gamma), w_s)))
            rows.append((np.array([2 * gi]), np.ones(1)))
            coords.append((ci, shape_id(("w_e", comp.gamma), w_e)))
            rows.append((np.array([2 * gi + 1]), np.ones(1)))
        offset += len(ch.components)

    wmap = np.zeros((len(coords), 2 * offset))
    for r, (cols, vals) in enumerate(rows):
        wmap[r, cols] = vals
    return shapes, coords, wmap


# ---------------------------------------------------------------------------
# Bridge-covariance kernels
# ---------------------------------------------------------------------------


def _shifted_poly(coef: float, power: int, delta: float) -> list[ExpPolyTerm]:
    """coef * (delta - tau)^power expanded into plain powers of tau."""
    from math import comb

    return [
        ExpPolyTerm(coef * comb(power, j) * delta ** (power - j) * (-1.0) ** j, 0.0, j, 0.0)
        for j in range(power + 1)
    ]


def _kernel_term_pairs(params: OUParams, delta: float) -> list[tuple[list, list]]:
    """Separable factorizations of the ordered bridge covariance.

    Returns pairs ``(terms_late, terms_early)`` whose products, summed and
    evaluated at ``tau_1 >= tau_2``, give the bridge covariance
    ``C(tau_1, tau_2)``.  Two regimes:

    - ``gamma * delta`` small: C = (sigma^2 / D) tau_2 (D - tau_1)
      s(g tau_2) s(g (D - tau_1)) / s(g D) with s(y) = sinh(y)/y expanded
      to y^4 -- a single polynomial pair.
    - otherwise the exact four-term exponential product expansion of
      Var * e^{-g(tau_1 - tau_2)} (1 - e^{-2 g tau_2})
      (1 - e^{-2 g (D - tau_1)}) / (1 - e^{-2 g D}),
      each factor anchored so every exponent stays <= 0 on the ordered
      region.
    """
    if params.sigma == 0.0 or params.stationary_var == 0.0:
        return []
    gamma = params.gamma
    g = gamma * delta
    if g <= _KERNEL_SWITCH:
        s_norm = np.sinh(g) / g
        pref = params.sigma**2 / (delta * s_norm)
        late = (
            _shifted_poly(pref, 1, delta)
            + _shifted_poly(pref * gamma**2 / 6.0, 3, delta)
            + _shifted_poly(pref * gamma**4 / 120.0, 5, delta)
        )
        t = ExpPolyTerm
        early = [
            t(1.0, 0.0, 1, 0.0),
            t(gamma**2 / 6.0, 0.0, 3, 0.0),
            t(gamma**4 / 120.0, 0.0, 5, 0.0),
        ]
        return [(late, early)]
    var = params.stationary_var
    den = -np.expm1(-2.0 * g)
    pref = var / den
    t = ExpPolyTerm
    return [
        ([t(pref, 0.0, 0, -gamma)], [t(1.0, 0.0, 0, gamma)]),
        ([t(-pref, 0.0, 0, -gamma)], [t(1.0, 0.0, 0, -gamma)]),
        ([t(-pref, -g, 0, gamma)], [t(1.0, -g, 0, gamma)]),
        ([t(pref, -2.0 * g, 0, gamma)], [t(1.0, 0.0, 0, -gamma)]),
    ]


def _anchored_fourier(terms, offset: float, length: float, omegas):
    """Piece-local Fourier integrals with the magnitude split off as a log.

    Restricts ``terms`` to the piece at ``offset``, rescales so the
    largest exponent is exactly zero, and returns ``(values, log_shift)``
    with  true integral = e^{log_shift} * values.  Callers combine the
    log shifts of factor pairs before exponentiating, which keeps
    strongly growing/decaying factor pairs representable.
    """
    rt = restrict_terms(terms, offset)
    exc = max(t.log_coef + max(t.rate.real, 0.0) * length for t in rt)
    rt = [replace(t, log_coef=t.log_coef - exc) for t in rt]
    return fourier_integrals(rt, omegas, length), exc


# ---------------------------------------------------------------------------
# Precompute
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentPrecompute:
    """Boundary-independent data of one segment's averaged propagator.

    The generator for boundary samples ``x`` (shape ``(n_components, 2)``,
    start/end per component) is

        K(x) = sum_a y_a L_a  +  sum_{a<=b} y_a y_b Q_{ab}  +  G + Delta,

    with ``y = wmap @ x.ravel()`` the effective drift coordinates,
    ``L = lin``, ``Q = quad`` (pair-packed, symmetry factors folded in),
    ``G = gamma_s`` the bridge-variance relaxation part and
    ``Delta = delta_s`` the bridge coherent correction.  The full segment
    map is ``ideal_superop @ expm(K)``.
    """

    d: int
    duration: float
    comps_per_channel: tuple
    channel_names: tuple
    basis_elements: np.ndarray
    basis_labels: tuple
    wmap: np.ndarray
    lin: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    quad: np.ndarray
    gamma_s: np.ndarray
    delta_s: np.ndarray
    ideal: np.ndarray
    key: str

    @property
    def n_components(self) -> int:
        return int(sum(self.comps_per_channel))

    @property
    def basis(self) -> OperatorBasis:
        cached = getattr(self, "_basis_cache", None)
        if cached is None:
            cached = OperatorBasis(
                d=self.d, elements=self.basis_elements, labels=self.basis_labels
            )
            object.__setattr__(self, "_basis_cache", cached)
        return cached

    @property
    def ideal_superop(self) -> SuperOp:
        return SuperOp(matrix=self.ideal)


def precompute_key(
    schedule: Sequence, channels: Sequence[NoiseChannel], basis: OperatorBasis
) -> str:
    """Content hash identifying a segment precompute (cache file name)."""

    def array_hash(a) -> str:
        a = np.ascontiguousarray(np.asarray(a, dtype=complex))
        return hashlib.sha256(a.tobytes()).hexdigest()

    payload = {
        "version": _CACHE_VERSION,
        "d": basis.d,
        "basis": array_hash(basis.elements),
        "labels": list(basis.labels),
        "schedule": [[array_hash(h), float(dt).hex()] for h, dt in schedule],
        "channels": [
            {
                "name": ch.name,
                "operator": array_hash(ch.operator),
                "components": [
                    [
                        float(c.gamma).hex(),
                        float(c.sigma).hex(),
                        float(c.mu).hex(),
                        float(c.stationary_var).hex(),
                    ]
                    for c in ch.components
                ],
                "active": (
                    [float(a).hex() for a in ch.active]
                    if ch.active is not None
                    else None
                ),
            }
            for ch in channels
        ],
        "slow_cutoff": float(_SLOW_CUTOFF).hex(),
        "kernel_switch": float(_KERNEL_SWITCH).hex(),
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def precompute_segment(
    schedule: Sequence,
    channels: Sequence[NoiseChannel],
    basis: OperatorBasis,
    cache_dir=None,
) -> SegmentPrecompute:
    """Integrate out one segment's high-frequency noise, exactly.

    Parameters
    ----------
    schedule : sequence of (H, duration)
        Piecewise-constant control Hamiltonian.
    channels : sequence of NoiseChannel
        Noise channels; components are conditioned on the segment
        boundaries and their bridge fluctuations averaged out.
    basis : OperatorBasis
        Hermitian operator basis of the block.
    cache_dir : path-like, optional
        Directory for content-addressed reuse across runs/processes.
    """
    if cache_dir is not None:
        key = precompute_key(schedule, channels, basis)
        path = os.path.join(os.fspath(cache_dir), f"seg-{key[:24]}.npz")
        if os.path.exists(path):
            return load_precompute(path)
        pre = _precompute_segment_impl(schedule, channels, basis, key)
        save_precompute(pre, path)
        return pre
    key = precompute_key(schedule, channels, basis)
    return _precompute_segment_impl(schedule, channels, basis, key)


def _precompute_segment_impl(schedule, channels, basis, key) -> SegmentPrecompute:
    d = basis.d
    d2 = d * d
    n_pieces = len(schedule)
    for ch in channels:
        if ch.operator.shape != (d, d):
            raise ValueError(
                f"channel {ch.name!r}: operator dimension {ch.operator.shape} "
                f"does not match basis dimension {d}"
            )
        if ch.active is not None and len(ch.active) != n_pieces:
            raise ValueError(
                f"channel {ch.name!r}: active mask length {len(ch.active)} "
                f"!= number of schedule pieces {n_pieces}"
            )

    delta = float(sum(float(dt) for _, dt in schedule))
    adjoint = adjoint_matrices(basis)
    f_con, g_con = structure_constants(basis).f, structure_constants(basis).g
    f_flat = f_con.reshape(d2 * d2, d2 * d2)
    g_flat = g_con.reshape(d2 * d2, d2 * d2)

    comp_params = [c for ch in channels for c in ch.components]
    comp_channel = [ci for ci, ch in enumerate(channels) for _ in ch.components]
    n_comp = len(comp_params)

    if channels:
        ops = np.stack([ch.operator for ch in channels])
        active = np.array(
            [
                ch.active if ch.active is not None else (1.0,) * n_pieces
                for ch in channels
            ],
            dtype=float,
        )
        series = btilde(ops, schedule, basis, active=active)
    else:
        series = None

    shapes, coords, wmap = _build_coordinates(channels, delta)
    n_eff = len(coords)
    coord_ch = np.array([ci for ci, _ in coords], dtype=int)
    coord_shape = [si for _, si in coords]

    t_ord = np.zeros((n_eff, n_eff, d2, d2), dtype=complex)
    b_acc = np.zeros((n_eff, d2), dtype=complex)
    u_run = np.zeros((n_eff, d2), dtype=complex)
    d_kernel = np.zeros((d2, d2), dtype=complex)

    pieces = series.pieces if series is not None else ()
    # Per-piece data reused below: restriction offsets, coupling
    # coefficient stacks, and anchored kernel factor integrals.
    kernel_factors = {}  # (comp, pair, side) -> list over pieces of (vals, log)
    for p_idx, piece in enumerate(pieces):
        s_p, l_p, om_p = piece.t_start, piece.duration, piece.omega
        coefs = piece.coef  # (n_channels, d2, n_modes)
        c_all = coefs[coord_ch] if n_eff else np.zeros((0, d2, om_p.size), complex)

        # Linear singles per shape, then per coordinate.
        f_by_shape = {}
        for si in set(coord_shape):
            f_by_shape[si] = fourier_integrals(
                restrict_terms(shapes[si], s_p), om_p, l_p
            )
        u_p = np.zeros((n_eff, d2), dtype=complex)
        for a in range(n_eff):
            u_p[a] = c_all[a] @ f_by_shape[coord_shape[a]]

        # Same-piece ordered doubles, grouped by (late shape, early shape).
        by_shape = {}
        for a, si in enumerate(coord_shape):
            by_shape.setdefault(si, []).append(a)
        restricted = {si: restrict_terms(shapes[si], s_p) for si in by_shape}
        for sa, idx_a in by_shape.items():
            for sb, idx_b in by_shape.items():
                od = ordered_double(restricted[sa], restricted[sb], om_p, om_p, l_p)
                left = np.tensordot(c_all[idx_a], od, axes=([2], [0]))
                contrib = np.tensordot(left, c_all[idx_b], axes=([2], [2]))
                t_ord[np.ix_(idx_a, idx_b)] += contrib.transpose(0, 2, 1, 3)

        # Cross-piece rectangles: this piece late, all earlier pieces early.
        if p_idx:
            t_ord += np.einsum("ak,bl->abkl", u_p, u_run)
        u_run += u_p
        b_acc += u_p

        # Bridge-covariance kernel, same-piece triangle.
        for gi, params in enumerate(comp_params):
            pairs = _kernel_term_pairs(params, delta)
            c_ch = coefs[comp_channel[gi]]
            for pair_idx, (late, early) in enumerate(pairs):
                od = ordered_double(
                    restrict_terms(late, s_p), restrict_terms(early, s_p),
                    om_p, om_p, l_p,
                )
                d_kernel += c_ch @ od @ c_ch.T
                for side, terms in (("late", late), ("early", early)):
                    vals, log = _anchored_fourier(terms, s_p, l_p, om_p)
                    kernel_factors.setdefault((gi, pair_idx, side), []).append(
                        (c_ch @ vals, log)
                    )

    # Bridge kernel, cross-piece rectangles.  The factor logs only combine
    # to <= 0 on ordered piece pairs, so exponentiate per pair.
    for (gi, pair_idx, side), factors in list(kernel_factors.items()):
        if side != "late":
            continue
        early_factors = kernel_factors[(gi, pair_idx, "early")]
        for p1 in range(1, n_pieces):
            y1, log1 = factors[p1]
            for p2 in range(p1):
                y2, log2 = early_factors[p2]
                log = log1 + log2
                if log > 1e-9:
                    raise AssertionError(
                        "bridge kernel factor pair not bounded on the ordered "
                        f"region (log excess {log:.3e})"
                    )
                d_kernel += np.exp(min(log, 0.0)) * np.outer(y1, y2)

    # ---- assemble the boundary-independent parts -------------------------
    scale_b = np.abs(b_acc).max() if n_eff else 0.0
    if scale_b > 0 and np.abs(b_acc.imag).max() > _IMAG_TOL * scale_b:
        raise AssertionError("linear coefficients have non-negligible imaginary part")
    b_real = b_acc.real
    lin = np.tensordot(b_real, adjoint, axes=([1], [0]))

    pair_i, pair_j = np.triu_indices(n_eff)
    scale_t = np.abs(t_ord).max() if n_eff else 0.0
    if scale_t > 0 and np.abs(t_ord.imag).max() > _IMAG_TOL * scale_t:
        raise AssertionError("ordered pair integrals have non-negligible imaginary part")
    a_pairs = (
        2.0 * t_ord.real[pair_i, pair_j]
        - b_real[pair_i][:, :, None] * b_real[pair_j][:, None, :]
    )
    mult = np.where(pair_i == pair_j, 1.0, 2.0)
    quad = (
        -0.25
        * mult[:, None, None]
        * (a_pairs.reshape(-1, d2 * d2) @ f_flat.T).reshape(-1, d2, d2)
    )

    scale_d = np.abs(d_kernel).max()
    if scale_d > 0 and np.abs(d_kernel.imag).max() > _IMAG_TOL * scale_d:
        raise AssertionError("bridge kernel has non-negligible imaginary part")
    d_real = d_kernel.real
    sym = d_real + d_real.T
    gamma_s = -0.5 * (g_flat @ sym.ravel()).reshape(d2, d2)
    anti = 0.5 * (d_real - d_real.T)
    if scale_d > 0:
        anti[np.abs(anti) < _ANTISYM_SNAP * scale_d] = 0.0
    delta_s = -0.5 * (f_flat @ anti.ravel()).reshape(d2, d2)

    ideal = unitary_superop(schedule_unitary(schedule), basis).matrix

    return SegmentPrecompute(
        d=d,
        duration=delta,
        comps_per_channel=tuple(len(ch.components) for ch in channels),
        channel_names=tuple(ch.name for ch in channels),
        basis_elements=basis.elements,
        basis_labels=tuple(basis.labels),
        wmap=wmap,
        lin=lin,
        pair_i=pair_i,
        pair_j=pair_j,
        quad=quad,
        gamma_s=gamma_s,
        delta_s=delta_s,
        ideal=ideal,
        key=key,
    )


def save_precompute(pre: SegmentPrecompute, path) -> None:
    """Write a precompute to ``path`` (atomic, safe under concurrent writers)."""
    meta = {
        "version": _CACHE_VERSION,
        "d": pre.d,
        "duration": pre.duration,
        "comps_per_channel": list(pre.comps_per_channel),
        "channel_names": list(pre.channel_names),
        "basis_labels": list(pre.basis_labels),
        "key": pre.key,
    }
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            basis_elements=pre.basis_elements,
            wmap=pre.wmap,
            lin=pre.lin,
            pair_i=pre.pair_i,
            pair_j=pre.pair_j,
            quad=pre.quad,
            gamma_s=pre.gamma_s,
            delta_s=pre.delta_s,
            ideal=pre.ideal,
        )
    os.replace(tmp, path)


def load_precompute(path) -> SegmentPrecompute:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != _CACHE_VERSION:
            raise ValueError(
                f"cache file {path} has version {meta['version']}, "
                f"expected {_CACHE_VERSION}"
            )
        return SegmentPrecompute(
            d=int(meta["d"]),
            duration=float(meta["duration"]),
            comps_per_channel=tuple(meta["comps_per_channel"]),
            channel_names=tuple(meta["channel_names"]),
            basis_elements=data["basis_elements"],
            basis_labels=tuple(meta["basis_labels"]),
            wmap=data["wmap"],
            lin=data["lin"],
            pair_i=data["pair_i"],
            pair_j=data["pair_j"],
            quad=data["quad"],
            gamma_s=data["gamma_s"],
            delta_s=data["delta_s"],
            ideal=data["ideal"],
            key=meta["key"],
        )


# ---------------------------------------------------------------------------
# Assembly and propagation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Generator:
    """Averaged noise generator of one segment, for one boundary sample.

    ``matrix`` acts in the interaction picture of the segment; the full
    segment map is ``ideal @ expm(matrix)``.
    """

    matrix: np.ndarray
    ideal: SuperOp

    def full_map(self) -> SuperOp:
        return SuperOp(matrix=self.ideal.matrix @ batched_expm(self.matrix[None])[0])


@dataclass(frozen=True)
class LiouvilleState:
    """A state as its real coefficient vector in a Hermitian operator basis."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1:
            raise ValueError("coeffs must be a vector")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_density_matrix(cls, rho, basis: OperatorBasis) -> "LiouvilleState":
        return cls(coeffs=basis.expand(np.asarray(rho, dtype=complex)))

    def to_density_matrix(self, basis: OperatorBasis) -> np.ndarray:
        return basis.reconstruct(self.coeffs)

    def expectation(self, op_coeffs) -> float:
        """<O> for an observable given by its own coefficient vector."""
        return float(self.coeffs @ np.asarray(op_coeffs, dtype=float))


def _boundary_vector(pre: SegmentPrecompute, boundary) -> np.ndarray:
    x = np.asarray(boundary, dtype=float)
    if x.shape != (pre.n_components, 2):
        raise ValueError(
            f"boundary must have shape ({pre.n_components}, 2) "
            f"(start/end per component), got {x.shape}"
        )
    return x.reshape(-1)


def assemble_generator(pre: SegmentPrecompute, boundary) -> Generator:
    """Build the averaged generator for one boundary sample."""
    x = _boundary_vector(pre, boundary)
    y = pre.wmap @ x
    k = np.tensordot(y, pre.lin, axes=([0], [0]))
    k += np.tensordot(y[pre.pair_i] * y[pre.pair_j], pre.quad, axes=([0], [0]))
    k += pre.gamma_s + pre.delta_s
    return Generator(matrix=k, ideal=pre.ideal_superop)


def assemble_generators(pre: SegmentPrecompute, boundaries) -> np.ndarray:
    """Generator matrices for a batch of boundary samples.

    ``boundaries`` has shape ``(n_batch, n_components, 2)``; returns
    ``(n_batch, d^2, d^2)``.  This is the hot path of ensemble runs: two
    matrix products against the packed linear/quadratic coefficients.
    """
    xb = np.asarray(boundaries, dtype=float)
    if xb.ndim != 3 or xb.shape[1:] != (pre.n_components, 2):
        raise ValueError(
            f"boundaries must have shape (n, {pre.n_components}, 2), got {xb.shape}"
        )
    d2 = pre.d * pre.d
    y = xb.reshape(xb.shape[0], -1) @ pre.wmap.T
    k = y @ pre.lin.reshape(-1, d2 * d2)
    k += (y[:, pre.pair_i] * y[:, pre.pair_j]) @ pre.quad.reshape(-1, d2 * d2)
    k = k.reshape(-1, d2, d2)
    k += pre.gamma_s + pre.delta_s
    return k


def batched_expm(mats: np.ndarray) -> np.ndarray:
    """Matrix exponentials of a stack via scaling-and-squaring Taylor.

    Sized for the mildly non-normal, norm <= O(10) generators produced
    here; one shared scaling power keeps everything vectorized.
    """
    a = np.asarray(mats)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError("expected a stack of square matrices")
    n = a.shape[1]
    norm = np.abs(a).sum(axis=2).max(axis=(0, 1)) if a.size else 0.0
    s = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    a = a / (2.0**s)
    eye = np.eye(n, dtype=a.dtype)
    out = np.broadcast_to(eye, a.shape).copy()
    for k in range(13, 0, -1):
        out = eye + (a @ out) / k
    for _ in range(s):
        out = out @ out
    return out


def propagate(state: LiouvilleState, gen: Generator) -> LiouvilleState:
    """Apply one segment: averaged noise exponential, then the ideal map."""
    c = state.coeffs
    new = gen.ideal.matrix @ (batched_expm(gen.matrix[None])[0] @ c)
    n_old = np.linalg.norm(c)
    n_new = np.linalg.norm(new)
    if n_new > n_old * (1.0 + _NORM_GROWTH_TOL):
        raise RuntimeError(
            "state norm grew under an averaged segment map "
            f"({n_old:.6e} -> {n_new:.6e}); generator is not valid"
        )
    return LiouvilleState(coeffs=new)


def concatenate_run(
    segments: Sequence[SegmentPrecompute],
    trajectory: CoarseTrajectory,
    state: LiouvilleState,
) -> list[LiouvilleState]:
    """Propagate a state through consecutive segments along one trajectory.

    ``trajectory.grid`` must contain the segment boundary times (the grid
    *is* the coarse-graining grid); returns the states at every grid
    point, starting with the input state.
    """
    if trajectory.grid.size != len(segments) + 1:
        raise ValueError(
            f"trajectory grid has {trajectory.grid.size} points but "
            f"{len(segments)} segments need {len(segments) + 1}"
        )
    spans = np.diff(trajectory.grid)
    for k, seg in enumerate(segments):
        if abs(spans[k] - seg.duration) > 1e-9:
            raise ValueError(
                f"segment {k} duration {seg.duration} does not match "
                f"grid spacing {spans[k]}"
            )
        if trajectory.values.shape[0] != seg.n_components:
            raise ValueError(
                f"trajectory carries {trajectory.values.shape[0]} components "
                f"but segment {k} expects {seg.n_components}"
            )
    out = [state]
    for k, seg in enumerate(segments):
        boundary = trajectory.values[:, k : k + 2]
        out.append(propagate(out[-1], assemble_generator(seg, boundary)))
    return out


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleAverage:
    """Monte-Carlo averaged segment superoperator with per-entry errors."""

    matrix: np.ndarray
    stderr: np.ndarray
    n_paths: int

    @property
    def superop(self) -> SuperOp:
        return SuperOp(matrix=self.matrix)


def _su2_step(h: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i h dt) for a stack of 2x2 Hermitian h, in closed form."""
    h0 = 0.5 * (h[:, 0, 0] + h[:, 1, 1]).real
    hz = 0.5 * (h[:, 0, 0] - h[:, 1, 1]).real
    hx = h[:, 0, 1].real
    hy = -h[:, 0, 1].imag
    r = np.sqrt(hx**2 + hy**2 + hz**2)
    theta = r * dt
    sinc = np.where(r > 0, np.sin(theta) / np.where(r > 0, r, 1.0), dt)
    cos = np.cos(theta)
    phase = np.exp(-1j * h0 * dt)
    u = np.empty(h.shape, dtype=complex)
    u[:, 0, 0] = phase * (cos - 1j * hz * sinc)
    u[:, 1, 1] = phase * (cos + 1j * hz * sinc)
    u[:, 0, 1] = phase * (-1j * (hx - 1j * hy) * sinc)
    u[:, 1, 0] = phase * (-1j * (hx + 1j * hy) * sinc)
    return u


def oracle_average(
    schedule: Sequence,
    channels: Sequence[NoiseChannel],
    basis: OperatorBasis,
    boundary,
    n_paths: int,
    fine_dt: float,
    seed: int,
    chunk: int = 1000,
) -> OracleAverage:
    """Brute-force ensemble average of one segment's propagator.

    Draws explicit zero-boundary bridge paths for every component on a
    fine midpoint grid, integrates the full Hamiltonian (control plus
    conditional mean plus bridge fluctuation) path by path, and averages
    the resulting superoperators.  Validation reference for
    :func:`precompute_segment` -- slow on purpose, correct by
    construction.
    """
    d = basis.d
    n_pieces = len(schedule)
    comp_params = [c for ch in channels for c in ch.components]
    comp_channel = [ci for ci, ch in enumerate(channels) for _ in ch.components]
    x_bound = np.asarray(boundary, dtype=float)
    if x_bound.shape != (len(comp_params), 2):
        raise ValueError(
            f"boundary must have shape ({len(comp_params)}, 2), got {x_bound.shape}"
        )
    gamma_max = max((c.gamma for c in comp_params), default=0.0)
    if gamma_max * fine_dt > 0.01 * (1 + 1e-12):
        raise ValueError(
            f"fine_dt {fine_dt} under-resolves the fastest component "
            f"(gamma * fine_dt = {gamma_max * fine_dt:.3e} > 0.01)"
        )

    # Fine grid: an integer number of steps inside every piece.
    mids = []
    dts = []
    piece_of_step = []
    t0 = 0.0
    for p_idx, (_, dt_piece) in enumerate(schedule):
        steps = max(1, round(float(dt_piece) / fine_dt))
        dt_p = float(dt_piece) / steps
        mids.append(t0 + (np.arange(steps) + 0.5) * dt_p)
        dts.append(np.full(steps, dt_p))
        piece_of_step.append(np.full(steps, p_idx))
        t0 += float(dt_piece)
    mids = np.concatenate(mids)
    dts = np.concatenate(dts)
    piece_of_step = np.concatenate(piece_of_step)
    delta = t0
    n_steps = mids.size

    hams = [np.asarray(h, dtype=complex) for h, _ in schedule]
    ops = [np.asarray(ch.operator, dtype=complex) for ch in channels]
    act = np.array(
        [
            ch.active if ch.active is not None else (1.0,) * n_pieces
            for ch in channels
        ],
        dtype=float,
    )
    # Deterministic drift of each channel at the midpoints.
    drift = np.zeros((len(channels), n_steps))
    for gi, params in enumerate(comp_params):
        drift[comp_channel[gi]] += bridge_mean(
            x_bound[gi, 0], x_bound[gi, 1], params, delta, mids
        )
    gate = act[:, piece_of_step]  # (n_channels, n_steps)

    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(STREAM_ORACLE,))
    )
    d2 = d * d
    acc = np.zeros((d2, d2))
    acc_sq = np.zeros((d2, d2))
    done = 0
    while done < n_paths:
        n_chunk = min(chunk, n_paths - done)
        x_t = np.broadcast_to(drift, (n_chunk,) + drift.shape).copy()
        for gi, params in enumerate(comp_params):
            if params.sigma > 0.0:
                x_t[:, comp_channel[gi], :] += sample_zero_bridge(
                    params, delta, mids, n_chunk, rng
                )
        x_t *= gate[None]
        u = np.broadcast_to(np.eye(d, dtype=complex), (n_chunk, d, d)).copy()
        for j in range(n_steps):
            h = np.broadcast_to(hams[piece_of_step[j]], (n_chunk, d, d)).copy()
            for ci, op in enumerate(ops):
                h += x_t[:, ci, j, None, None] * op
            if d == 2:
                u = _su2_step(h, dts[j]) @ u
            else:
                u = batched_expm(-1j * dts[j] * h) @ u
        rot = np.einsum("nab,kbc,ndc->nkad", u, basis.elements, u.conj())
        m = np.einsum("lda,nkad->nlk", basis.elements, rot).real
        acc += m.sum(axis=0)
        acc_sq += (m**2).sum(axis=0)
        done += n_chunk

    mean = acc / n_paths
    var = np.maximum(acc_sq / n_paths - mean**2, 0.0)
    stderr = np.sqrt(var / n_paths)
    return OracleAverage(matrix=mean, stderr=stderr, n_paths=n_paths)
