"""Singlet-triplet encoded qubits on an exchange-coupled spin chain.

A chain of spin-1/2 particles in a magnetic field along z hosts encoded
qubits in neighboring pairs: ``|0> = |S>`` (singlet) and ``|1> = |T0>``.
Control is a piecewise-constant schedule of square exchange pulses
J_{i,i+1}(t) S_i.S_j on chain bonds; a static field gradient between the
spins of a pair drives encoded-x rotations, exchange within a pair
drives encoded-z rotations.

This module provides

* the chain configuration and ideal Hamiltonian/unitary builders,
* classical noise models (per-spin magnetic field components on all
  three axes, plus multiplicative exchange noise dJ = J * xi),
* a one-time calibration solver that fits per-pulse exchange amplitudes
  for encoded identity and CNOT gates (amplitudes ship as a versioned
  data file and are treated as configuration),
* instantaneous, error-free singlet/triplet measurement and reset of a
  spin pair,
* the repeated weight-2 parity-check experiment, run on a coarse time
  grid with the noise trajectory continuing unbroken through the
  measurements, and
* free-induction and exchange-oscillation decay experiments used to
  calibrate T2* against analytic expectations.

Spins, pairs, and chain bonds are 0-indexed throughout; bond ``b``
couples spins ``b`` and ``b+1``.  Energies are angular frequencies in
rad/ns; public interfaces take MHz (for J/h and gradients) or mT (for
fields) and convert internally.  Chain states are ``LiouvilleState``
coefficient vectors in the product Pauli basis, one tensor leg per spin.
"""
from __future__ import annotations

import hashlib
import json
import re
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm as dense_expm
from scipy.optimize import minimize

from .coarse_grain import (
    LiouvilleState,
    NoiseChannel,
    assemble_generators,
    batched_expm,
    precompute_key,
    precompute_segment,
)
from .liouville import pauli_basis, unitary_superop
from .stochastic import (
    STREAM_MEAS,
    STREAM_NOISE,
    make_one_over_f,
    quasi_static,
)

__all__ = [
    "MU_B_OVER_H_GHZ_PER_T",
    "SpinChainConfig",
    "NoiseModel",
    "one_over_f_noise",
    "quasi_static_noise",
    "no_noise",
    "PulseSegment",
    "PulseSchedule",
    "merge_schedules",
    "concat_schedules",
    "chain_hamiltonian",
    "ideal_segment_unitary",
    "spin_operator",
    "exchange_operator",
    "resolve_operator",
    "GATE_NAMES",
    "calibrate_gates",
    "compile_gate",
    "load_gate_data",
    "encoded_cnot_superop",
    "parity_round_schedule",
    "singlet_probability",
    "measure_pair",
    "reset_pair",
    "MeasurementRecord",
    "ParityEnsemble",
    "run_parity_experiment",
    "run_parity_ensemble",
    "bernoulli_reference",
    "free_induction_curve",
    "exchange_decay_curve",
]

TWO_PI = 2.0 * np.pi

# Bohr magneton over the Planck constant, GHz per tesla.
MU_B_OVER_H_GHZ_PER_T = 13.996244936

# Default noise-model strengths.  Field strengths are quoted as
# frequencies (mu_B g dB / h); the pink models sum Ornstein-Uhlenbeck
# components of equal stationary variance p/2 with log-spaced corner
# frequencies, the quasi-static models freeze one component per channel.
PINK_FIELD_AMP_GHZ = 2.2e-5
PINK_FIELD_BAND_HZ = (1e-3, 1e5)
PINK_FIELD_COMPONENTS = 9
PINK_EXCHANGE_AMP = 2e-3
PINK_EXCHANGE_BAND_HZ = (1e-3, 1e10)
PINK_EXCHANGE_COMPONENTS = 14
STATIC_FIELD_AMP_GHZ = 6.431e-5
STATIC_EXCHANGE_AMP = 6.099e-3

_MHZ_TO_RAD_NS = TWO_PI * 1e-3


# ---------------------------------------------------------------------------
# Spin operators
# ---------------------------------------------------------------------------

_SX = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex) / 2.0
_SY = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex) / 2.0
_SZ = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex) / 2.0
_SPIN_OPS = {"x": _SX, "y": _SY, "z": _SZ}


def _chain_op(n_spins: int, factors: dict) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for i in range(n_spins):
        out = np.kron(out, factors.get(i, np.eye(2, dtype=complex)))
    return out


def spin_operator(n_spins: int, spin: int, axis: str) -> np.ndarray:
    """Spin-1/2 operator S_spin^axis embedded in an ``n_spins`` chain."""
    if axis not in _SPIN_OPS:
        raise ValueError(f"axis must be one of 'x', 'y', 'z', got {axis!r}")
    if not 0 <= spin < n_spins:
        raise ValueError(f"spin {spin} out of range for {n_spins} spins")
    return _chain_op(n_spins, {spin: _SPIN_OPS[axis]})


def exchange_operator(n_spins: int, i: int, j: int) -> np.ndarray:
    """Heisenberg coupling S_i . S_j embedded in an ``n_spins`` chain."""
    if i == j or not (0 <= i < n_spins and 0 <= j < n_spins):
        raise ValueError(f"invalid spin pair ({i}, {j}) for {n_spins} spins")
    return sum(_chain_op(n_spins, {i: op, j: op}) for op in (_SX, _SY, _SZ))


_TERM_RE = re.compile(r"^(?:(?P<coef>[0-9.eE+-]+)\*)?(?P<atom>.+)$")
_SPIN_RE = re.compile(r"^S(?P<i>\d+)(?P<axis>[xyz])$")
_DOT_RE = re.compile(r"^S(?P<i>\d+)\.S(?P<j>\d+)$")
_SIGMA_RE = re.compile(r"^sigma_(?P<axis>[xyz])(?P<half>/2)?$")


def resolve_operator(expr: str, n_spins: int) -> np.ndarray:
    """Resolve a symbolic operator string to a matrix.

    Supported atoms: ``S3z`` (1-indexed spin, axis), ``S1.S2`` (exchange
    dot product), ``sigma_x`` / ``sigma_x/2`` (single spin), ``I``.
    Atoms combine with ``+``/``-`` and optional numeric prefixes, e.g.
    ``"S1z-S2z"`` or ``"0.5*S1z"``.
    """
    text = expr.replace(" ", "")
    if not text:
        raise ValueError("empty operator expression")
    # split on top-level +/- (a sign after e/E or '*' belongs to a number)
    pieces = re.split(r"(?<=[^*eE+-])([+-])", text)
    terms = [pieces[0]]
    for sign, body in zip(pieces[1::2], pieces[2::2]):
        terms.append(sign + body)
    total = np.zeros((2**n_spins, 2**n_spins), dtype=complex)
    for term in terms:
        sign = 1.0
        if term.startswith("-"):
            sign, term = -1.0, term[1:]
        elif term.startswith("+"):
            term = term[1:]
        m = _TERM_RE.match(term)
        if m is None:
            raise ValueError(f"cannot parse operator term {term!r}")
        coef = sign * float(m.group("coef")) if m.group("coef") else sign
        atom = m.group("atom")
        if atom == "I":
            op = np.eye(2**n_spins, dtype=complex)
        elif (sm := _SPIN_RE.match(atom)) is not None:
            op = spin_operator(n_spins, int(sm.group("i")) - 1, sm.group("axis"))
        elif (dm := _DOT_RE.match(atom)) is not None:
            op = exchange_operator(
                n_spins, int(dm.group("i")) - 1, int(dm.group("j")) - 1
            )
        elif (gm := _SIGMA_RE.match(atom)) is not None:
            op = 2.0 * spin_operator(n_spins, 0, gm.group("axis"))
            if gm.group("half"):
                op = op / 2.0
        else:
            raise ValueError(f"cannot resolve operator atom {atom!r}")
        total = total + coef * op
    return total


# ---------------------------------------------------------------------------
# Chain configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpinChainConfig:
    """Static parameters of the spin chain.

    Parameters
    ----------
    n_spins : int
        Chain length.  Encoded qubit ``q`` lives on spins ``(2q, 2q+1)``.
    g_factor : float
        Electron g-factor.
    field_mtesla : float
        Mean field B^z across the chain, in mT.
    deltas_mhz : tuple of float
        Zeeman gradient across each bond, ``f_i - f_{i+1}`` in MHz,
        length ``n_spins - 1``.  Per-spin offsets are reconstructed with
        zero mean (only differences are physical).
    pulse_ns, idle_ns : float
        Square exchange pulse width and the idle that follows each pulse.
    ancilla_pair : int
        Which encoded qubit serves as the parity-check ancilla.
    """

    n_spins: int = 6
    g_factor: float = 2.0
    field_mtesla: float = 500.05
    deltas_mhz: tuple = (10.0, 10.0, -10.0, -10.0, 10.0)
    pulse_ns: float = 20.0
    idle_ns: float = 20.0
    ancilla_pair: int = 1

    def __post_init__(self):
        if self.n_spins < 1:
            raise ValueError("n_spins must be positive")
        deltas = tuple(float(d) for d in self.deltas_mhz)
        if len(deltas) != self.n_spins - 1:
            raise ValueError(
                f"deltas_mhz needs {self.n_spins - 1} entries, got {len(deltas)}"
            )
        if self.pulse_ns <= 0 or self.idle_ns <= 0:
            raise ValueError("pulse_ns and idle_ns must be positive")
        if not 0 <= self.ancilla_pair < max(1, self.n_spins // 2):
            raise ValueError(f"ancilla_pair {self.ancilla_pair} out of range")
        object.__setattr__(self, "deltas_mhz", deltas)

    @property
    def n_bonds(self) -> int:
        return self.n_spins - 1

    @property
    def n_pairs(self) -> int:
        return self.n_spins // 2

    @property
    def group_ns(self) -> float:
        """Duration of one pulse+idle group."""
        return self.pulse_ns + self.idle_ns

    @property
    def mean_splitting_rad_ns(self) -> float:
        """Mean Zeeman splitting g mu_B B^z / hbar in rad/ns."""
        freq_ghz = self.g_factor * MU_B_OVER_H_GHZ_PER_T * self.field_mtesla * 1e-3
        return TWO_PI * freq_ghz

    @property
    def offsets_rad_ns(self) -> tuple:
        """Zero-mean per-spin Zeeman offsets in rad/ns."""
        offs = np.zeros(self.n_spins)
        for b, d in enumerate(self.deltas_mhz):
            offs[b + 1] = offs[b] - d
        offs -= offs.mean()
        return tuple(offs * _MHZ_TO_RAD_NS)

    @property
    def splittings_rad_ns(self) -> tuple:
        mean = self.mean_splitting_rad_ns
        return tuple(mean + o for o in self.offsets_rad_ns)

    @property
    def digest(self) -> str:
        """Hash of the fields entering gate calibration."""
        payload = json.dumps(
            [
                self.n_spins,
                [float(d).hex() for d in self.deltas_mhz],
                float(self.pulse_ns).hex(),
                float(self.idle_ns).hex(),
            ]
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Noise models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Stochastic environment of the chain.

    Attributes
    ----------
    label : str
        Short name used in diagnostics and output files.
    magnetic : tuple of OUParams
        Components of each per-spin, per-axis magnetic channel (iid
        across spins and axes), in rad/ns.
    exchange : tuple of OUParams
        Components of the dimensionless fractional exchange noise xi on
        each bond (iid across bonds); the physical perturbation is
        dJ(t) = J(t) * xi(t), so a bond couples only while pulsed.
    """

    label: str
    magnetic: tuple = ()
    exchange: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "magnetic", tuple(self.magnetic))
        object.__setattr__(self, "exchange", tuple(self.exchange))


def one_over_f_noise(
    field_amp_ghz: float = PINK_FIELD_AMP_GHZ,
    field_band_hz: tuple = PINK_FIELD_BAND_HZ,
    field_components: int = PINK_FIELD_COMPONENTS,
    exchange_amp: float = PINK_EXCHANGE_AMP,
    exchange_band_hz: tuple = PINK_EXCHANGE_BAND_HZ,
    exchange_components: int = PINK_EXCHANGE_COMPONENTS,
) -> NoiseModel:
    """1/f-like model: sums of OU components with log-spaced corners."""
    field_p = (TWO_PI * field_amp_ghz) ** 2
    return NoiseModel(
        label="one_over_f",
        magnetic=make_one_over_f(*field_band_hz, field_components, field_p),
        exchange=make_one_over_f(
            *exchange_band_hz, exchange_components, exchange_amp**2
        ),
    )


def quasi_static_noise(
    field_amp_ghz: float = STATIC_FIELD_AMP_GHZ,
    exchange_amp: float = STATIC_EXCHANGE_AMP,
) -> NoiseModel:
    """Frozen model: one zero-rate component per channel, variance p/2."""
    field_var = 0.5 * (TWO_PI * field_amp_ghz) ** 2
    return NoiseModel(
        label="quasi_static",
        magnetic=(quasi_static(field_var),),
        exchange=(quasi_static(0.5 * exchange_amp**2),),
    )


def no_noise() -> NoiseModel:
    """Noiseless reference model."""
    return NoiseModel(label="noiseless")


# ---------------------------------------------------------------------------
# Pulse schedules
# ---------------------------------------------------------------------------

_EVENT_KINDS = ("measure", "reset")


@dataclass(frozen=True)
class PulseSegment:
    """One constant-Hamiltonian stretch of the control schedule.

    ``exchange_mhz`` holds J/h per chain bond (square pulse, constant
    within the segment).  ``events`` fire at the segment's end, in
    order; each is ``("measure", (i, j))`` or ``("reset", (i, j))`` with
    an adjacent spin pair.
    """

    duration_ns: float
    exchange_mhz: tuple
    events: tuple = ()

    def __post_init__(self):
        if self.duration_ns <= 0:
            raise ValueError("segment durations must be positive")
        object.__setattr__(
            self, "exchange_mhz", tuple(float(j) for j in self.exchange_mhz)
        )
        events = tuple(self.events)
        for ev in events:
            kind, pair = ev
            if kind not in _EVENT_KINDS:
                raise ValueError(f"unknown event kind {kind!r}")
            if len(pair) != 2 or pair[1] != pair[0] + 1:
                raise ValueError(f"event pair {tuple(pair)} must be adjacent spins")
        object.__setattr__(self, "events", events)


@dataclass(frozen=True)
class PulseSchedule:
    """Ordered pulse segments over the whole chain."""

    n_spins: int
    segments: tuple

    def __post_init__(self):
        segs = tuple(self.segments)
        for seg in segs:
            if len(seg.exchange_mhz) != self.n_spins - 1:
                raise ValueError(
                    f"segment carries {len(seg.exchange_mhz)} exchange values, "
                    f"chain has {self.n_spins - 1} bonds"
                )
        object.__setattr__(self, "segments", segs)

    @property
    def duration_ns(self) -> float:
        return float(sum(s.duration_ns for s in self.segments))


def concat_schedules(*schedules: PulseSchedule) -> PulseSchedule:
    """Run schedules back to back."""
    n = schedules[0].n_spins
    if any(s.n_spins != n for s in schedules):
        raise ValueError("schedules address different chains")
    segs = tuple(seg for s in schedules for seg in s.segments)
    return PulseSchedule(n_spins=n, segments=segs)


def merge_schedules(a: PulseSchedule, b: PulseSchedule) -> PulseSchedule:
    """Overlay two simultaneous schedules acting on disjoint bonds."""
    if a.n_spins != b.n_spins:
        raise ValueError("schedules address different chains")
    if len(a.segments) != len(b.segments):
        raise ValueError("simultaneous schedules need equal segmentation")
    merged = []
    for sa, sb in zip(a.segments, b.segments):
        if abs(sa.duration_ns - sb.duration_ns) > 1e-12:
            raise ValueError("simultaneous segments have mismatched durations")
        if any(
            ja != 0.0 and jb != 0.0
            for ja, jb in zip(sa.exchange_mhz, sb.exchange_mhz)
        ):
            raise ValueError("simultaneous schedules pulse the same bond")
        ex = tuple(ja + jb for ja, jb in zip(sa.exchange_mhz, sb.exchange_mhz))
        merged.append(
            PulseSegment(
                duration_ns=sa.duration_ns,
                exchange_mhz=ex,
                events=sa.events + sb.events,
            )
        )
    return PulseSchedule(n_spins=a.n_spins, segments=tuple(merged))


def chain_hamiltonian(cfg: SpinChainConfig, exchange_mhz: Sequence[float]) -> np.ndarray:
    """Chain Hamiltonian in rad/ns: Zeeman terms plus bond exchange."""
    if len(exchange_mhz) != cfg.n_bonds:
        raise ValueError(f"need {cfg.n_bonds} exchange values")
    n = cfg.n_spins
    h = np.zeros((2**n, 2**n), dtype=complex)
    for i, w in enumerate(cfg.splittings_rad_ns):
        h += w * spin_operator(n, i, "z")
    for b, j_mhz in enumerate(exchange_mhz):
        if j_mhz != 0.0:
            h += j_mhz * _MHZ_TO_RAD_NS * exchange_operator(n, b, b + 1)
    return h


def ideal_segment_unitary(segment: PulseSegment, cfg: SpinChainConfig) -> np.ndarray:
    """Exact propagator of one segment's constant Hamiltonian."""
    h = chain_hamiltonian(cfg, segment.exchange_mhz)
    return dense_expm(-1j * segment.duration_ns * h)


def _block_hamiltonian(
    cfg: SpinChainConfig, spins: tuple, j_rad_by_bond: dict
) -> np.ndarray:
    """Hamiltonian of a contiguous spin block, exchange in rad/ns."""
    m = len(spins)
    splittings = cfg.splittings_rad_ns
    h = np.zeros((2**m, 2**m), dtype=complex)
    for li, spin in enumerate(spins):
        h += splittings[spin] * spin_operator(m, li, "z")
    for bond, j in j_rad_by_bond.items():
        li = spins.index(bond)
        h += j * exchange_operator(m, li, li + 1)
    return h


# ---------------------------------------------------------------------------
# Encoded states and pair-level superoperators
# ---------------------------------------------------------------------------

def _pair_states():
    up = np.array([1.0, 0.0], dtype=complex)
    dn = np.array([0.0, 1.0], dtype=complex)
    singlet = (np.kron(up, dn) - np.kron(dn, up)) / np.sqrt(2.0)
    t0 = (np.kron(up, dn) + np.kron(dn, up)) / np.sqrt(2.0)
    return singlet, t0


_PAIR_CACHE: dict = {}


def _pair_tables() -> dict:
    """Pair-level (16-dim coefficient space) building blocks, cached."""
    if _PAIR_CACHE:
        return _PAIR_CACHE
    basis = pauli_basis(2)
    singlet, t0 = _pair_states()
    proj_s = np.outer(singlet, singlet.conj())
    zbar = proj_s - np.outer(t0, t0.conj())
    s_coeffs = basis.expand(proj_s)
    z_coeffs = basis.expand(zbar)
    eye_coeffs = basis.expand(np.eye(4, dtype=complex))
    # superoperators rho -> P rho P for P = Pi_S and its complement
    keep = np.empty((16, 16))
    drop = np.empty((16, 16))
    comp = np.eye(4) - proj_s
    for l in range(16):
        el = basis.elements[l]
        keep[:, l] = basis.expand(proj_s @ el @ proj_s)
        drop[:, l] = basis.expand(comp @ el @ comp)
    reset = np.outer(s_coeffs, eye_coeffs)  # rho -> |S><S| tr(rho)
    _PAIR_CACHE.update(
        basis=basis,
        singlet=singlet,
        triplet0=t0,
        s_coeffs=s_coeffs,
        z_coeffs=z_coeffs,
        project_keep=keep,
        project_drop=drop,
        reset=reset,
    )
    return _PAIR_CACHE


def _encoded_cnot_unitary(control_first: bool) -> np.ndarray:
    """CNOT on two encoded pairs, identity on the leaked complement."""
    singlet, t0 = _pair_states()
    logical = [singlet, t0]
    vecs = []
    for b1 in (0, 1):
        for b2 in (0, 1):
            vecs.append(np.kron(logical[b1], logical[b2]))
    e = np.array(vecs).T  # (16, 4), columns |b1 b2>
    if control_first:
        perm = [0, 1, 3, 2]  # control is the first pair
    else:
        perm = [0, 3, 2, 1]  # control is the second pair
    u = np.eye(16, dtype=complex) - e @ e.conj().T
    for col, row in enumerate(perm):
        u += np.outer(e[:, row], e[:, col].conj())
    return u


_CNOT_SUPEROP_CACHE: dict = {}


def encoded_cnot_superop(control_first: bool) -> np.ndarray:
    """Coefficient-space map of the ideal encoded CNOT on two adjacent pairs.

    The unitary acts as a CNOT on the encoded subspace and as the
    identity on leaked states, so a leaked control never flips the
    target.  Returns the real 256 x 256 matrix for the four spin legs.
    """
    key = bool(control_first)
    if key not in _CNOT_SUPEROP_CACHE:
        u = _encoded_cnot_unitary(control_first)
        _CNOT_SUPEROP_CACHE[key] = unitary_superop(u, pauli_basis(4)).matrix
    return _CNOT_SUPEROP_CACHE[key]


# ---------------------------------------------------------------------------
# Gate calibration
# ---------------------------------------------------------------------------

GATE_NAMES = (
    "IDENTITY_Q1",
    "IDENTITY_Q2",
    "IDENTITY_Q3",
    "CNOT12",
    "CNOT23",
    "CNOT32",
)

GATE_DATA_FORMAT = 1


def _gate_definition(name: str, cfg: SpinChainConfig) -> dict:
    """Slot structure of one gate: which bonds may pulse in which slot.

    Identity gates use three pulse+idle groups on the pair's internal
    bond.  CNOT gates use nine groups in three windows: the outer
    windows pulse the two intra-pair bonds (local encoded rotations),
    the middle window pulses only the inter-pair bond (the entangling
    interaction).  Keeping each window's bonds this sparse means a
    coarse-graining window never couples more than two spins.
    """
    ident = re.match(r"^IDENTITY_Q(\d)$", name)
    cnot = re.match(r"^CNOT(\d)(\d)$", name)
    if ident:
        q = int(ident.group(1)) - 1
        if not 0 <= q < cfg.n_pairs:
            raise ValueError(f"gate {name!r} addresses a missing pair")
        return {
            "kind": "identity",
            "pairs": (q,),
            "slot_bonds": ((2 * q,),) * 3,
        }
    if cnot:
        control = int(cnot.group(1)) - 1
        target = int(cnot.group(2)) - 1
        lo, hi = min(control, target), max(control, target)
        if hi != lo + 1 or not 0 <= lo < cfg.n_pairs - 1:
            raise ValueError(f"gate {name!r} does not address adjacent pairs")
        intra = (2 * lo, 2 * lo + 2)
        inter = (2 * lo + 1,)
        return {
            "kind": "cnot",
            "pairs": (lo, lo + 1),
            "control_first": control == lo,
            "slot_bonds": (intra,) * 3 + (inter,) * 3 + (intra,) * 3,
        }
    raise ValueError(f"unknown gate {name!r}")


def _sz_zero_sector(n_spins: int) -> np.ndarray:
    """Projector columns onto the total-Sz = 0 computational subspace."""
    idx = [k for k in range(2**n_spins) if bin(k).count("1") == n_spins // 2]
    p = np.zeros((2**n_spins, len(idx)), dtype=complex)
    for col, k in enumerate(idx):
        p[k, col] = 1.0
    return p


def _sector_problem(cfg: SpinChainConfig, spins: tuple):
    """Offset-field and exchange Hamiltonians in the zero-Sz sector.

    The mean Zeeman splitting is a multiple of total Sz, constant on
    this sector, so only the per-spin offsets enter; gate calibration
    is therefore independent of the mean field.
    """
    m = len(spins)
    p = _sz_zero_sector(m)
    offsets = cfg.offsets_rad_ns
    hz = np.zeros((2**m, 2**m), dtype=complex)
    for li, spin in enumerate(spins):
        hz += offsets[spin] * spin_operator(m, li, "z")
    hz_s = p.conj().T @ hz @ p
    hj_s = [
        p.conj().T @ exchange_operator(m, li, li + 1) @ p for li in range(m - 1)
    ]
    singlet, t0 = _pair_states()
    logical = [singlet, t0]
    vecs = []
    for bits in range(2 ** (m // 2)):
        v = np.ones(1, dtype=complex)
        for q in range(m // 2):
            v = np.kron(v, logical[(bits >> (m // 2 - 1 - q)) & 1])
        vecs.append(v)
    e_mat = p.conj().T @ np.array(vecs).T
    return hz_s, hj_s, e_mat


def _piece_propagator(h: np.ndarray, dt: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(h)
    return (vecs * np.exp(-1j * dt * vals)) @ vecs.conj().T


def _gate_unitary(amps_mhz, local_slot_bonds, cfg, hz_s, hj_s):
    """Sector propagator of the slot amplitudes (pulse first, then idle)."""
    idle = _piece_propagator(hz_s, cfg.idle_ns)
    u = np.eye(hz_s.shape[0], dtype=complex)
    for slot, bonds in enumerate(local_slot_bonds):
        hp = hz_s.copy()
        for k, li in enumerate(bonds):
            hp = hp + amps_mhz[slot, k] * _MHZ_TO_RAD_NS * hj_s[li]
        u = idle @ _piece_propagator(hp, cfg.pulse_ns) @ u
    return u


def _gate_metrics(u, e_mat, kind, control_first=True):
    """(infidelity, leakage) of a sector propagator against the target.

    CNOT fidelity is maximized analytically over encoded-frame z
    rotations and global phase, which together can cancel the phase of
    every permutation-matched entry: F = (sum_b |M[perm(b), b]|)^2 / 16.
    The identity gate has no frame freedom (it must return the encoded
    Bloch vector itself): F = |tr M|^2 / 4.
    """
    m = e_mat.conj().T @ u @ e_mat
    d_enc = m.shape[1]
    if kind == "identity":
        fid = np.abs(np.trace(m)) ** 2 / d_enc**2
    else:
        perm = [0, 1, 3, 2] if control_first else [0, 3, 2, 1]
        fid = np.abs(m[perm, np.arange(d_enc)]).sum() ** 2 / d_enc**2
    leak = 1.0 - (np.abs(m) ** 2).sum() / d_enc
    return 1.0 - fid, leak


def _stable_token(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")


def calibrate_gates(
    cfg: SpinChainConfig,
    names: Sequence[str] = GATE_NAMES,
    seed: int = 0,
    n_starts: int = 40,
    max_amp_mhz: float = 500.0,
    target_infidelity: float = 1e-9,
) -> dict:
    """Fit pulse amplitudes for each gate by multi-start local search.

    Among starts that reach ``target_infidelity``, the smallest-norm
    amplitude vector wins (weaker pulses carry less multiplicative
    exchange noise).  Returns a gate-data dict suitable for
    :func:`compile_gate`; amplitudes are configuration, not code.
    """
    gates = {}
    for name in names:
        spec = _gate_definition(name, cfg)
        pair_lo = spec["pairs"][0]
        spins = tuple(range(2 * pair_lo, 2 * (spec["pairs"][-1] + 1)))
        hz_s, hj_s, e_mat = _sector_problem(cfg, spins)
        slot_bonds = spec["slot_bonds"]
        local_bonds = tuple(
            tuple(b - spins[0] for b in bonds) for bonds in slot_bonds
        )
        n_x = sum(len(b) for b in slot_bonds)
        width = max(len(b) for b in slot_bonds)

        def unpack(x):
            amps = np.zeros((len(slot_bonds), width))
            k = 0
            for s, bonds in enumerate(slot_bonds):
                for i in range(len(bonds)):
                    amps[s, i] = x[k]
                    k += 1
            return amps

        def objective(x):
            u = _gate_unitary(unpack(x), local_bonds, cfg, hz_s, hj_s)
            infid, leak = _gate_metrics(
                u, e_mat, spec["kind"], spec.get("control_first", True)
            )
            return infid + 0.25 * leak

        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(_stable_token(name),))
        )
        winners = []
        best = None
        for _ in range(n_starts):
            x0 = rng.uniform(0.0, 0.6 * max_amp_mhz, size=n_x)
            res = minimize(
                objective,
                x0,
                method="L-BFGS-B",
                bounds=[(0.0, max_amp_mhz)] * n_x,
                options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-12},
            )
            if best is None or res.fun < best.fun:
                best = res
            if res.fun < target_infidelity:
                winners.append(res)
        chosen = (
            min(winners, key=lambda r: float(np.dot(r.x, r.x))) if winners else best
        )
        amps = unpack(chosen.x)
        u = _gate_unitary(amps, local_bonds, cfg, hz_s, hj_s)
        infid, leak = _gate_metrics(
            u, e_mat, spec["kind"], spec.get("control_first", True)
        )
        if infid > 1e-4:
            raise RuntimeError(
                f"calibration of {name} stalled at infidelity {infid:.2e}; "
                "increase n_starts"
            )
        gates[name] = {
            "slot_bonds": [list(b) for b in slot_bonds],
            "amplitudes_mhz": [
                [float(amps[s, i]) for i in range(len(bonds))]
                for s, bonds in enumerate(slot_bonds)
            ],
            "infidelity": float(infid),
            "leakage": float(leak),
        }
    return {
        "format": GATE_DATA_FORMAT,
        "config_digest": cfg.digest,
        "gates": gates,
    }


def load_gate_data() -> dict:
    """Load the calibrated pulse amplitudes shipped with the package."""
    path = resources.files("bridgesim").joinpath("data/gates.json")
    with path.open("r") as fh:
        return json.load(fh)


def compile_gate(
    name: str, cfg: SpinChainConfig, gate_data: Optional[dict] = None
) -> PulseSchedule:
    """Pulse schedule of a calibrated gate on the full chain.

    Each slot becomes one square exchange pulse followed by an idle.
    ``gate_data`` defaults to the packaged calibration; a config whose
    calibration-relevant fields differ from the data file is rejected.
    """
    if gate_data is None:
        gate_data = load_gate_data()
    if gate_data.get("format") != GATE_DATA_FORMAT:
        raise ValueError("unsupported gate data format")
    if gate_data.get("config_digest") != cfg.digest:
        raise ValueError(
            "no calibrated amplitudes for this chain configuration; "
            "run calibrate_gates and pass the result as gate_data"
        )
    try:
        entry = gate_data["gates"][name]
    except KeyError:
        raise ValueError(f"unknown gate {name!r}") from None
    segments = []
    for bonds, amps in zip(entry["slot_bonds"], entry["amplitudes_mhz"]):
        ex = [0.0] * cfg.n_bonds
        for bond, amp in zip(bonds, amps):
            ex[bond] = amp
        segments.append(
            PulseSegment(duration_ns=cfg.pulse_ns, exchange_mhz=tuple(ex))
        )
        segments.append(
            PulseSegment(duration_ns=cfg.idle_ns, exchange_mhz=(0.0,) * cfg.n_bonds)
        )
    return PulseSchedule(n_spins=cfg.n_spins, segments=tuple(segments))


def _repeat_schedule(sched: PulseSchedule, times: int) -> PulseSchedule:
    return PulseSchedule(n_spins=sched.n_spins, segments=sched.segments * times)


def parity_round_schedule(
    cfg: SpinChainConfig, gate_data: Optional[dict] = None
) -> PulseSchedule:
    """One parity-check round: two data->ancilla CNOTs, then measure+reset.

    The ancilla is the middle encoded qubit.  While one data qubit runs
    its CNOT, the other runs identity gates; the ancilla measurement and
    reset fire at the end of the final segment.
    """
    if cfg.n_spins != 6:
        raise ValueError("the parity experiment runs on a six-spin chain")
    if cfg.ancilla_pair != 1:
        raise ValueError(
            "weight-2 parity check needs the ancilla between the data pairs "
            "(ancilla_pair = 1)"
        )
    cnot_a = compile_gate("CNOT12", cfg, gate_data)
    cnot_b = compile_gate("CNOT32", cfg, gate_data)
    idle_q3 = _repeat_schedule(compile_gate("IDENTITY_Q3", cfg, gate_data), 3)
    idle_q1 = _repeat_schedule(compile_gate("IDENTITY_Q1", cfg, gate_data), 3)
    sched = concat_schedules(
        merge_schedules(cnot_a, idle_q3), merge_schedules(cnot_b, idle_q1)
    )
    pair = (2 * cfg.ancilla_pair, 2 * cfg.ancilla_pair + 1)
    last = replace(
        sched.segments[-1], events=(("measure", pair), ("reset", pair))
    )
    return PulseSchedule(n_spins=6, segments=sched.segments[:-1] + (last,))


# ---------------------------------------------------------------------------
# Measurement and reset
# ---------------------------------------------------------------------------

def _chain_legs(coeffs: np.ndarray) -> int:
    n = max(1, int(round(np.log2(coeffs.shape[-1]) / 2.0)))
    if 4**n != coeffs.shape[-1]:
        raise ValueError(
            "state does not live on a spin chain (need 4^n coefficients)"
        )
    return n


def _check_pair(pair, n_legs: int) -> int:
    i, j = pair
    if j != i + 1 or not 0 <= i < n_legs - 1:
        raise ValueError(f"pair {tuple(pair)} must be adjacent spins on the chain")
    return i


def _apply_pair_map(coeffs: np.ndarray, mats: np.ndarray, leg0: int, n_legs: int):
    """Apply batched 16x16 pair superops to legs (leg0, leg0+1)."""
    r = coeffs.shape[0]
    a = 4**leg0
    b = 4 ** (n_legs - leg0 - 2)
    x = coeffs.reshape(r, a, 16, b)
    x = np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(r, 16, a * b)
    y = mats @ x
    y = y.reshape(r, 16, a, b).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(y).reshape(r, 4**n_legs)


def _apply_single_map(coeffs: np.ndarray, mats: np.ndarray, leg: int, n_legs: int):
    """Apply batched 4x4 single-spin superops to one tensor leg."""
    r = coeffs.shape[0]
    a = 4**leg
    b = 4 ** (n_legs - leg - 1)
    x = coeffs.reshape(r, a, 4, b)
    x = np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(r, 4, a * b)
    y = mats @ x
    y = y.reshape(r, 4, a, b).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(y).reshape(r, 4**n_legs)


def _pair_component(coeffs: np.ndarray, leg0: int, n_legs: int) -> np.ndarray:
    """Coefficients of the pair legs with all other legs on the identity."""
    r = coeffs.shape[0]
    a = 4**leg0
    b = 4 ** (n_legs - leg0 - 2)
    return coeffs.reshape(r, a, 16, b)[:, 0, :, 0]


def _singlet_prob_batch(coeffs: np.ndarray, leg0: int, n_legs: int) -> np.ndarray:
    tables = _pair_tables()
    factor = np.sqrt(2.0) ** (n_legs - 2)
    return factor * (_pair_component(coeffs, leg0, n_legs) @ tables["s_coeffs"])


def singlet_probability(state: LiouvilleState, pair) -> float:
    """Probability of finding the adjacent spin pair in the singlet state."""
    coeffs = state.coeffs[None, :]
    n = _chain_legs(coeffs)
    leg0 = _check_pair(pair, n)
    return float(_singlet_prob_batch(coeffs, leg0, n)[0])


def _measure_batch(coeffs, leg0, n_legs, uniforms, tol=1e-6):
    """Sample singlet-vs-triplet outcomes and project, batched.

    Returns ``(outcomes, p_zero, projected coefficients)``.  Outcome 0
    is the singlet.  Probabilities outside ``[-tol, 1 + tol]`` indicate
    a corrupted state.
    """
    tables = _pair_tables()
    p0 = _singlet_prob_batch(coeffs, leg0, n_legs)
    if np.any(p0 < -tol) or np.any(p0 > 1.0 + tol):
        bad = p0[(p0 < -tol) | (p0 > 1.0 + tol)][0]
        raise RuntimeError(
            f"measurement probability {bad:.6g} outside [0, 1]: state corrupted"
        )
    p0c = np.clip(p0, 0.0, 1.0)
    outcomes = (uniforms >= p0c).astype(np.uint8)
    proj = np.where(
        outcomes[:, None, None],
        tables["project_drop"][None],
        tables["project_keep"][None],
    )
    out = _apply_pair_map(coeffs, proj, leg0, n_legs)
    p_sel = np.where(outcomes, 1.0 - p0c, p0c)
    out /= np.maximum(p_sel, 1e-300)[:, None]
    return outcomes, p0, out


def _reset_batch(coeffs, leg0, n_legs):
    tables = _pair_tables()
    return _apply_pair_map(coeffs, tables["reset"][None], leg0, n_legs)


def measure_pair(state: LiouvilleState, pair, rng: np.random.Generator):
    """Instantaneous, error-free singlet/triplet measurement of a pair.

    Samples outcome 0 (singlet) with probability p0 = Tr(Pi_S rho) and
    projects the state onto the observed branch, renormalized.  Returns
    ``(outcome, projected_state)``.
    """
    coeffs = state.coeffs[None, :]
    n = _chain_legs(coeffs)
    leg0 = _check_pair(pair, n)
    u = np.atleast_1d(rng.random(1))
    outcomes, _, coeffs = _measure_batch(coeffs, leg0, n, u, tol=1e-9)
    return int(outcomes[0]), LiouvilleState(coeffs=coeffs[0])


def reset_pair(state: LiouvilleState, pair) -> LiouvilleState:
    """Replace the pair's reduced state with the singlet, leaving the rest."""
    coeffs = state.coeffs[None, :]
    n = _chain_legs(coeffs)
    leg0 = _check_pair(pair, n)
    return LiouvilleState(coeffs=_reset_batch(coeffs, leg0, n)[0])


# ---------------------------------------------------------------------------
# Noise channel bookkeeping and trajectory streaming
# ---------------------------------------------------------------------------

class _ChannelTable:
    """Canonical global layout of noise components on the chain.

    Order: for each spin, field channels on axes x, y, z; then one
    exchange channel per bond.  Trajectory rows always follow this
    order, regardless of which channels a particular block uses.
    """

    def __init__(self, cfg: SpinChainConfig, noise: NoiseModel):
        self.n_mag = len(noise.magnetic)
        self.n_exch = len(noise.exchange)
        gammas = []
        stat_vars = []
        for _ in range(3 * cfg.n_spins):
            gammas.extend(c.gamma for c in noise.magnetic)
            stat_vars.extend(c.stationary_var for c in noise.magnetic)
        for _ in range(cfg.n_bonds):
            gammas.extend(c.gamma for c in noise.exchange)
            stat_vars.extend(c.stationary_var for c in noise.exchange)
        self.gammas = np.array(gammas)
        self.stat_vars = np.array(stat_vars)
        self.n_comps = self.gammas.size
        self._exch_base = 3 * cfg.n_spins * self.n_mag

    def field_rows(self, spin: int, axis_index: int) -> np.ndarray:
        start = (3 * spin + axis_index) * self.n_mag
        return np.arange(start, start + self.n_mag)

    def bond_rows(self, bond: int) -> np.ndarray:
        start = self._exch_base + bond * self.n_exch
        return np.arange(start, start + self.n_exch)


class _NoiseStream:
    """Per-realization OU streams on the coarse grid, drawn in chunks.

    Realization ``r`` owns the generator seeded by
    ``SeedSequence(seed, spawn_key=(STREAM_NOISE, r))`` and draws one
    standard normal per component for the stationary start, then blocks
    of ``(n_comps, n_steps)`` normals per chunk.  Measurement sampling
    never touches these streams, so the realized noise path does not
    depend on what is measured along the way.
    """

    def __init__(self, table: _ChannelTable, dt_ns: float, seed: int, lo: int, hi: int):
        self._gens = [
            np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(STREAM_NOISE, r))
            )
            for r in range(lo, hi)
        ]
        self._decay = np.exp(-table.gammas * dt_ns)
        self._kick = np.sqrt(table.stat_vars * (1.0 - self._decay**2))
        stds = np.sqrt(table.stat_vars)
        self._n_comps = table.n_comps
        self.carry = np.array(
            [stds * g.standard_normal(self._n_comps) for g in self._gens]
        ).reshape(len(self._gens), self._n_comps)

    def advance(self, n_steps: int) -> np.ndarray:
        """Values at the carried grid point plus the next ``n_steps``."""
        r = len(self._gens)
        out = np.empty((r, self._n_comps, n_steps + 1))
        out[:, :, 0] = self.carry
        if self._n_comps:
            noise = np.array(
                [g.standard_normal((self._n_comps, n_steps)) for g in self._gens]
            ).reshape(r, self._n_comps, n_steps)
            for s in range(n_steps):
                out[:, :, s + 1] = (
                    self._decay * out[:, :, s] + self._kick * noise[:, :, s]
                )
        self.carry = out[:, :, -1].copy()
        return out


# ---------------------------------------------------------------------------
# Coarse windows: block partition and precomputed propagator tables
# ---------------------------------------------------------------------------

@dataclass
class _BlockPlan:
    spins: tuple
    rows: np.ndarray
    pre: object  # SegmentPrecompute


def _window_partition(cfg: SpinChainConfig, window: Sequence[PulseSegment]) -> list:
    """Split the chain into blocks connected by bonds pulsed in a window."""
    active = [
        any(seg.exchange_mhz[b] != 0.0 for seg in window)
        for b in range(cfg.n_bonds)
    ]
    blocks = []
    current = [0]
    for b in range(cfg.n_bonds):
        if active[b]:
            current.append(b + 1)
        else:
            blocks.append(tuple(current))
            current = [b + 1]
    blocks.append(tuple(current))
    for block in blocks:
        if len(block) > 2:
            raise ValueError(
                f"coarse window couples spins {block} into a block larger "
                "than two spins; use a finer coarse scale or a sparser "
                "schedule"
            )
    return blocks


def _block_spec(cfg, noise, window, spins, table=None):
    """(schedule, channels, rows) of one block over one coarse window.

    Channels appear in canonical order: field x/y/z per spin, then the
    block's pulsed bonds.  ``rows`` indexes the matching components in
    the global trajectory array (``None`` without a table).  Bonds that
    stay at zero exchange all window carry no noise and are omitted.
    """
    m = len(spins)
    bonds = [spins[k] for k in range(m - 1)]
    schedule = []
    for seg in window:
        j_rad = {
            b: seg.exchange_mhz[b] * _MHZ_TO_RAD_NS
            for b in bonds
            if seg.exchange_mhz[b] != 0.0
        }
        schedule.append((_block_hamiltonian(cfg, spins, j_rad), seg.duration_ns))
    channels = []
    rows = []
    if noise.magnetic:
        for li, spin in enumerate(spins):
            for ai, axis in enumerate("xyz"):
                channels.append(
                    NoiseChannel(
                        name=f"b{li}{axis}",
                        operator=spin_operator(m, li, axis),
                        components=noise.magnetic,
                    )
                )
                if table is not None:
                    rows.append(table.field_rows(spin, ai))
    if noise.exchange:
        for li, b in enumerate(bonds):
            gains = tuple(seg.exchange_mhz[b] * _MHZ_TO_RAD_NS for seg in window)
            if any(g != 0.0 for g in gains):
                channels.append(
                    NoiseChannel(
                        name=f"j{li}",
                        operator=exchange_operator(m, li, li + 1),
                        components=noise.exchange,
                        active=gains,
                    )
                )
                if table is not None:
                    rows.append(table.bond_rows(b))
    if table is None:
        return schedule, channels, None
    row_idx = np.concatenate(rows) if rows else np.empty(0, dtype=int)
    return schedule, channels, row_idx


def _split_windows(sched: PulseSchedule, coarse_ns: float) -> list:
    """Group segments into consecutive coarse windows of equal span."""
    windows = []
    current = []
    acc = 0.0
    for seg in sched.segments:
        current.append(seg)
        acc += seg.duration_ns
        if abs(acc - coarse_ns) < 1e-9:
            windows.append(tuple(current))
            current, acc = [], 0.0
        elif acc > coarse_ns + 1e-9:
            raise ValueError(
                f"coarse scale {coarse_ns} ns does not align with segment "
                "boundaries"
            )
    if current:
        raise ValueError(
            f"schedule duration is not a multiple of the coarse scale "
            f"{coarse_ns} ns"
        )
    for window in windows:
        for seg in window[:-1]:
            if seg.events:
                raise ValueError("events must fall on coarse window boundaries")
    return windows


def _build_window_plans(cfg, noise, windows, table, cache_dir, skip_spins=()):
    """Per-window block plans; identical blocks share one precompute."""
    skip = set(skip_spins)
    plans = []
    local_cache: dict = {}
    for window in windows:
        wplans = []
        for spins in _window_partition(cfg, window):
            if set(spins) <= skip:
                continue
            if skip & set(spins):
                raise ValueError(
                    f"frozen spins {sorted(skip & set(spins))} are exchange-"
                    "coupled into an evolving block"
                )
            schedule, channels, rows = _block_spec(cfg, noise, window, spins, table)
            basis = pauli_basis(len(spins))
            key = precompute_key(schedule, channels, basis)
            pre = local_cache.get(key)
            if pre is None:
                pre = precompute_segment(schedule, channels, basis, cache_dir=cache_dir)
                local_cache[key] = pre
            wplans.append(_BlockPlan(spins=spins, rows=rows, pre=pre))
        plans.append(wplans)
    return plans


def _distinct_block_specs(cfg, noise, windows, skip_spins=()):
    """Deduplicated block specs across windows, for cache warming."""
    skip = set(skip_spins)
    seen = {}
    for window in windows:
        for spins in _window_partition(cfg, window):
            if set(spins) <= skip:
                continue
            schedule, channels, _ = _block_spec(cfg, noise, window, spins)
            basis = pauli_basis(len(spins))
            key = precompute_key(schedule, channels, basis)
            if key not in seen:
                seen[key] = (schedule, channels, len(spins))
    return seen


def _warm_cache_task(payload):
    schedule, channels, m, cache_dir = payload
    precompute_segment(schedule, channels, pauli_basis(m), cache_dir=cache_dir)


# ---------------------------------------------------------------------------
# Parity-check experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementRecord:
    """Outcomes and post-measurement parity expectations of one realization."""

    outcomes: np.ndarray
    parity_expectations: np.ndarray

    def __post_init__(self):
        out = np.asarray(self.outcomes, dtype=np.uint8)
        par = np.asarray(self.parity_expectations, dtype=float)
        if out.ndim != 1 or par.shape != out.shape:
            raise ValueError(
                "outcomes and parity expectations must be 1d of equal length"
            )
        if np.any(out > 1):
            raise ValueError("outcomes must be 0 or 1")
        out.flags.writeable = False
        par.flags.writeable = False
        object.__setattr__(self, "outcomes", out)
        object.__setattr__(self, "parity_expectations", par)

    @property
    def n_measurements(self) -> int:
        return self.outcomes.size


@dataclass(frozen=True)
class ParityEnsemble:
    """Stacked parity-experiment realizations."""

    outcomes: np.ndarray             # (n_realizations, n_measurements) uint8
    parity_expectations: np.ndarray  # matching float array
    p_zero: Optional[np.ndarray]     # per-round singlet probabilities
    coarse_ns: float
    variant: str
    noise_label: str
    wall_seconds: float

    @property
    def n_realizations(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_measurements(self) -> int:
        return self.outcomes.shape[1]

    def record(self, realization: int) -> MeasurementRecord:
        return MeasurementRecord(
            outcomes=self.outcomes[realization],
            parity_expectations=self.parity_expectations[realization],
        )

    def mean_outcomes(self) -> np.ndarray:
        return self.outcomes.mean(axis=0)


_VARIANTS = ("standard", "instant_cnot", "perfect_measurement")


def _identity_wall_schedule(cfg, gate_data):
    """One round of identity gates on both data qubits, ancilla untouched."""
    idle_q1 = _repeat_schedule(compile_gate("IDENTITY_Q1", cfg, gate_data), 6)
    idle_q3 = _repeat_schedule(compile_gate("IDENTITY_Q3", cfg, gate_data), 6)
    sched = merge_schedules(idle_q1, idle_q3)
    pair = (2 * cfg.ancilla_pair, 2 * cfg.ancilla_pair + 1)
    last = replace(
        sched.segments[-1], events=(("measure", pair), ("reset", pair))
    )
    return PulseSchedule(n_spins=cfg.n_spins, segments=sched.segments[:-1] + (last,))


def _initial_chain_coeffs(n_pairs: int) -> np.ndarray:
    tables = _pair_tables()
    c = np.ones(1)
    for _ in range(n_pairs):
        c = np.kron(c, tables["s_coeffs"])
    return c


def _data_parity_batch(coeffs: np.ndarray) -> np.ndarray:
    """<(1 - Zbar_1 Zbar_3)/2> for the data pairs of a six-spin chain."""
    z = _pair_tables()["z_coeffs"]
    view = coeffs.reshape(coeffs.shape[0], 16, 16, 16)
    corr = 2.0 * np.einsum("rac,a,c->r", view[:, :, 0, :], z, z)
    return 0.5 * (1.0 - corr)


def _apply_instant_cnots(coeffs: np.ndarray) -> np.ndarray:
    """Ideal encoded CNOTs data->ancilla on a six-spin chain (zero time)."""
    r = coeffs.shape[0]
    m_first = encoded_cnot_superop(control_first=True)
    coeffs = (m_first @ coeffs.reshape(r, 256, 16)).reshape(r, 4096)
    m_second = encoded_cnot_superop(control_first=False)
    return (coeffs.reshape(r, 16, 256) @ m_second.T).reshape(r, 4096)


def _round_schedule_for(cfg, variant, gate_data):
    if variant == "perfect_measurement":
        sched = _identity_wall_schedule(cfg, gate_data)
        skip = (2 * cfg.ancilla_pair, 2 * cfg.ancilla_pair + 1)
    else:
        sched = parity_round_schedule(cfg, gate_data)
        skip = ()
    return sched, skip


def _run_parity_slice(
    cfg,
    noise,
    n_measurements,
    coarse_ns,
    seed,
    lo,
    hi,
    cache_dir,
    variant,
    gate_data,
    chunk_rounds=10,
):
    """Run realizations [lo, hi) in lockstep; the ensemble hot path."""
    n_real = hi - lo
    n_legs = cfg.n_spins
    anc_leg = 2 * cfg.ancilla_pair
    table = _ChannelTable(cfg, noise)
    uniforms = np.array(
        [
            np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(STREAM_MEAS, r))
            ).random(n_measurements)
            for r in range(lo, hi)
        ]
    ).reshape(n_real, n_measurements)

    if variant == "instant_cnot":
        plans = []
        steps_per_round = 0
        stream = None
    else:
        sched, skip = _round_schedule_for(cfg, variant, gate_data)
        windows = _split_windows(sched, coarse_ns)
        plans = _build_window_plans(cfg, noise, windows, table, cache_dir, skip)
        steps_per_round = len(windows)
        stream = _NoiseStream(table, coarse_ns, seed, lo, hi)

    coeffs = np.tile(_initial_chain_coeffs(cfg.n_pairs), (n_real, 1))
    outcomes = np.empty((n_real, n_measurements), dtype=np.uint8)
    parity = np.empty((n_real, n_measurements))
    p_zero = np.empty((n_real, n_measurements))

    done = 0
    while done < n_measurements:
        n_rounds = min(chunk_rounds, n_measurements - done)
        if stream is not None:
            values = stream.advance(n_rounds * steps_per_round)
        for j in range(n_rounds):
            for w in range(steps_per_round):
                step = j * steps_per_round + w
                for plan in plans[w]:
                    boundary = values[:, plan.rows, step : step + 2]
                    gen = assemble_generators(plan.pre, boundary)
                    maps = plan.pre.ideal @ batched_expm(gen)
                    if len(plan.spins) == 2:
                        coeffs = _apply_pair_map(coeffs, maps, plan.spins[0], n_legs)
                    else:
                        coeffs = _apply_single_map(coeffs, maps, plan.spins[0], n_legs)
            if variant in ("instant_cnot", "perfect_measurement"):
                coeffs = _apply_instant_cnots(coeffs)
            jj = done + j
            out, p0, coeffs = _measure_batch(coeffs, anc_leg, n_legs, uniforms[:, jj])
            coeffs = _reset_batch(coeffs, anc_leg, n_legs)
            outcomes[:, jj] = out
            p_zero[:, jj] = p0
            parity[:, jj] = _data_parity_batch(coeffs)
        done += n_rounds
    return outcomes, parity, p_zero


def _parity_worker(payload):
    return _run_parity_slice(*payload)


def _validate_parity_args(cfg, variant):
    if variant not in _VARIANTS:
        raise ValueError(f"variant must be one of {_VARIANTS}")
    if cfg.n_spins != 6:
        raise ValueError("the parity experiment runs on a six-spin chain")
    if cfg.ancilla_pair != 1:
        raise ValueError(
            "weight-2 parity check needs the ancilla between the data pairs "
            "(ancilla_pair = 1)"
        )


def run_parity_ensemble(
    cfg: SpinChainConfig,
    noise: NoiseModel,
    n_measurements: int,
    n_realizations: int,
    coarse_ns: float = 40.0,
    seed: int = 0,
    workers: int = 1,
    cache_dir=None,
    variant: str = "standard",
    gate_data: Optional[dict] = None,
) -> ParityEnsemble:
    """Repeated weight-2 parity checks over independent noise realizations.

    Each round runs CNOT(data qubit 1 -> ancilla) while data qubit 2
    idles, then CNOT(data qubit 2 -> ancilla) while data qubit 1 idles,
    then measures the ancilla pair (instantaneous, error-free) and
    resets it to the singlet.  The noise of a realization is one
    unbroken trajectory over the whole run, sampled on the coarse grid;
    measurement sampling uses a separate stream, so inserting or
    removing measurements never shifts the noise path.

    Variants: ``"standard"``; ``"instant_cnot"`` replaces each round by
    ideal encoded CNOTs taking zero time (no noise accumulates);
    ``"perfect_measurement"`` keeps the ancilla frozen and noiseless,
    idles both data qubits for the round duration, and applies ideal
    CNOTs only at the measurement.

    Realization ``r`` always consumes the same random streams, so
    results are independent of ``workers`` and of batching.
    ``wall_seconds`` covers the propagation phase; precompute tables
    are warmed (and cached) beforehand when a cache directory is used.
    """
    _validate_parity_args(cfg, variant)
    if n_measurements < 1 or n_realizations < 1:
        raise ValueError("need at least one round and one realization")
    if workers < 1:
        raise ValueError("workers must be a positive count")
    if gate_data is None and variant != "instant_cnot":
        gate_data = load_gate_data()

    temp_cache = None
    if cache_dir is None and workers > 1 and variant != "instant_cnot":
        temp_cache = tempfile.mkdtemp(prefix="bridgesim-cache-")
        cache_dir = temp_cache
    try:
        if variant != "instant_cnot" and cache_dir is not None:
            sched, skip = _round_schedule_for(cfg, variant, gate_data)
            specs = _distinct_block_specs(
                cfg, noise, _split_windows(sched, coarse_ns), skip
            )
            payloads = [
                (schedule, channels, m, cache_dir)
                for schedule, channels, m in specs.values()
            ]
            if workers > 1 and len(payloads) > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    list(pool.map(_warm_cache_task, payloads))
            else:
                for payload in payloads:
                    _warm_cache_task(payload)

        n_slices = min(workers, n_realizations)
        bounds = np.linspace(0, n_realizations, n_slices + 1).astype(int)
        slices = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        start = time.perf_counter()
        if len(slices) <= 1:
            parts = [
                _run_parity_slice(
                    cfg, noise, n_measurements, coarse_ns, seed, 0,
                    n_realizations, cache_dir, variant, gate_data,
                )
            ]
        else:
            payloads = [
                (cfg, noise, n_measurements, coarse_ns, seed, lo, hi,
                 cache_dir, variant, gate_data)
                for lo, hi in slices
            ]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(_parity_worker, payloads))
        wall = time.perf_counter() - start
    finally:
        if temp_cache is not None:
            shutil.rmtree(temp_cache, ignore_errors=True)

    return ParityEnsemble(
        outcomes=np.concatenate([p[0] for p in parts], axis=0),
        parity_expectations=np.concatenate([p[1] for p in parts], axis=0),
        p_zero=np.concatenate([p[2] for p in parts], axis=0),
        coarse_ns=float(coarse_ns),
        variant=variant,
        noise_label=noise.label,
        wall_seconds=wall,
    )


def run_parity_experiment(
    cfg: SpinChainConfig,
    noise: NoiseModel,
    n_measurements: int,
    coarse_ns: float = 40.0,
    seed: int = 0,
    realization: int = 0,
    cache_dir=None,
    variant: str = "standard",
    gate_data: Optional[dict] = None,
) -> MeasurementRecord:
    """One realization of the repeated parity-check experiment.

    Identical to row ``realization`` of :func:`run_parity_ensemble` with
    the same seed: random streams are keyed by the absolute realization
    index, not by batch position.
    """
    _validate_parity_args(cfg, variant)
    if gate_data is None and variant != "instant_cnot":
        gate_data = load_gate_data()
    outcomes, parity, _ = _run_parity_slice(
        cfg, noise, n_measurements, coarse_ns, seed, realization,
        realization + 1, cache_dir, variant, gate_data,
    )
    return MeasurementRecord(outcomes=outcomes[0], parity_expectations=parity[0])


def bernoulli_reference(
    q: float, n_measurements: int, n_realizations: int, seed: int = 0
) -> ParityEnsemble:
    """Memoryless classical reference: the parity flips with probability q per round.

    Outcomes are the running XOR of iid Bernoulli(q) flips, so the mean
    outcome follows (1 - (1 - 2q)^j) / 2.  Each realization uses its
    measurement stream, mirroring the quantum runs.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must be a probability")
    outcomes = np.empty((n_realizations, n_measurements), dtype=np.uint8)
    for r in range(n_realizations):
        g = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(STREAM_MEAS, r))
        )
        flips = (g.random(n_measurements) < q).astype(np.uint8)
        outcomes[r] = np.cumsum(flips) % 2
    return ParityEnsemble(
        outcomes=outcomes,
        parity_expectations=outcomes.astype(float),
        p_zero=None,
        coarse_ns=0.0,
        variant="bernoulli",
        noise_label=f"bernoulli(q={q:g})",
        wall_seconds=0.0,
    )


# ---------------------------------------------------------------------------
# T2* calibration experiments
# ---------------------------------------------------------------------------

def _single_window_curve(
    cfg, noise, window, blocks, n_points, dt_ns, n_trajectories, seed,
    cache_dir, initial, probe,
):
    """Propagate repeated copies of one window and record an observable."""
    table = _ChannelTable(cfg, noise)
    plans = []
    for spins in blocks:
        schedule, channels, rows = _block_spec(cfg, noise, window, spins, table)
        pre = precompute_segment(
            schedule, channels, pauli_basis(len(spins)), cache_dir=cache_dir
        )
        plans.append(_BlockPlan(spins=spins, rows=rows, pre=pre))
    stream = _NoiseStream(table, dt_ns, seed, 0, n_trajectories)
    values = stream.advance(n_points)
    coeffs = initial(n_trajectories)
    n_legs = cfg.n_spins
    probs = np.empty((n_trajectories, n_points + 1))
    probs[:, 0] = probe(coeffs)
    for k in range(n_points):
        for plan in plans:
            boundary = values[:, plan.rows, k : k + 2]
            gen = assemble_generators(plan.pre, boundary)
            maps = plan.pre.ideal @ batched_expm(gen)
            if len(plan.spins) == 2:
                coeffs = _apply_pair_map(coeffs, maps, plan.spins[0], n_legs)
            else:
                coeffs = _apply_single_map(coeffs, maps, plan.spins[0], n_legs)
        probs[:, k + 1] = probe(coeffs)
    times = dt_ns * np.arange(n_points + 1)
    return times, probs


def free_induction_curve(
    noise: NoiseModel,
    n_points: int = 100,
    dt_ns: float = 80.0,
    n_trajectories: int = 1000,
    seed: int = 0,
    field_mtesla: float = 0.5,
    cache_dir=None,
):
    """Free-induction decay of a spin pair prepared in the singlet.

    Two spins in a uniform residual field with no exchange: the
    spin-to-spin difference of the field noise dephases the S/T0
    coherence and the singlet probability relaxes from 1 toward 1/2.
    The field only needs to be large enough that transverse noise
    components average out (their effect scales as 1/field^2); the
    dephasing itself is field-independent.  Returns
    ``(times_ns, probabilities)``, one row per trajectory.
    """
    cfg = SpinChainConfig(
        n_spins=2, field_mtesla=field_mtesla, deltas_mhz=(0.0,), ancilla_pair=0
    )
    tables = _pair_tables()
    window = [PulseSegment(duration_ns=dt_ns, exchange_mhz=(0.0,))]
    return _single_window_curve(
        cfg, noise, window, [(0, 1)], n_points, dt_ns, n_trajectories, seed,
        cache_dir,
        initial=lambda r: np.tile(tables["s_coeffs"], (r, 1)),
        probe=lambda c: _singlet_prob_batch(c, 0, 2),
    )


def exchange_decay_curve(
    noise: NoiseModel,
    j_mhz: float = 100.0,
    n_points: int = 384,
    dt_ns: float = 5.0,
    n_trajectories: int = 1000,
    seed: int = 0,
    field_mtesla: float = 500.05,
    cache_dir=None,
):
    """Exchange-driven oscillation decay under multiplicative J noise.

    Three spins: pair (0, 1) starts in the singlet, spin 2 in |+>, and
    bond (1, 2) is driven continuously at ``j_mhz``.  The pair-singlet
    probability oscillates at J/h and decays through dJ = J xi; choose
    ``dt_ns`` a half-integer multiple of h/J so the samples alternate
    between oscillation maxima and minima and trace out the envelope
    from both sides.  Returns ``(times_ns, probabilities)``.
    """
    cfg = SpinChainConfig(
        n_spins=3, field_mtesla=field_mtesla, deltas_mhz=(0.0, 0.0),
        ancilla_pair=0,
    )
    tables = _pair_tables()
    window = [PulseSegment(duration_ns=dt_ns, exchange_mhz=(0.0, j_mhz))]
    plus = np.array([1.0, 1.0, 0.0, 0.0]) / np.sqrt(2.0)

    def initial(r):
        return np.tile(np.kron(tables["s_coeffs"], plus), (r, 1))

    return _single_window_curve(
        cfg, noise, window, [(0,), (1, 2)], n_points, dt_ns, n_trajectories,
        seed, cache_dir,
        initial=initial,
        probe=lambda c: _singlet_prob_batch(c, 0, 3),
    )
