"""Hermitian operator bases, superoperators, and interaction-picture coefficients.

Conventions used throughout:

- hbar = 1; times in ns; Hamiltonians and frequencies in rad/ns.
- Operator bases are Hermitian and orthonormal under the Hilbert-Schmidt
  inner product Tr(P_k P_l) = delta_kl, with element 0 proportional to the
  identity.  Density matrices are represented by their real coefficient
  vectors c_k = Tr(P_k rho).
- Superoperators act on coefficient vectors; maps that conjugate by a
  unitary are real orthogonal matrices in this representation.
- A noise coupling operator B evolved in the interaction picture expands as
  Btilde_k(tau) = Tr(B U(tau) P_k U(tau)^dag).  For piecewise-constant
  control Hamiltonians each piece contributes a finite sum of complex
  exponentials in the piece-local time, which :func:`btilde` extracts
  exactly from the eigendecomposition of the piece Hamiltonian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import expm

__all__ = [
    "OperatorBasis",
    "SuperOp",
    "StructureConstants",
    "BtildePiece",
    "BtildeSeries",
    "pauli_basis",
    "singlet_triplet_basis",
    "unitary_superop",
    "hamiltonian_superop",
    "adjoint_matrices",
    "structure_constants",
    "schedule_unitary",
    "btilde",
]

_HERM_TOL = 1e-12
_UNITARY_TOL = 1e-10
# Mode frequencies closer than this (rad/ns) are merged when collecting the
# complex-exponential decomposition of Btilde; physical level splittings in
# the systems treated here are >= 1e-2 rad/ns while eigh jitter is ~1e-12.
_OMEGA_TOL = 1e-8
# Modes whose coefficients fall below this relative level are diagonalizer
# round-off (couplings that commute with the control produce exact zeros
# polluted at ~1e-16); dropping them keeps downstream integral counts at
# the physical mode count.
_COEF_PRUNE = 1e-13

_SIGMA = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    "Y": np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    "Z": np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
}
_SIGMA_ORDER = ("I", "X", "Y", "Z")


# ---------------------------------------------------------------------------
# Operator bases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorBasis:
    """Hermitian orthonormal operator basis of a d-dimensional Hilbert space.

    Attributes
    ----------
    d : int
        Hilbert-space dimension.
    elements : ndarray, shape (d*d, d, d), complex
        Basis operators P_k with Tr(P_k P_l) = delta_kl.  Element 0 is
        I/sqrt(d).
    labels : tuple of str
        Human-readable names, one per element.
    """

    d: int
    elements: np.ndarray
    labels: tuple

    def __post_init__(self):
        el = np.ascontiguousarray(np.asarray(self.elements, dtype=complex))
        if el.shape != (self.d * self.d, self.d, self.d):
            raise ValueError(f"expected {self.d ** 2} operators of shape "
                             f"({self.d},{self.d}), got {el.shape}")
        herm_err = np.abs(el - el.conj().transpose(0, 2, 1)).max()
        if herm_err > _HERM_TOL:
            raise ValueError(f"basis elements not Hermitian (err={herm_err:.2e})")
        gram = np.einsum("kab,lba->kl", el, el)
        gram_err = np.abs(gram - np.eye(self.d * self.d)).max()
        if gram_err > _HERM_TOL:
            raise ValueError(f"basis not orthonormal (err={gram_err:.2e})")
        el.flags.writeable = False
        object.__setattr__(self, "elements", el)
        object.__setattr__(self, "labels", tuple(self.labels))

    def expand(self, op: np.ndarray) -> np.ndarray:
        """Coefficients c_k = Tr(P_k op); real for Hermitian ``op``."""
        op = np.asarray(op, dtype=complex)
        coeffs = np.einsum("kab,ba->k", self.elements, op)
        if np.abs(coeffs.imag).max() < 1e-12 * max(1.0, np.abs(coeffs).max()):
            return coeffs.real.copy()
        return coeffs

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        """Rebuild sum_k c_k P_k from a coefficient vector."""
        return np.tensordot(np.asarray(coeffs), self.elements, axes=(0, 0))


def pauli_basis(n_spins: int) -> OperatorBasis:
    """Normalized Pauli-string basis for ``n_spins`` spin-1/2 particles.

    Index order: base-4 digits of k select (I, X, Y, Z) per spin with spin 0
    as the most significant digit, so element 0 is the normalized identity.
    """
    if not 1 <= n_spins <= 6:
        raise ValueError(f"n_spins must be in 1..6, got {n_spins}")
    d = 2 ** n_spins
    norm = 1.0 / np.sqrt(d)
    elements = np.empty((d * d, d, d), dtype=complex)
    labels = []
    for k in range(4 ** n_spins):
        digits = []
        kk = k
        for _ in range(n_spins):
            digits.append(kk % 4)
            kk //= 4
        digits.reverse()
        op = np.ones((1, 1), dtype=complex)
        for dig in digits:
            op = np.kron(op, _SIGMA[_SIGMA_ORDER[dig]])
        elements[k] = op * norm
        labels.append("".join(_SIGMA_ORDER[dig] for dig in digits))
    return OperatorBasis(d=d, elements=elements, labels=tuple(labels))


def _two_spin_states():
    """Singlet/triplet state vectors in the (up,down) product basis."""
    up = np.array([1.0, 0.0])
    dn = np.array([0.0, 1.0])
    uu = np.kron(up, up)
    ud = np.kron(up, dn)
    du = np.kron(dn, up)
    dd = np.kron(dn, dn)
    s = (ud - du) / np.sqrt(2.0)
    t0 = (ud + du) / np.sqrt(2.0)
    return s.astype(complex), uu.astype(complex), t0.astype(complex), dd.astype(complex)


def singlet_triplet_basis() -> OperatorBasis:
    """Two-spin basis built on the singlet/triplet eigenstates of total spin.

    Element 0 projects onto the singlet, element 1 is the normalized triplet
    projector, elements 2-9 are Gell-Mann-type generators within the triplet
    subspace, and elements 10-15 connect the singlet to each triplet state.
    """
    s, tp, t0, tm = _two_spin_states()

    def ketbra(a, b):
        return np.outer(a, b.conj())

    rt2 = np.sqrt(2.0)
    elements = np.empty((16, 4, 4), dtype=complex)
    elements[0] = ketbra(s, s)
    elements[1] = (ketbra(tm, tm) + ketbra(t0, t0) + ketbra(tp, tp)) / np.sqrt(3.0)
    elements[2] = (ketbra(tm, t0) + ketbra(t0, tm)) / rt2
    elements[3] = (ketbra(tm, tp) + ketbra(tp, tm)) / rt2
    elements[4] = (ketbra(t0, tp) + ketbra(tp, t0)) / rt2
    elements[5] = (ketbra(tm, t0) - ketbra(t0, tm)) / (1j * rt2)
    elements[6] = (ketbra(tm, tp) - ketbra(tp, tm)) / (1j * rt2)
    elements[7] = (ketbra(t0, tp) - ketbra(tp, t0)) / (1j * rt2)
    elements[8] = (ketbra(tm, tm) - ketbra(t0, t0)) / rt2
    elements[9] = (ketbra(tm, tm) + ketbra(t0, t0) - 2.0 * ketbra(tp, tp)) / np.sqrt(6.0)
    elements[10] = (ketbra(s, tm) + ketbra(tm, s)) / rt2
    elements[11] = (ketbra(s, t0) + ketbra(t0, s)) / rt2
    elements[12] = (ketbra(s, tp) + ketbra(tp, s)) / rt2
    elements[13] = (ketbra(s, tm) - ketbra(tm, s)) / (1j * rt2)
    elements[14] = (ketbra(s, t0) - ketbra(t0, s)) / (1j * rt2)
    elements[15] = (ketbra(s, tp) - ketbra(tp, s)) / (1j * rt2)
    labels = ("S", "T", "G1", "G2", "G3", "G4", "G5", "G6", "G7", "G8",
              "STm_re", "ST0_re", "STp_re", "STm_im", "ST0_im", "STp_im")
    return OperatorBasis(d=4, elements=elements, labels=labels)


# ---------------------------------------------------------------------------
# Superoperators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuperOp:
    """Linear map on coefficient vectors, stored as a real d^2 x d^2 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=float))
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(coeffs)

    def __matmul__(self, other: "SuperOp") -> "SuperOp":
        return SuperOp(self.matrix @ other.matrix)


def unitary_superop(u: np.ndarray, basis: OperatorBasis) -> SuperOp:
    """Real orthogonal representation M_lk = Tr(P_l U P_k U^dag)."""
    u = np.asarray(u, dtype=complex)
    d = basis.d
    if u.shape != (d, d):
        raise ValueError(f"unitary shape {u.shape} does not match basis dim {d}")
    err = np.abs(u.conj().T @ u - np.eye(d)).max()
    if err > _UNITARY_TOL:
        raise ValueError(f"matrix is not unitary (deviation {err:.2e})")
    rotated = u @ basis.elements @ u.conj().T
    mat = np.einsum("lab,kba->lk", basis.elements, rotated)
    return SuperOp(mat.real)


def _triple_products(basis: OperatorBasis):
    """Pair products W_ab = P_a P_b, shared by the tensor constructors."""
    el = basis.elements
    return np.einsum("aij,bjk->abik", el, el)


def adjoint_matrices(basis: OperatorBasis) -> np.ndarray:
    """Commutator generators A[m]_ij = -i Tr(P_i [P_m, P_j]) (all real).

    The superoperator of rho -> -i[H, rho] is sum_m Tr(P_m H) A[m].
    """
    cached = basis.__dict__.get("_adjoint_cache")
    if cached is not None:
        return cached
    el = basis.elements
    w = _triple_products(basis)
    # T3[a,b,c] = Tr(P_a P_b P_c)
    t3 = np.einsum("abij,cji->abc", w, el)
    a = -1j * (t3.transpose(0, 1, 2) - t3.transpose(0, 2, 1))  # (i, m, j)
    a = np.ascontiguousarray(a.transpose(1, 0, 2))
    if np.abs(a.imag).max() > 1e-12:
        raise AssertionError("adjoint matrices should be real")
    a = a.real.copy()
    a.flags.writeable = False
    object.__setattr__(basis, "_adjoint_cache", a)
    return a


def hamiltonian_superop(h: np.ndarray, basis: OperatorBasis) -> np.ndarray:
    """Generator of rho -> -i[H, rho] acting on coefficient vectors."""
    coeffs = basis.expand(h)
    return np.tensordot(coeffs, adjoint_matrices(basis), axes=(0, 0))


@dataclass(frozen=True)
class StructureConstants:
    """Rank-4 contraction tensors entering the quadratic generator terms.

    f[i,j,k,l] = Tr(P_i [[P_k, P_l], P_j])  (antisymmetric in k <-> l)
    g[i,j,k,l] = Tr(P_i [P_k, [P_l, P_j]])
    """

    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        for name in ("f", "g"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def structure_constants(basis: OperatorBasis) -> StructureConstants:
    """Dense f and g tensors for bases of dimension d <= 4.

    Double commutators of Hermitian operators are Hermitian, so both tensors
    are exactly real; f is re-antisymmetrized in (k, l) so that downstream
    contractions with symmetric kernels vanish identically.
    """
    cached = basis.__dict__.get("_structure_cache")
    if cached is not None:
        return cached
    if basis.d > 4:
        raise ValueError(
            "dense structure constants are limited to d <= 4; larger systems "
            "are handled by block factorization upstream")
    w = _triple_products(basis)
    # T4[a,b,c,d] = Tr(P_a P_b P_c P_d)
    t4 = np.einsum("abij,cdji->abcd", w, w)
    f = (np.einsum("iklj->ijkl", t4) - np.einsum("ilkj->ijkl", t4)
         - t4 + np.einsum("ijlk->ijkl", t4))
    g = (np.einsum("iklj->ijkl", t4) - np.einsum("ikjl->ijkl", t4)
         - np.einsum("iljk->ijkl", t4) + np.einsum("ijlk->ijkl", t4))
    if max(np.abs(f.imag).max(), np.abs(g.imag).max()) > 1e-12:
        raise AssertionError("structure constants should be real")
    f = f.real
    f = 0.5 * (f - f.transpose(0, 1, 3, 2))
    sc = StructureConstants(f=f, g=g.real)
    object.__setattr__(basis, "_structure_cache", sc)
    return sc


# ---------------------------------------------------------------------------
# Piecewise-constant schedules and interaction-picture coefficients
# ---------------------------------------------------------------------------

def schedule_unitary(schedule: Sequence) -> np.ndarray:
    """Total propagator of a [(H, duration), ...] schedule (leftmost = first)."""
    if not schedule:
        raise ValueError("schedule must contain at least one piece")
    d = np.asarray(schedule[0][0]).shape[0]
    u = np.eye(d, dtype=complex)
    for h, dt in schedule:
        u = expm(-1j * np.asarray(h, dtype=complex) * float(dt)) @ u
    return u


@dataclass(frozen=True)
class BtildePiece:
    """Exponential-mode data for one constant-Hamiltonian piece.

    Over piece-local time tau' in [0, duration],
    Btilde[c, k](t_start + tau') = Re sum_m coef[c, k, m] exp(i omega[m] tau').
    """

    t_start: float
    duration: float
    omega: np.ndarray          # (n_modes,) real
    coef: np.ndarray           # (n_channels, d*d, n_modes) complex

    def values(self, taus_local: np.ndarray) -> np.ndarray:
        phases = np.exp(1j * np.outer(self.omega, np.asarray(taus_local, dtype=float)))
        return np.einsum("ckm,mt->ckt", self.coef, phases).real


@dataclass(frozen=True)
class BtildeSeries:
    """Interaction-picture expansion coefficients over one coarse segment.

    ``pieces`` partition [0, duration]; each holds an exact complex-
    exponential decomposition of Btilde_{ck}(tau) in piece-local time.
    """

    d: int
    n_channels: int
    duration: float
    pieces: tuple

    @property
    def piece_starts(self) -> np.ndarray:
        return np.array([p.t_start for p in self.pieces])

    def values(self, taus: np.ndarray) -> np.ndarray:
        """Tabulate Btilde on arbitrary nodes; shape (n_channels, d*d, n_taus)."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        if taus.min() < -1e-9 or taus.max() > self.duration + 1e-9:
            raise ValueError("requested times fall outside the segment")
        ends = np.array([p.t_start + p.duration for p in self.pieces])
        idx = np.searchsorted(ends[:-1], taus, side="right")
        out = np.empty((self.n_channels, self.d * self.d, taus.size))
        for p_i, piece in enumerate(self.pieces):
            sel = idx == p_i
            if np.any(sel):
                out[:, :, sel] = piece.values(taus[sel] - piece.t_start)
        return out

    def composed(self, prior: SuperOp) -> "BtildeSeries":
        """Re-reference to an earlier origin: new_k = sum_l old_l * M_lk.

        ``prior`` is the superoperator of the ideal propagator from the new
        origin to this series' origin.
        """
        pieces = tuple(
            BtildePiece(
                t_start=p.t_start,
                duration=p.duration,
                omega=p.omega,
                coef=np.einsum("clm,lk->ckm", p.coef, prior.matrix),
            )
            for p in self.pieces
        )
        return BtildeSeries(d=self.d, n_channels=self.n_channels,
                            duration=self.duration, pieces=pieces)


def _collect_modes(omega_raw: np.ndarray, coef_raw: np.ndarray):
    """Merge exponential modes whose frequencies agree within _OMEGA_TOL."""
    order = np.argsort(omega_raw)
    omega_sorted = omega_raw[order]
    coef_sorted = coef_raw[..., order]
    groups = np.concatenate(([0], np.cumsum(np.diff(omega_sorted) > _OMEGA_TOL)))
    n_modes = groups[-1] + 1
    omega = np.zeros(n_modes)
    coef = np.zeros(coef_sorted.shape[:-1] + (n_modes,), dtype=complex)
    np.add.at(omega, groups, omega_sorted)
    counts = np.bincount(groups, minlength=n_modes)
    omega /= counts
    for g in range(n_modes):
        coef[..., g] = coef_sorted[..., groups == g].sum(axis=-1)
    return omega, coef


def btilde(operators: np.ndarray, schedule: Sequence, basis: OperatorBasis,
           u0: np.ndarray | None = None,
           active: Sequence[Sequence[float]] | None = None) -> BtildeSeries:
    """Exact interaction-picture coefficients of noise coupling operators.

    Parameters
    ----------
    operators : array_like, shape (n_channels, d, d)
        Hermitian coupling operators B_c, one per noise channel.
    schedule : sequence of (H, duration)
        Piecewise-constant control Hamiltonian over the segment, in order.
    basis : OperatorBasis
        Basis defining the coefficients Btilde_k = Tr(B U P_k U^dag).
    u0 : ndarray, optional
        Ideal propagator accumulated before this segment; supplying the
        propagator from an earlier origin yields the series referenced to
        that origin.
    active : array_like, shape (n_channels, n_pieces), optional
        Per-piece coupling gain.  Entry [c, p] scales channel c during
        piece p; 0 switches it off -- e.g. a multiplicative
        pulse-amplitude fluctuation couples with the pulse amplitude
        while it is on and 0 in the idles.  Default: gain 1 everywhere.
    """
    d = basis.d
    ops = np.atleast_3d(np.asarray(operators, dtype=complex))
    if ops.shape[1:] != (d, d):
        raise ValueError(f"operators must have shape (n, {d}, {d})")
    herm_err = np.abs(ops - ops.conj().transpose(0, 2, 1)).max()
    if herm_err > 1e-10:
        raise ValueError(f"coupling operators must be Hermitian (err={herm_err:.2e})")
    if not schedule:
        raise ValueError("schedule must contain at least one piece")
    if active is not None:
        active = np.asarray(active, dtype=float)
        if active.shape != (ops.shape[0], len(schedule)):
            raise ValueError(
                f"active mask must have shape {(ops.shape[0], len(schedule))}, "
                f"got {active.shape}"
            )

    u_acc = np.eye(d, dtype=complex) if u0 is None else np.asarray(u0, dtype=complex)
    pieces = []
    t_start = 0.0
    for pi, (h, dt) in enumerate(schedule):
        h = np.asarray(h, dtype=complex)
        dt = float(dt)
        if dt <= 0:
            raise ValueError("piece durations must be positive")
        energies, v = np.linalg.eigh(h)
        # W[k] = V^dag (U_acc P_k U_acc^dag) V ; Bv[c] = V^dag B_c V
        rotated = u_acc @ basis.elements @ u_acc.conj().T
        w = v.conj().T @ rotated @ v
        bv = v.conj().T @ ops @ v
        # Btilde_{ck}(tau') = sum_{mn} Bv[c,m,n] W[k,n,m] e^{i(E_m - E_n) tau'}
        omega_raw = np.subtract.outer(energies, energies).ravel()
        coef_raw = np.einsum("cmn,knm->ckmn", bv, w).reshape(ops.shape[0], d * d, -1)
        omega, coef = _collect_modes(omega_raw, coef_raw)
        if active is not None:
            coef = coef * active[:, pi, None, None]
        scale = np.abs(coef).max()
        keep = (
            np.abs(coef).max(axis=(0, 1)) > _COEF_PRUNE * scale
            if scale > 0.0
            else np.zeros(omega.size, dtype=bool)
        )
        if not keep.any():
            keep[np.argmin(np.abs(omega))] = True
        pieces.append(BtildePiece(t_start=t_start, duration=dt,
                                  omega=omega[keep], coef=coef[:, :, keep]))
        u_acc = (v * np.exp(-1j * energies * dt)) @ v.conj().T @ u_acc
        t_start += dt
    return BtildeSeries(d=d, n_channels=ops.shape[0], duration=t_start,
                        pieces=tuple(pieces))
