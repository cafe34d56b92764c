"""Tests for operator bases, superoperators, and interaction-picture series."""

import numpy as np
import pytest
from scipy.linalg import expm

from bridgesim.liouville import (
    BtildeSeries,
    OperatorBasis,
    adjoint_matrices,
    btilde,
    hamiltonian_superop,
    pauli_basis,
    schedule_unitary,
    singlet_triplet_basis,
    structure_constants,
    unitary_superop,
)

SX = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SY = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SZ = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


def random_hermitian(d, rng):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return (a + a.conj().T) / 2.0


def random_unitary(d, rng):
    return expm(-1j * random_hermitian(d, rng))


def heisenberg_coupling():
    """S1.S2 for two spin-1/2 particles."""
    half = [0.5 * SX, 0.5 * SY, 0.5 * SZ]
    return sum(np.kron(s, s) for s in half)


# ---------------------------------------------------------------------------
# Pauli product basis
# ---------------------------------------------------------------------------

def test_pauli_basis_single_qubit_orthonormal():
    basis = pauli_basis(1)
    assert basis.d == 2
    assert basis.labels == ("I", "X", "Y", "Z")
    gram = np.einsum("kab,lba->kl", basis.elements, basis.elements)
    assert np.abs(gram - np.eye(4)).max() < 1e-12
    assert np.abs(basis.elements[0] - np.eye(2) / np.sqrt(2)).max() < 1e-15


def test_pauli_basis_two_qubits_exhaustive():
    basis = pauli_basis(2)
    assert len(basis.elements) == 16
    gram = np.einsum("kab,lba->kl", basis.elements, basis.elements)
    assert np.abs(gram - np.eye(16)).max() < 1e-12
    herm = np.abs(basis.elements - basis.elements.conj().transpose(0, 2, 1)).max()
    assert herm < 1e-12


def test_pauli_basis_completeness_identity():
    rng = np.random.default_rng(101)
    for n in (1, 2, 3):
        basis = pauli_basis(n)
        h = random_hermitian(2 ** n, rng)
        coeffs = basis.expand(h)
        assert np.abs(np.sum(coeffs ** 2) - np.trace(h @ h).real) < 1e-10


def test_pauli_basis_range_check():
    with pytest.raises(ValueError):
        pauli_basis(0)
    with pytest.raises(ValueError):
        pauli_basis(7)


# ---------------------------------------------------------------------------
# Singlet-triplet basis
# ---------------------------------------------------------------------------

def test_singlet_triplet_orthonormal():
    basis = singlet_triplet_basis()
    gram = np.einsum("kab,lba->kl", basis.elements, basis.elements)
    assert np.abs(gram - np.eye(16)).max() < 1e-12
    herm = np.abs(basis.elements - basis.elements.conj().transpose(0, 2, 1)).max()
    assert herm < 1e-12


def test_singlet_triplet_projector_completeness():
    basis = singlet_triplet_basis()
    ident = basis.elements[0] + np.sqrt(3.0) * basis.elements[1]
    assert np.abs(ident - np.eye(4)).max() < 1e-12


def test_exchange_coupling_has_two_nonzero_coefficients():
    # J S1.S2 expands onto the singlet and triplet projectors only, with
    # weights -(3/4) J and (sqrt(3)/4) J.
    basis = singlet_triplet_basis()
    j = 0.7313
    coeffs = basis.expand(j * heisenberg_coupling())
    expected = np.zeros(16)
    expected[0] = -0.75 * j
    expected[1] = np.sqrt(3.0) / 4.0 * j
    assert np.abs(coeffs - expected).max() < 1e-12


def test_operator_basis_rejects_non_orthonormal():
    bad = np.stack([np.eye(2, dtype=complex)] * 4)
    with pytest.raises(ValueError):
        OperatorBasis(d=2, elements=bad, labels=("a", "b", "c", "d"))


# ---------------------------------------------------------------------------
# Unitary superoperators
# ---------------------------------------------------------------------------

def test_unitary_superop_identity():
    basis = pauli_basis(1)
    m = unitary_superop(np.eye(2), basis).matrix
    assert np.abs(m - np.eye(4)).max() < 1e-14


def test_unitary_superop_x_rotation_maps_z_to_minus_y():
    # U = exp(-i (pi/2) X / 2) conjugates Z to -Y, so the Z column of the
    # superoperator has a single -1 in the Y row.
    basis = pauli_basis(1)
    u = expm(-1j * (np.pi / 2.0) * SX / 2.0)
    m = unitary_superop(u, basis).matrix
    expected_col = np.array([0.0, 0.0, -1.0, 0.0])
    assert np.abs(m[:, 3] - expected_col).max() < 1e-12


def test_unitary_superop_is_homomorphism():
    rng = np.random.default_rng(202)
    basis = singlet_triplet_basis()
    for _ in range(5):
        u1 = random_unitary(4, rng)
        u2 = random_unitary(4, rng)
        m12 = unitary_superop(u2 @ u1, basis).matrix
        m2m1 = unitary_superop(u2, basis).matrix @ unitary_superop(u1, basis).matrix
        assert np.abs(m12 - m2m1).max() < 1e-10


def test_unitary_superop_orthogonal_and_unital():
    rng = np.random.default_rng(303)
    for basis in (pauli_basis(1), pauli_basis(2), singlet_triplet_basis()):
        u = random_unitary(basis.d, rng)
        m = unitary_superop(u, basis).matrix
        assert np.abs(m.T @ m - np.eye(basis.d ** 2)).max() < 1e-10
        # the normalized identity is a fixed point in both directions
        # (unitality and trace preservation)
        c_ident = basis.expand(np.eye(basis.d) / np.sqrt(basis.d))
        assert np.abs(m @ c_ident - c_ident).max() < 1e-12
        assert np.abs(m.T @ c_ident - c_ident).max() < 1e-12


def test_unitary_superop_rejects_non_unitary():
    basis = pauli_basis(1)
    with pytest.raises(ValueError):
        unitary_superop(np.array([[1.0, 0.1], [0.0, 1.0]]), basis)


# ---------------------------------------------------------------------------
# Structure constants and adjoint generators
# ---------------------------------------------------------------------------

def comm(a, b):
    return a @ b - b @ a


def test_structure_constants_single_qubit_brute_force():
    basis = pauli_basis(1)
    sc = structure_constants(basis)
    el = basis.elements
    for i in range(4):
        for j in range(4):
            for k in range(4):
                for l in range(4):
                    f_direct = np.trace(el[i] @ comm(comm(el[k], el[l]), el[j]))
                    g_direct = np.trace(el[i] @ comm(el[k], comm(el[l], el[j])))
                    assert abs(sc.f[i, j, k, l] - f_direct) < 1e-12
                    assert abs(sc.g[i, j, k, l] - g_direct) < 1e-12


def test_structure_constants_identity_slots_vanish():
    sc = structure_constants(pauli_basis(1))
    assert np.abs(sc.f[:, :, 0, :]).max() == 0.0
    assert np.abs(sc.f[:, :, :, 0]).max() == 0.0


def test_structure_constants_random_tuples_singlet_triplet():
    basis = singlet_triplet_basis()
    sc = structure_constants(basis)
    el = basis.elements
    rng = np.random.default_rng(404)
    for _ in range(100):
        i, j, k, l = rng.integers(0, 16, size=4)
        f_direct = np.trace(el[i] @ comm(comm(el[k], el[l]), el[j]))
        g_direct = np.trace(el[i] @ comm(el[k], comm(el[l], el[j])))
        assert abs(sc.f[i, j, k, l] - f_direct) < 1e-12
        assert abs(sc.g[i, j, k, l] - g_direct) < 1e-12


def test_structure_constant_symmetries():
    sc = structure_constants(singlet_triplet_basis())
    # f antisymmetric in (k, l), enforced exactly
    assert np.abs(sc.f + sc.f.transpose(0, 1, 3, 2)).max() == 0.0
    # g symmetric under simultaneous (i<->j, k<->l)
    assert np.abs(sc.g - sc.g.transpose(1, 0, 3, 2)).max() < 1e-12


def test_adjoint_matrices_reproduce_commutator():
    rng = np.random.default_rng(505)
    basis = singlet_triplet_basis()
    h = random_hermitian(4, rng)
    rho = random_hermitian(4, rng)
    gen = hamiltonian_superop(h, basis)
    lhs = basis.reconstruct(gen @ basis.expand(rho))
    rhs = -1j * comm(h, rho)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_adjoint_matrices_are_real_antisymmetric():
    a = adjoint_matrices(pauli_basis(2))
    assert a.dtype == np.float64
    assert np.abs(a + a.transpose(0, 2, 1)).max() < 1e-12


# ---------------------------------------------------------------------------
# Interaction-picture coefficient series
# ---------------------------------------------------------------------------

def test_btilde_free_evolution_is_constant():
    # With no control Hamiltonian the coefficients are the bare expansion of
    # the coupling operator at every time.
    basis = pauli_basis(1)
    series = btilde(np.array([0.5 * SX]), [(np.zeros((2, 2)), 10.0)], basis)
    vals = series.values(np.linspace(0.0, 10.0, 7))
    expected = np.zeros((4, 7))
    expected[1, :] = 1.0 / np.sqrt(2.0)
    assert np.abs(vals[0] - expected).max() < 1e-12


def test_btilde_exchange_constant_under_own_evolution():
    # The coupling S1.S2 commutes with a control Hamiltonian proportional to
    # itself, so its interaction-picture coefficients stay fixed at the two
    # projector weights.
    basis = singlet_triplet_basis()
    j = 0.42
    h = 0.3 * heisenberg_coupling()
    series = btilde(np.array([j * heisenberg_coupling()]), [(h, 25.0)], basis)
    vals = series.values(np.linspace(0.0, 25.0, 11))
    expected = np.zeros((16, 11))
    expected[0, :] = -0.75 * j
    expected[1, :] = np.sqrt(3.0) / 4.0 * j
    assert np.abs(vals[0] - expected).max() < 1e-10


def test_btilde_norm_preservation():
    rng = np.random.default_rng(606)
    basis = singlet_triplet_basis()
    schedule = [(random_hermitian(4, rng), 7.0), (random_hermitian(4, rng), 5.0)]
    ops = np.array([random_hermitian(4, rng), random_hermitian(4, rng)])
    series = btilde(ops, schedule, basis)
    vals = series.values(np.linspace(0.0, 12.0, 23))
    norms = (vals ** 2).sum(axis=1)
    targets = np.array([np.trace(o @ o).real for o in ops])
    assert np.abs(norms - targets[:, None]).max() < 1e-10


def test_btilde_composition_rule():
    # Tabulating over the full window directly agrees with tabulating the
    # tail segment and re-referencing through the ideal propagator of the
    # head segment.
    rng = np.random.default_rng(707)
    basis = singlet_triplet_basis()
    head = [(random_hermitian(4, rng), 7.0)]
    tail = [(random_hermitian(4, rng), 5.0), (random_hermitian(4, rng), 3.0)]
    ops = np.array([random_hermitian(4, rng)])
    direct = btilde(ops, head + tail, basis)
    u_head = schedule_unitary(head)
    taus_tail = np.array([0.0, 1.5, 4.999, 6.2, 8.0])

    composed = btilde(ops, tail, basis).composed(unitary_superop(u_head, basis))
    assert np.abs(direct.values(7.0 + taus_tail) - composed.values(taus_tail)).max() < 1e-9

    via_u0 = btilde(ops, tail, basis, u0=u_head)
    assert np.abs(direct.values(7.0 + taus_tail) - via_u0.values(taus_tail)).max() < 1e-9


def test_btilde_rejects_out_of_segment_times():
    basis = pauli_basis(1)
    series = btilde(np.array([0.5 * SX]), [(np.zeros((2, 2)), 10.0)], basis)
    with pytest.raises(ValueError):
        series.values(np.array([10.5]))


def test_btilde_piece_boundaries_are_continuous():
    rng = np.random.default_rng(808)
    basis = pauli_basis(1)
    schedule = [(random_hermitian(2, rng), 4.0), (random_hermitian(2, rng), 6.0)]
    series = btilde(np.array([0.5 * SZ]), schedule, basis)
    eps = 1e-9
    left = series.values(np.array([4.0 - eps]))
    right = series.values(np.array([4.0 + eps]))
    assert np.abs(left - right).max() < 1e-6


def test_schedule_unitary_matches_expm_product():
    rng = np.random.default_rng(909)
    h1, h2 = random_hermitian(4, rng), random_hermitian(4, rng)
    u = schedule_unitary([(h1, 2.0), (h2, 3.0)])
    expected = expm(-1j * h2 * 3.0) @ expm(-1j * h1 * 2.0)
    assert np.abs(u - expected).max() < 1e-12


def test_btilde_active_mask_gates_pieces():
    rng = np.random.default_rng(606)
    basis = pauli_basis(1)
    schedule = [(random_hermitian(2, rng), 4.0), (random_hermitian(2, rng), 6.0)]
    ops = np.array([0.5 * SX, 0.5 * SZ])
    full = btilde(ops, schedule, basis)
    gated = btilde(ops, schedule, basis, active=[[True, False], [True, True]])
    t1 = np.array([0.5, 2.0, 3.9])
    t2 = np.array([4.5, 7.0, 9.9])
    assert np.abs(gated.values(t1) - full.values(t1)).max() < 1e-14
    assert np.abs(gated.values(t2)[0]).max() == 0.0
    assert np.abs(gated.values(t2)[1] - full.values(t2)[1]).max() < 1e-14


def test_btilde_active_mask_shape_checked():
    basis = pauli_basis(1)
    with pytest.raises(ValueError, match="active"):
        btilde(
            np.array([0.5 * SX]),
            [(np.zeros((2, 2)), 10.0)],
            basis,
            active=[[True, False]],
        )
