"""Tests for the spin-chain circuit layer: schedules, gates, measurement,
parity rounds, and decay-curve experiments."""

import numpy as np
import pytest

from bridgesim import circuits as C
from bridgesim.analysis import bootstrap_ci, fit_t2star
from bridgesim.coarse_grain import LiouvilleState

# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cache_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("precompute-cache"))


@pytest.fixture(scope="module")
def gate_data():
    return C.load_gate_data()


@pytest.fixture(scope="module")
def qs_ensemble(cache_dir):
    """Small quasi-static parity run reused by several tests."""
    return C.run_parity_ensemble(
        C.SpinChainConfig(),
        C.quasi_static_noise(),
        n_measurements=10,
        n_realizations=30,
        cache_dir=cache_dir,
    )


def _pair_coeff_vectors():
    tables = C._pair_tables()
    s = tables["s_coeffs"]
    t0 = s - tables["z_coeffs"]  # |T0><T0| = |S><S| - Zbar
    return s, t0


# ---------------------------------------------------------------------------
# Chain configuration
# ---------------------------------------------------------------------------


def test_config_defaults_and_derived_quantities():
    cfg = C.SpinChainConfig()
    assert cfg.n_bonds == 5
    assert cfg.n_pairs == 3
    assert cfg.group_ns == 40.0
    # g mu_B B / h = 2 * 13.996... GHz/T * 0.50005 T
    assert cfg.mean_splitting_rad_ns / (2 * np.pi) == pytest.approx(
        2.0 * 13.996244936 * 0.50005, rel=1e-12
    )
    offs = np.array(cfg.offsets_rad_ns)
    assert offs.sum() == pytest.approx(0.0, abs=1e-12)
    # differences across bonds reproduce the configured gradients
    expected = -np.array(cfg.deltas_mhz) * 2 * np.pi * 1e-3
    np.testing.assert_allclose(np.diff(offs), expected, atol=1e-15)
    np.testing.assert_allclose(
        offs / (2 * np.pi * 1e-3),
        [25 / 3, -5 / 3, -35 / 3, -5 / 3, 25 / 3, -5 / 3],
        atol=1e-9,
    )
    split = np.array(cfg.splittings_rad_ns)
    np.testing.assert_allclose(split, cfg.mean_splitting_rad_ns + offs)


def test_config_digest_tracks_calibration_fields():
    cfg = C.SpinChainConfig()
    assert cfg.digest == C.SpinChainConfig().digest
    assert cfg.digest != C.SpinChainConfig(deltas_mhz=(10, 10, -10, -10, 11)).digest
    assert cfg.digest != C.SpinChainConfig(pulse_ns=21.0).digest
    # mean field does not enter calibration, so it must not change the digest
    assert cfg.digest == C.SpinChainConfig(field_mtesla=400.0).digest


def test_config_validation():
    with pytest.raises(ValueError, match="deltas_mhz"):
        C.SpinChainConfig(n_spins=4)
    with pytest.raises(ValueError, match="positive"):
        C.SpinChainConfig(pulse_ns=0.0)
    with pytest.raises(ValueError, match="ancilla_pair"):
        C.SpinChainConfig(ancilla_pair=3)


def test_noise_model_constructors():
    pink = C.one_over_f_noise()
    assert pink.label == "one_over_f"
    assert len(pink.magnetic) == 9
    assert len(pink.exchange) == 14
    static = C.quasi_static_noise()
    assert static.label == "quasi_static"
    assert len(static.magnetic) == len(static.exchange) == 1
    assert static.magnetic[0].gamma == 0.0
    assert static.magnetic[0].stationary_var == pytest.approx(
        0.5 * (2 * np.pi * 6.431e-5) ** 2
    )
    assert static.exchange[0].stationary_var == pytest.approx(0.5 * 6.099e-3**2)
    silent = C.no_noise()
    assert silent.magnetic == () and silent.exchange == ()


# ---------------------------------------------------------------------------
# Operators, schedules
# ---------------------------------------------------------------------------


def test_resolve_operator_atoms():
    sz = np.diag([0.5, -0.5])
    np.testing.assert_allclose(
        C.resolve_operator("S1z", 2), np.kron(sz, np.eye(2))
    )
    np.testing.assert_allclose(
        C.resolve_operator("S1.S2", 2), C.exchange_operator(2, 0, 1)
    )
    np.testing.assert_allclose(
        C.resolve_operator("sigma_x/2", 1), [[0, 0.5], [0.5, 0]]
    )
    np.testing.assert_allclose(
        C.resolve_operator("S1z-S2z", 2),
        np.kron(sz, np.eye(2)) - np.kron(np.eye(2), sz),
    )
    np.testing.assert_allclose(
        C.resolve_operator("0.5*S1z+0.25*I", 1), 0.5 * sz + 0.25 * np.eye(2)
    )
    with pytest.raises(ValueError, match="atom"):
        C.resolve_operator("Q1z", 2)
    with pytest.raises(ValueError, match="empty"):
        C.resolve_operator("", 2)


def test_segment_and_schedule_validation():
    with pytest.raises(ValueError, match="positive"):
        C.PulseSegment(duration_ns=0.0, exchange_mhz=(0.0,))
    with pytest.raises(ValueError, match="event kind"):
        C.PulseSegment(duration_ns=1.0, exchange_mhz=(0.0,),
                       events=(("observe", (0, 1)),))
    with pytest.raises(ValueError, match="adjacent"):
        C.PulseSegment(duration_ns=1.0, exchange_mhz=(0.0,),
                       events=(("measure", (0, 2)),))
    seg = C.PulseSegment(duration_ns=1.0, exchange_mhz=(0.0, 1.0))
    with pytest.raises(ValueError, match="bonds"):
        C.PulseSchedule(n_spins=2, segments=(seg,))


def test_merge_and_concat_schedules():
    seg_a = C.PulseSegment(duration_ns=5.0, exchange_mhz=(10.0, 0.0, 0.0))
    seg_b = C.PulseSegment(duration_ns=5.0, exchange_mhz=(0.0, 0.0, 7.0))
    a = C.PulseSchedule(n_spins=4, segments=(seg_a,))
    b = C.PulseSchedule(n_spins=4, segments=(seg_b,))
    merged = C.merge_schedules(a, b)
    assert merged.segments[0].exchange_mhz == (10.0, 0.0, 7.0)
    assert merged.duration_ns == 5.0
    both = C.concat_schedules(a, b)
    assert both.duration_ns == 10.0
    assert both.segments == (seg_a, seg_b)
    with pytest.raises(ValueError, match="same bond"):
        C.merge_schedules(a, a)
    with pytest.raises(ValueError, match="segmentation"):
        C.merge_schedules(a, C.concat_schedules(b, b))
    seg_c = C.PulseSegment(duration_ns=4.0, exchange_mhz=(0.0, 0.0, 7.0))
    with pytest.raises(ValueError, match="durations"):
        C.merge_schedules(a, C.PulseSchedule(n_spins=4, segments=(seg_c,)))


def test_ideal_segment_unitary_is_unitary_and_swaps():
    cfg = C.SpinChainConfig(n_spins=2, deltas_mhz=(0.0,), ancilla_pair=0)
    # pulse area J t = pi: Heisenberg exchange generates SWAP (up to phase)
    j_mhz = 0.5 / (20.0 * 1e-3)  # J * t = half a cycle
    seg = C.PulseSegment(duration_ns=20.0, exchange_mhz=(j_mhz,))
    u = C.ideal_segment_unitary(seg, cfg)
    np.testing.assert_allclose(u @ u.conj().T, np.eye(4), atol=1e-12)
    up_dn = np.array([0, 1, 0, 0], dtype=complex)
    dn_up = np.array([0, 0, 1, 0], dtype=complex)
    assert abs(dn_up.conj() @ u @ up_dn) == pytest.approx(1.0, abs=1e-9)


def test_chain_hamiltonian_structure():
    cfg = C.SpinChainConfig()
    h = C.chain_hamiltonian(cfg, (0.0,) * 5)
    np.testing.assert_allclose(h, h.conj().T)
    # no exchange: diagonal in the product basis with Zeeman sums
    assert np.abs(h - np.diag(np.diag(h))).max() < 1e-12
    h2 = C.chain_hamiltonian(cfg, (100.0, 0.0, 0.0, 0.0, 0.0))
    coupling = h2 - h
    np.testing.assert_allclose(
        coupling, 100.0 * 2 * np.pi * 1e-3 * C.exchange_operator(6, 0, 1), atol=1e-12
    )


# ---------------------------------------------------------------------------
# Calibrated gates
# ---------------------------------------------------------------------------


def _compiled_gate_block(name, cfg, gate_data):
    """Exact sector propagator of a shipped gate and its encoded block."""
    spec = C._gate_definition(name, cfg)
    spins = tuple(range(2 * spec["pairs"][0], 2 * (spec["pairs"][-1] + 1)))
    hz_s, hj_s, e_mat = C._sector_problem(cfg, spins)
    local = tuple(tuple(b - spins[0] for b in bonds) for bonds in spec["slot_bonds"])
    entry = gate_data["gates"][name]
    width = max(len(b) for b in spec["slot_bonds"])
    amps = np.zeros((len(spec["slot_bonds"]), width))
    for s, row in enumerate(entry["amplitudes_mhz"]):
        amps[s, : len(row)] = row
    u = C._gate_unitary(amps, local, cfg, hz_s, hj_s)
    return u, e_mat, spec


def test_shipped_gate_data_matches_config():
    cfg = C.SpinChainConfig()
    data = C.load_gate_data()
    assert data["format"] == C.GATE_DATA_FORMAT
    assert data["config_digest"] == cfg.digest
    assert set(data["gates"]) == set(C.GATE_NAMES)


@pytest.mark.parametrize("name", C.GATE_NAMES)
def test_shipped_gates_are_high_fidelity(name, gate_data):
    cfg = C.SpinChainConfig()
    u, e_mat, spec = _compiled_gate_block(name, cfg, gate_data)
    np.testing.assert_allclose(u @ u.conj().T, np.eye(u.shape[0]), atol=1e-10)
    infid, leak = C._gate_metrics(
        u, e_mat, spec["kind"], spec.get("control_first", True)
    )
    assert infid < 1e-8
    assert leak < 1e-8


def test_cnot_truth_table_elements(gate_data):
    cfg = C.SpinChainConfig()
    u, e_mat, _ = _compiled_gate_block("CNOT12", cfg, gate_data)
    m = e_mat.conj().T @ u @ e_mat  # encoded 4x4 block, basis |00>,|01>,|10>,|11>
    for source, target in ((0, 0), (1, 1), (2, 3), (3, 2)):
        assert abs(m[target, source]) == pytest.approx(1.0, abs=1e-6)
    # reversed control: CNOT32 flips its first (target) pair
    u, e_mat, _ = _compiled_gate_block("CNOT32", cfg, gate_data)
    m = e_mat.conj().T @ u @ e_mat
    for source, target in ((0, 0), (1, 3), (2, 2), (3, 1)):
        assert abs(m[target, source]) == pytest.approx(1.0, abs=1e-6)


def test_compile_gate_expands_slots():
    cfg = C.SpinChainConfig()
    sched = C.compile_gate("CNOT12", cfg)
    assert len(sched.segments) == 18  # 9 slots, each pulse + idle
    assert sched.duration_ns == pytest.approx(360.0)
    durations = [seg.duration_ns for seg in sched.segments]
    assert durations == [20.0, 20.0] * 9
    # idles carry no exchange
    for idle in sched.segments[1::2]:
        assert all(j == 0.0 for j in idle.exchange_mhz)
    # middle window pulses only the inter-pair bond
    for pulse in sched.segments[6:12:2]:
        assert pulse.exchange_mhz[1] != 0.0
        assert pulse.exchange_mhz[0] == pulse.exchange_mhz[2] == 0.0
    ident = C.compile_gate("IDENTITY_Q2", cfg)
    assert len(ident.segments) == 6
    assert ident.duration_ns == pytest.approx(120.0)


def test_compile_gate_rejects_mismatched_data(gate_data):
    cfg = C.SpinChainConfig()
    with pytest.raises(ValueError, match="unknown gate"):
        C.compile_gate("CNOT13", cfg)
    other = C.SpinChainConfig(deltas_mhz=(12, 10, -10, -10, 10))
    with pytest.raises(ValueError, match="calibrated"):
        C.compile_gate("CNOT12", other)
    bad = dict(gate_data, format=99)
    with pytest.raises(ValueError, match="format"):
        C.compile_gate("CNOT12", cfg, bad)


def test_encoded_cnot_superop_truth_table():
    s, t0 = _pair_coeff_vectors()
    logical = (s, t0)
    cnot = C.encoded_cnot_superop(control_first=True)
    for control in (0, 1):
        for target in (0, 1):
            state = np.kron(logical[control], logical[target])
            mapped = cnot @ state
            expected = np.kron(logical[control], logical[target ^ control])
            np.testing.assert_allclose(mapped, expected, atol=1e-12)
    flipped = C.encoded_cnot_superop(control_first=False)
    state = np.kron(logical[0], logical[1])  # control is now the second pair
    np.testing.assert_allclose(
        flipped @ state, np.kron(logical[1], logical[1]), atol=1e-12
    )


def test_calibrate_gates_small_problem_deterministic():
    cfg = C.SpinChainConfig(n_spins=2, deltas_mhz=(10.0,), ancilla_pair=0)
    first = C.calibrate_gates(cfg, names=("IDENTITY_Q1",), n_starts=6)
    second = C.calibrate_gates(cfg, names=("IDENTITY_Q1",), n_starts=6)
    assert first == second
    entry = first["gates"]["IDENTITY_Q1"]
    assert entry["infidelity"] < 1e-9
    assert first["config_digest"] == cfg.digest


# ---------------------------------------------------------------------------
# Measurement and reset
# ---------------------------------------------------------------------------


def test_singlet_probability_basic_states():
    s, t0 = _pair_coeff_vectors()
    assert C.singlet_probability(LiouvilleState(coeffs=s), (0, 1)) == pytest.approx(1.0)
    assert C.singlet_probability(LiouvilleState(coeffs=t0), (0, 1)) == pytest.approx(
        0.0, abs=1e-12
    )
    mixed = np.zeros(16)
    mixed[0] = 0.5  # identity/2 (x) identity/2
    assert C.singlet_probability(LiouvilleState(coeffs=mixed), (0, 1)) == pytest.approx(
        0.25
    )
    chain = LiouvilleState(coeffs=C._initial_chain_coeffs(3))
    for pair in ((0, 1), (2, 3), (4, 5)):
        assert C.singlet_probability(chain, pair) == pytest.approx(1.0)
    # spins 1 and 2 belong to different singlets: reduced state is maximally mixed
    assert C.singlet_probability(chain, (1, 2)) == pytest.approx(0.25)
    with pytest.raises(ValueError, match="adjacent"):
        C.singlet_probability(chain, (0, 2))


def test_measure_pair_deterministic_branches():
    s, t0 = _pair_coeff_vectors()
    rng = np.random.default_rng(0)
    outcome, state = C.measure_pair(LiouvilleState(coeffs=s), (0, 1), rng)
    assert outcome == 0
    np.testing.assert_allclose(state.coeffs, s, atol=1e-12)
    outcome, state = C.measure_pair(LiouvilleState(coeffs=t0), (0, 1), rng)
    assert outcome == 1
    np.testing.assert_allclose(state.coeffs, t0, atol=1e-12)


def test_measure_pair_superposition_splits_half():
    tables = C._pair_tables()
    basis = tables["basis"]
    plus = (tables["singlet"] + tables["triplet0"]) / np.sqrt(2.0)
    rho = np.outer(plus, plus.conj())
    coeffs = basis.expand(rho)
    outcomes = []
    for seed in range(40):
        rng = np.random.default_rng(seed)
        outcome, post = C.measure_pair(LiouvilleState(coeffs=coeffs), (0, 1), rng)
        outcomes.append(outcome)
        # either branch is a pure projected state with unit trace
        p_s = C.singlet_probability(post, (0, 1))
        assert p_s == pytest.approx(1.0 - outcome, abs=1e-9)
    assert 5 < sum(outcomes) < 35  # both branches occur


def test_measure_pair_rejects_corrupted_state():
    s, _ = _pair_coeff_vectors()
    rng = np.random.default_rng(0)
    with pytest.raises(RuntimeError, match="corrupted"):
        C.measure_pair(LiouvilleState(coeffs=1.5 * s), (0, 1), rng)


def test_reset_pair_restores_singlet_and_preserves_rest():
    s, t0 = _pair_coeff_vectors()
    chain = np.kron(np.kron(t0, t0), s)  # pairs in T0, T0, S
    state = C.reset_pair(LiouvilleState(coeffs=chain), (2, 3))
    assert C.singlet_probability(state, (2, 3)) == pytest.approx(1.0)
    # outer pairs untouched
    np.testing.assert_allclose(state.coeffs, np.kron(np.kron(t0, s), s), atol=1e-12)
    # trace preserved: identity coefficient unchanged
    assert state.coeffs[0] == pytest.approx(chain[0])


# ---------------------------------------------------------------------------
# Parity rounds
# ---------------------------------------------------------------------------


def test_parity_round_schedule_layout(gate_data):
    cfg = C.SpinChainConfig()
    sched = C.parity_round_schedule(cfg, gate_data)
    assert sched.duration_ns == pytest.approx(720.0)
    assert len(sched.segments) == 36
    assert sched.segments[-1].events == (("measure", (2, 3)), ("reset", (2, 3)))
    assert all(seg.events == () for seg in sched.segments[:-1])
    with pytest.raises(ValueError, match="six-spin"):
        C.parity_round_schedule(C.SpinChainConfig(n_spins=4, deltas_mhz=(10.0,) * 3))
    with pytest.raises(ValueError, match="ancilla"):
        C.parity_round_schedule(C.SpinChainConfig(ancilla_pair=0))


def test_split_windows_counts(gate_data):
    cfg = C.SpinChainConfig()
    sched = C.parity_round_schedule(cfg, gate_data)
    assert len(C._split_windows(sched, 40.0)) == 18
    assert len(C._split_windows(sched, 120.0)) == 6
    with pytest.raises(ValueError, match="align"):
        C._split_windows(sched, 50.0)


def test_noiseless_parity_outcomes_all_zero(cache_dir, gate_data):
    cfg = C.SpinChainConfig()
    for variant in ("standard", "instant_cnot", "perfect_measurement"):
        ens = C.run_parity_ensemble(
            cfg, C.no_noise(), n_measurements=3, n_realizations=2,
            cache_dir=cache_dir, variant=variant, gate_data=gate_data,
        )
        assert not ens.outcomes.any(), variant
        assert np.abs(ens.parity_expectations).max() < 1e-9
        assert ens.p_zero.min() > 1.0 - 1e-9
        assert ens.variant == variant
        assert ens.noise_label == "noiseless"


def test_qs_ensemble_structure(qs_ensemble):
    ens = qs_ensemble
    assert ens.outcomes.shape == (30, 10)
    assert ens.outcomes.dtype == np.uint8
    assert np.isin(ens.outcomes, (0, 1)).all()
    assert ens.p_zero.shape == (30, 10)
    assert 0.9 < float(ens.p_zero.mean()) < 1.0 - 1e-6  # noise acts, weakly
    assert ens.coarse_ns == 40.0
    assert ens.wall_seconds > 0.0
    rec = ens.record(7)
    assert rec.n_measurements == 10
    np.testing.assert_array_equal(rec.outcomes, ens.outcomes[7])


def test_qs_ensemble_matches_single_realization(qs_ensemble, cache_dir):
    rec = C.run_parity_experiment(
        C.SpinChainConfig(), C.quasi_static_noise(), n_measurements=10,
        realization=11, cache_dir=cache_dir,
    )
    np.testing.assert_array_equal(rec.outcomes, qs_ensemble.outcomes[11])
    np.testing.assert_allclose(
        rec.parity_expectations, qs_ensemble.parity_expectations[11], atol=1e-12
    )


def test_qs_ensemble_deterministic_and_worker_invariant(qs_ensemble, cache_dir):
    again = C.run_parity_ensemble(
        C.SpinChainConfig(), C.quasi_static_noise(), n_measurements=10,
        n_realizations=30, cache_dir=cache_dir,
    )
    np.testing.assert_array_equal(again.outcomes, qs_ensemble.outcomes)
    np.testing.assert_array_equal(again.p_zero, qs_ensemble.p_zero)
    split = C.run_parity_ensemble(
        C.SpinChainConfig(), C.quasi_static_noise(), n_measurements=10,
        n_realizations=30, cache_dir=cache_dir, workers=2,
    )
    np.testing.assert_array_equal(split.outcomes, qs_ensemble.outcomes)
    np.testing.assert_array_equal(split.p_zero, qs_ensemble.p_zero)


def test_first_round_outcome_frequency_matches_probability(cache_dir):
    ens = C.run_parity_ensemble(
        C.SpinChainConfig(), C.quasi_static_noise(), n_measurements=1,
        n_realizations=400, cache_dir=cache_dir,
    )
    p_one = 1.0 - ens.p_zero[:, 0]
    diff = ens.outcomes[:, 0].astype(float) - p_one
    stderr = float(np.sqrt(np.maximum(np.mean(p_one * (1.0 - p_one)), 1e-12) / 400))
    assert abs(float(diff.mean())) < 4.0 * stderr + 1e-9


def test_parity_argument_validation():
    cfg = C.SpinChainConfig()
    noise = C.no_noise()
    with pytest.raises(ValueError, match="variant"):
        C.run_parity_ensemble(cfg, noise, 2, 2, variant="magic")
    with pytest.raises(ValueError, match="at least one"):
        C.run_parity_ensemble(cfg, noise, 0, 2)
    with pytest.raises(ValueError, match="at least one"):
        C.run_parity_ensemble(cfg, noise, 2, 0)
    with pytest.raises(ValueError, match="workers"):
        C.run_parity_ensemble(cfg, noise, 2, 2, workers=0)
    with pytest.raises(ValueError, match="six-spin"):
        C.run_parity_ensemble(
            C.SpinChainConfig(n_spins=4, deltas_mhz=(10.0,) * 3), noise, 2, 2
        )


def test_bernoulli_reference_matches_closed_form():
    q = 3e-3
    ens = C.bernoulli_reference(q, n_measurements=100, n_realizations=4000)
    assert ens.variant == "bernoulli"
    assert ens.p_zero is None
    rounds = np.arange(1, 101)
    formula = 0.5 * (1.0 - (1.0 - 2.0 * q) ** rounds)
    lo, hi = bootstrap_ci(ens.outcomes.astype(float))
    covered = np.mean((lo <= formula) & (formula <= hi))
    assert covered >= 0.95
    # the flip frequency in round one is q itself
    assert ens.outcomes[:, 0].mean() == pytest.approx(q, abs=4 * np.sqrt(q / 4000))


# ---------------------------------------------------------------------------
# Decay-curve experiments
# ---------------------------------------------------------------------------


def test_noiseless_free_induction_stays_in_singlet(cache_dir):
    times, probs = C.free_induction_curve(
        C.no_noise(), n_points=10, n_trajectories=3, cache_dir=cache_dir
    )
    assert times.shape == (11,)
    assert probs.shape == (3, 11)
    np.testing.assert_allclose(probs, 1.0, atol=1e-10)


def test_noiseless_exchange_oscillation_exact(cache_dir):
    times, probs = C.exchange_decay_curve(
        C.no_noise(), n_points=20, n_trajectories=2, cache_dir=cache_dir
    )
    expected = 0.625 + 0.375 * np.cos(2 * np.pi * 0.1 * times)
    assert np.abs(probs - expected[None, :]).max() < 1e-8


def test_quasi_static_free_induction_t2star(cache_dir):
    times, probs = C.free_induction_curve(
        C.quasi_static_noise(), n_trajectories=300, cache_dir=cache_dir
    )
    res = fit_t2star(times, probs.mean(axis=0))
    # frozen-gradient dephasing: T2* = sqrt(2)/(2 pi * 6.431e-5 GHz) = 3500 ns
    assert res.value("t2star") == pytest.approx(3500.0, rel=0.10)
    assert 1.8 <= res.value("b") <= 2.2


def test_quasi_static_exchange_decay_t2star(cache_dir):
    times, probs = C.exchange_decay_curve(
        C.quasi_static_noise(), n_trajectories=300, cache_dir=cache_dir
    )
    res = fit_t2star(
        times, probs.mean(axis=0), model="exchange", exchange_freq_ghz=0.1
    )
    # frozen fractional-J noise with Var(xi) = amp^2/2 gives a Gaussian
    # envelope with T2* = sqrt(2 / Var(2 pi J xi)) = 522 ns
    expected = np.sqrt(2.0 / ((2 * np.pi * 0.1) ** 2 * 0.5 * 6.099e-3**2))
    assert res.value("t2star") == pytest.approx(expected, rel=0.12)


def test_curves_deterministic(cache_dir):
    first = C.free_induction_curve(
        C.quasi_static_noise(), n_points=12, n_trajectories=20, cache_dir=cache_dir
    )
    second = C.free_induction_curve(
        C.quasi_static_noise(), n_points=12, n_trajectories=20, cache_dir=cache_dir
    )
    np.testing.assert_array_equal(first[1], second[1])
