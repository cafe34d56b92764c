"""Command line front end: ``simulate <subcommand> --config FILE --out DIR``.

Subcommands cover the experiments of the package: raw noise sampling with
spectral comparison, single-qubit and two-qubit block validation reports,
the repeated parity-check experiment, T2* calibration curves, and the
two-scale coarse-graining comparison.  Every subcommand is deterministic
given (config, seed): output files are byte-identical across reruns, so
nothing time- or host-dependent is ever written to them (wall-clock
timings go to stdout only).

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  Both
failure modes emit a single machine-parsable stderr line of the form
``simulate: error {"kind": ..., "message": ...}``.

Column layouts of all output files are documented in
``docs/output_formats.md``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional

import numpy as np
from scipy.integrate import dblquad, quad
from scipy.linalg import expm

from .analysis import (
    bootstrap_ci,
    fit_saturation,
    fit_t2star,
    parity_flip_series,
    welch_psd,
)
from .circuits import (
    NoiseModel,
    bernoulli_reference,
    exchange_decay_curve,
    exchange_operator,
    free_induction_curve,
    run_parity_ensemble,
)
from .coarse_grain import (
    NoiseChannel,
    assemble_generator,
    oracle_average,
    precompute_segment,
)
from .config import (
    CalibrateConfig,
    CompareCoarseConfig,
    ConfigError,
    ParityConfig,
    SampleNoiseConfig,
    SingleQubitConfig,
    TwoQubitConfig,
    build_components,
    load_config,
)
from .liouville import pauli_basis, singlet_triplet_basis, unitary_superop
from .stochastic import (
    STREAM_NOISE,
    analytic_psd,
    bridge_covariance,
    bridge_weights,
    sample_channels,
    sample_sum_uniform,
)

__all__ = ["main"]

_PROG = "simulate"


# ---------------------------------------------------------------------------
# Deterministic file output
# ---------------------------------------------------------------------------


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _matrix_rows(matrix: np.ndarray, labels):
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            yield (i, j, labels[i], labels[j], matrix[i, j])


# ---------------------------------------------------------------------------
# Closed-form helpers shared by the block-validation reports
# ---------------------------------------------------------------------------


def _bridge_weight_integrals(gamma: float, duration: float):
    """Integrals of the two boundary-interpolation weights over the segment."""
    ws, _ = quad(
        lambda t: bridge_weights(gamma, duration, t)[0],
        0.0, duration, epsabs=1e-13, limit=200,
    )
    we, _ = quad(
        lambda t: bridge_weights(gamma, duration, t)[1],
        0.0, duration, epsabs=1e-13, limit=200,
    )
    return ws, we


def _bridge_double_integral(params, duration: float) -> float:
    """Bridge covariance integrated over the segment square.

    Integrates the smooth ordered triangle and doubles it; the kink along
    the diagonal would otherwise defeat the adaptive quadrature.
    """
    if params.gamma == 0.0:
        return 0.0
    val, _ = dblquad(
        lambda s, t: bridge_covariance(params, duration, s, t),
        0.0, duration, 0.0, lambda t: t, epsabs=1e-13,
    )
    return 2.0 * val


def _dissipator_superop(op: np.ndarray, basis) -> np.ndarray:
    """Coefficient-space matrix of rho -> L rho L - (L^2 rho + rho L^2)/2."""
    d2 = basis.d ** 2
    mat = np.zeros((d2, d2))
    for k in range(d2):
        el = basis.elements[k]
        img = op @ el @ op - 0.5 * (op @ op @ el + el @ op @ op)
        mat[:, k] = basis.expand(img)
    return mat


def _oracle_rows(engine: np.ndarray, oracle) -> list:
    """Report rows comparing an engine superoperator with the oracle."""
    diff = np.abs(engine - oracle.matrix)
    allowed = np.maximum(3.0 * oracle.stderr, 1e-12)
    ratio = float((diff / allowed).max())
    return [
        ("oracle_paths", oracle.n_paths, "", "info"),
        ("engine_vs_oracle_max_abs_diff", float(diff.max()), "", "info"),
        ("engine_vs_oracle_over_three_sigma", ratio, 1.0, _status(ratio <= 1.0)),
    ]


def _status(ok: bool) -> str:
    return "pass" if ok else "fail"


def _raise_on_failures(rows, context: str) -> None:
    failed = [r[0] for r in rows if r[3] == "fail"]
    if failed:
        raise RuntimeError(f"{context} checks failed: {', '.join(failed)}")


# ---------------------------------------------------------------------------
# sample-noise
# ---------------------------------------------------------------------------


def cmd_sample_noise(cfg: SampleNoiseConfig, out: str, cache, workers: int) -> None:
    n_points = int(round(cfg.duration_ns / cfg.dt_ns))
    if n_points < cfg.welch_segment_length:
        raise ConfigError(
            f"duration_ns/dt_ns gives {n_points} samples; the Welch estimate "
            f"needs at least welch_segment_length = {cfg.welch_segment_length}"
        )
    comp_lists = [
        build_components(ch.components, zero_mean=False) for ch in cfg.channels
    ]

    psd_rows = []
    for ci, comps in enumerate(comp_lists):
        traces = np.empty((cfg.n_realizations, n_points))
        for r in range(cfg.n_realizations):
            rng = np.random.default_rng(
                np.random.SeedSequence(cfg.seed, spawn_key=(STREAM_NOISE, r, ci))
            )
            traces[r] = sample_sum_uniform(comps, cfg.dt_ns, n_points, 1, rng)[0]
        freqs, psd = welch_psd(
            traces, segment_length=cfg.welch_segment_length, spacing=cfg.dt_ns
        )
        f_hz = freqs * 1e9          # cycles/ns -> Hz
        mean_psd_hz = psd.mean(axis=0) * 1e-9  # amp^2 ns -> amp^2/Hz
        analytic = analytic_psd(comps, f_hz)
        name = cfg.channels[ci].operator
        psd_rows.extend(zip([name] * f_hz.size, f_hz, mean_psd_hz, analytic))
    _write_csv(
        os.path.join(out, "psd.csv"),
        ("channel", "frequency_hz", "psd", "analytic_psd"),
        psd_rows,
    )

    dump_points = min(cfg.dump_points, n_points)
    grid = np.arange(dump_points) * cfg.dt_ns
    traj = sample_channels(comp_lists, grid, cfg.seed, realization=0)
    dump_rows = []
    for ci, spec in enumerate(cfg.channels):
        values = traj.channel_values(ci)
        for ni in range(values.shape[0]):
            dump_rows.extend(
                (t, spec.operator, ni, v) for t, v in zip(grid, values[ni])
            )
    _write_csv(
        os.path.join(out, "trajectories.csv"),
        ("t_ns", "channel", "component", "value"),
        dump_rows,
    )


# ---------------------------------------------------------------------------
# single-qubit and two-qubit block reports
# ---------------------------------------------------------------------------


def cmd_single_qubit(cfg: SingleQubitConfig, out: str, cache, workers: int) -> None:
    comps = build_components(cfg.components)
    basis = pauli_basis(1)
    sz_half = np.diag([0.5, -0.5]).astype(complex)
    duration = cfg.duration_ns
    schedule = [(np.zeros((2, 2), dtype=complex), duration)]
    channel = NoiseChannel(name="b", operator=sz_half, components=comps)
    pre = precompute_segment(schedule, [channel], basis, cache_dir=cache)

    boundary = sample_channels([comps], [0.0, duration], cfg.seed).values
    gen = assemble_generator(pre, boundary)
    engine = gen.full_map().matrix

    # Closed form: the noise commutes with itself at all times, so the
    # averaged map is a z rotation by the integrated conditional mean and
    # a dephasing factor from the integrated bridge covariance.
    theta = 0.0
    var = 0.0
    for gi, params in enumerate(comps):
        ws, we = _bridge_weight_integrals(params.gamma, duration)
        theta += boundary[gi, 0] * ws + boundary[gi, 1] * we
        var += _bridge_double_integral(params, duration)
    rotation = unitary_superop(expm(-1j * theta * sz_half), basis).matrix
    damp = float(np.exp(-0.5 * var))
    closed = rotation @ np.diag([1.0, damp, damp, 1.0])
    closed_diff = float(np.abs(engine - closed).max())

    oracle = oracle_average(
        schedule, [channel], basis, boundary,
        n_paths=cfg.oracle_paths, fine_dt=cfg.fine_dt_ns, seed=cfg.seed,
    )

    rows = [
        ("drift_phase_rad", theta, "", "info"),
        ("dephasing_exponent", 0.5 * var, "", "info"),
        ("coherent_correction_max_abs", float(np.abs(pre.delta_s).max()), "", "info"),
        ("relaxation_part_max_abs", float(np.abs(pre.gamma_s).max()), "", "info"),
        (
            "engine_vs_closed_form_max_abs_diff",
            closed_diff, 1e-8, _status(closed_diff <= 1e-8),
        ),
    ]
    if all(p.gamma == 0.0 for p in comps):
        zero = float(np.abs(pre.gamma_s).max())
        rows.append(
            ("quasi_static_relaxation_exactly_zero", zero, 0.0, _status(zero == 0.0))
        )
    rows.extend(_oracle_rows(engine, oracle))

    _write_csv(
        os.path.join(out, "generators.csv"),
        ("row", "col", "row_label", "col_label", "value"),
        _matrix_rows(gen.matrix, pre.basis_labels),
    )
    _write_csv(
        os.path.join(out, "report.csv"),
        ("check", "value", "threshold", "status"),
        rows,
    )
    _raise_on_failures(rows, "single-qubit")


def cmd_two_qubit(cfg: TwoQubitConfig, out: str, cache, workers: int) -> None:
    comps = build_components(cfg.components)
    basis = singlet_triplet_basis()
    heis = exchange_operator(2, 0, 1)
    j0 = cfg.j_mhz * 2.0 * np.pi * 1e-3  # MHz -> rad/ns
    duration = cfg.duration_ns
    schedule = [(j0 * heis, duration)]
    # The channel value is the dimensionless fraction xi; the pulse
    # amplitude enters as the per-piece gain, dJ = J * xi.
    channel = NoiseChannel(
        name="dJ", operator=heis, components=comps, active=(j0,)
    )
    pre = precompute_segment(schedule, [channel], basis, cache_dir=cache)

    delta_max = float(np.abs(pre.delta_s).max())
    var = sum(_bridge_double_integral(p, duration) for p in comps)
    target = j0**2 * var * _dissipator_superop(heis, basis)
    scale = max(float(np.abs(pre.gamma_s).max()), 1e-300)
    residual = float(np.abs(pre.gamma_s - target).max()) / scale

    boundary = sample_channels([comps], [0.0, duration], cfg.seed).values
    gen = assemble_generator(pre, boundary)
    engine = gen.full_map().matrix
    oracle = oracle_average(
        schedule, [channel], basis, boundary,
        n_paths=cfg.oracle_paths, fine_dt=cfg.fine_dt_ns, seed=cfg.seed,
    )

    rows = [
        (
            "coherent_correction_max_abs",
            delta_max, 0.0, _status(delta_max == 0.0),
        ),
        (
            "dephasing_dissipator_residual",
            residual, 1e-10, _status(residual <= 1e-10),
        ),
        ("st_coherence_decay_exponent", 0.5 * j0**2 * var, "", "info"),
        ("relaxation_part_max_abs", float(np.abs(pre.gamma_s).max()), "", "info"),
    ]
    rows.extend(_oracle_rows(engine, oracle))

    _write_csv(
        os.path.join(out, "generators.csv"),
        ("row", "col", "row_label", "col_label", "value"),
        _matrix_rows(gen.matrix, pre.basis_labels),
    )
    _write_csv(
        os.path.join(out, "report.csv"),
        ("check", "value", "threshold", "status"),
        rows,
    )
    _raise_on_failures(rows, "two-qubit")


# ---------------------------------------------------------------------------
# parity and compare-coarse
# ---------------------------------------------------------------------------


def _write_aggregate(path: str, ensemble, lo: np.ndarray, hi: np.ndarray) -> None:
    mean = ensemble.mean_outcomes()
    rows = [
        (j + 1, mean[j], lo[j], hi[j]) for j in range(ensemble.n_measurements)
    ]
    _write_csv(path, ("round", "mean_outcome", "bootstrap_lo", "bootstrap_hi"), rows)


def cmd_parity(cfg: ParityConfig, out: str, cache, workers: int) -> None:
    if cfg.n_realizations < 30:
        raise ConfigError(
            "the bootstrap interval needs n_realizations >= 30"
        )
    chain = cfg.chain.build()
    noise = cfg.noise.build()
    ensemble = run_parity_ensemble(
        chain, noise, cfg.rounds, cfg.n_realizations,
        coarse_ns=cfg.coarse_ns, seed=cfg.seed, workers=workers,
        cache_dir=cache, variant=cfg.variant,
    )
    print(f"{_PROG}: parity propagation took {ensemble.wall_seconds:.2f} s")

    real_dir = os.path.join(out, "realizations")
    os.makedirs(real_dir, exist_ok=True)
    for r in range(ensemble.n_realizations):
        _write_csv(
            os.path.join(real_dir, f"realization_{r:04d}.csv"),
            ("round", "outcome", "parity_expectation"),
            (
                (j + 1, ensemble.outcomes[r, j], ensemble.parity_expectations[r, j])
                for j in range(cfg.rounds)
            ),
        )

    lo, hi = bootstrap_ci(
        ensemble.outcomes.astype(float),
        n_resamples=cfg.bootstrap_resamples,
        seed=cfg.seed,
    )
    _write_aggregate(os.path.join(out, "aggregate.csv"), ensemble, lo, hi)

    if cfg.rounds >= 10:
        fit = fit_saturation(ensemble.mean_outcomes())
        _write_csv(
            os.path.join(out, "saturation_fit.csv"),
            ("param", "estimate", "stderr"),
            [
                (name, fit.value(name), fit.error(name))
                for name in fit.names
            ],
        )

    if cfg.rounds >= cfg.welch_segment_length:
        flips = parity_flip_series(ensemble.outcomes).astype(float)
        freqs, psd = welch_psd(flips, segment_length=cfg.welch_segment_length)
        lo, hi = bootstrap_ci(
            psd, n_resamples=cfg.bootstrap_resamples, seed=cfg.seed
        )
        reference = bernoulli_reference(
            cfg.bernoulli_q, cfg.rounds, cfg.n_realizations, seed=cfg.seed
        )
        ref_flips = parity_flip_series(reference.outcomes).astype(float)
        _, ref_psd = welch_psd(ref_flips, segment_length=cfg.welch_segment_length)
        _write_csv(
            os.path.join(out, "flip_psd.csv"),
            ("frequency_per_round", "psd", "ci_lo", "ci_hi", "bernoulli_psd"),
            zip(freqs, psd.mean(axis=0), lo, hi, ref_psd.mean(axis=0)),
        )


def cmd_compare_coarse(cfg: CompareCoarseConfig, out: str, cache, workers: int) -> None:
    if cfg.n_realizations < 30:
        raise ConfigError(
            "the bootstrap interval needs n_realizations >= 30"
        )
    chain = cfg.chain.build()
    noise = cfg.noise.build()
    results = []
    for scale in cfg.coarse_scales_ns:
        ensemble = run_parity_ensemble(
            chain, noise, cfg.rounds, cfg.n_realizations,
            coarse_ns=scale, seed=cfg.seed, workers=workers, cache_dir=cache,
        )
        lo, hi = bootstrap_ci(
            ensemble.outcomes.astype(float),
            n_resamples=cfg.bootstrap_resamples,
            seed=cfg.seed,
        )
        _write_aggregate(
            os.path.join(out, f"aggregate_{scale:g}ns.csv"), ensemble, lo, hi
        )
        print(
            f"{_PROG}: coarse scale {scale:g} ns propagated in "
            f"{ensemble.wall_seconds:.2f} s"
        )
        results.append((scale, ensemble.mean_outcomes(), lo, hi))

    (sa, mean_a, lo_a, hi_a), (sb, mean_b, lo_b, hi_b) = results
    header = (
        "round",
        f"mean_{sa:g}ns", f"lo_{sa:g}ns", f"hi_{sa:g}ns",
        f"mean_{sb:g}ns", f"lo_{sb:g}ns", f"hi_{sb:g}ns",
        "intervals_overlap",
    )
    rows = [
        (
            j + 1,
            mean_a[j], lo_a[j], hi_a[j],
            mean_b[j], lo_b[j], hi_b[j],
            int(not (hi_a[j] < lo_b[j] or hi_b[j] < lo_a[j])),
        )
        for j in range(cfg.rounds)
    ]
    _write_csv(os.path.join(out, "comparison.csv"), header, rows)


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def cmd_calibrate(cfg: CalibrateConfig, out: str, cache, workers: int) -> None:
    noise = cfg.noise.build()
    optional = {
        key: value
        for key, value in (
            ("n_points", cfg.n_points),
            ("dt_ns", cfg.dt_ns),
            ("field_mtesla", cfg.field_mtesla),
        )
        if value is not None
    }
    if cfg.experiment == "free_induction":
        times, probs = free_induction_curve(
            noise, n_trajectories=cfg.n_trajectories, seed=cfg.seed,
            cache_dir=cache, **optional,
        )
        fit = fit_t2star(times, probs.mean(axis=0))
        static_comps = noise.magnetic
    else:
        times, probs = exchange_decay_curve(
            noise, j_mhz=cfg.j_mhz, n_trajectories=cfg.n_trajectories,
            seed=cfg.seed, cache_dir=cache, **optional,
        )
        fit = fit_t2star(
            times, probs.mean(axis=0), model="exchange",
            exchange_freq_ghz=cfg.j_mhz * 1e-3,
        )
        static_comps = noise.exchange

    mean = probs.mean(axis=0)
    _write_csv(
        os.path.join(out, "curve.csv"),
        ("time_ns", "mean_probability"),
        zip(times, mean),
    )

    rows = [(name, fit.value(name), fit.error(name)) for name in fit.names]
    if static_comps and all(p.gamma == 0.0 for p in static_comps):
        var = sum(p.stationary_var for p in static_comps)
        if cfg.experiment == "free_induction":
            # variance of the pair's z-difference rate is twice the
            # per-spin variance: T2* = sqrt(2 / (2 var)) = 1 / sqrt(var)
            analytic = 1.0 / np.sqrt(var)
        else:
            omega = 2.0 * np.pi * cfg.j_mhz * 1e-3
            analytic = np.sqrt(2.0 / (omega**2 * var))
        rows.append(("t2star_analytic_quasi_static", float(analytic), 0.0))
    _write_csv(os.path.join(out, "fit.csv"), ("param", "estimate", "stderr"), rows)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

_COMMANDS = {
    "sample-noise": (SampleNoiseConfig, cmd_sample_noise, "n_realizations"),
    "single-qubit": (SingleQubitConfig, cmd_single_qubit, "oracle_paths"),
    "two-qubit": (TwoQubitConfig, cmd_two_qubit, "oracle_paths"),
    "parity": (ParityConfig, cmd_parity, "n_realizations"),
    "calibrate": (CalibrateConfig, cmd_calibrate, "n_trajectories"),
    "compare-coarse": (CompareCoarseConfig, cmd_compare_coarse, "n_realizations"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=_PROG,
        description="Coarse-grained spin-noise simulation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--trajectories", type=int, default=None,
                        help="override the config trajectory/realization count")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--cache", default=None,
                        help="precompute cache directory (created if missing)")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: all cores)")
    return parser


def _error(kind: str, exc: BaseException) -> int:
    message = " ".join(str(exc).split())
    line = json.dumps({"kind": kind, "message": message})
    print(f"{_PROG}: error {line}", file=sys.stderr)
    return 2 if kind == "config" else 3


def main(argv: Optional[list] = None) -> int:
    args = _build_parser().parse_args(argv)
    model, handler, traj_field = _COMMANDS[args.command]
    try:
        cfg = load_config(args.config, model)
        updates = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.trajectories is not None:
            if args.trajectories < 1:
                raise ConfigError("--trajectories must be at least 1")
            updates[traj_field] = args.trajectories
        if updates:
            cfg = cfg.model_copy(update=updates)
        workers = args.workers if args.workers is not None else os.cpu_count() or 1
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        out = os.path.abspath(args.out)
        os.makedirs(out, exist_ok=True)
        cache = None
        if args.cache is not None:
            cache = os.path.abspath(args.cache)
            os.makedirs(cache, exist_ok=True)
    except ConfigError as exc:
        return _error("config", exc)

    try:
        handler(cfg, out, cache, workers)
    except (ConfigError, ValueError) as exc:
        return _error("config", exc)
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _error("numerical", exc)
    print(f"{_PROG}: ok " + json.dumps({"command": args.command, "out": out}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
