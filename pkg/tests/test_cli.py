"""End-to-end tests of the ``simulate`` command line interface.

Every test drives :func:`bridgesim.cli.main` in process with a real JSON
config file and inspects exit codes, diagnostics, and the CSV files left
in the output directory.  Heavy physics is kept to the module tests; the
configurations here are deliberately small.
"""

import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from bridgesim import config as config_mod
from bridgesim.cli import main
from bridgesim.config import noise_block

REPO_ROOT = Path(__file__).resolve().parents[1]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _write_config(directory, payload, name="config.json"):
    path = os.path.join(directory, name)
    with open(path, "w") as fh:
        json.dump(payload, fh)
    return path


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _column(header, rows, name, cast=float):
    idx = header.index(name)
    return [cast(r[idx]) for r in rows]


def _tree_bytes(root):
    """Map of relative path -> file bytes for a whole output directory."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for fname in files:
            path = os.path.join(dirpath, fname)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def _last_stderr_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return err[-1] if err else ""


QS_NOISE = noise_block("quasi_static")

SAMPLE_NOISE_CFG = {
    "channels": [
        {
            "operator": "b_z",
            "components": [{"gamma_rad_per_ns": 0.05, "sigma_sq": 2.5e-4}],
        },
        {"operator": "dJ", "components": {"quasi_static": {"p": 1e-5}}},
    ],
    "duration_ns": 2000.0,
    "dt_ns": 10.0,
    "n_realizations": 3,
    "welch_segment_length": 16,
    "dump_points": 40,
}


@pytest.fixture(scope="module")
def cache_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("cli-cache"))


# ---------------------------------------------------------------------------
# configuration errors and diagnostics
# ---------------------------------------------------------------------------


def test_published_schema_matches_models():
    models = {
        "sample-noise": config_mod.SampleNoiseConfig,
        "single-qubit": config_mod.SingleQubitConfig,
        "two-qubit": config_mod.TwoQubitConfig,
        "parity": config_mod.ParityConfig,
        "calibrate": config_mod.CalibrateConfig,
        "compare-coarse": config_mod.CompareCoarseConfig,
    }
    with open(REPO_ROOT / "docs" / "config_schema.json") as fh:
        published = json.load(fh)
    assert published == {
        name: model.model_json_schema() for name, model in models.items()
    }


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"oracle_paths": 10, "bogus_key": 1})
    rc = main(["single-qubit", "--config", cfg, "--out", str(tmp_path / "out")])
    assert rc == 2
    line = _last_stderr_line(capsys)
    assert "bogus_key" in line


def test_invalid_json_rejected(tmp_path, capsys):
    cfg = os.path.join(tmp_path, "broken.json")
    with open(cfg, "w") as fh:
        fh.write("{not json")
    rc = main(["single-qubit", "--config", cfg, "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "not valid JSON" in _last_stderr_line(capsys)


def test_missing_config_file(tmp_path, capsys):
    rc = main([
        "single-qubit",
        "--config", str(tmp_path / "nope.json"),
        "--out", str(tmp_path / "out"),
    ])
    assert rc == 2
    assert "cannot read config file" in _last_stderr_line(capsys)


def test_out_of_range_value_rejected(tmp_path):
    cfg = _write_config(tmp_path, {"duration_ns": -4.0})
    rc = main(["single-qubit", "--config", cfg, "--out", str(tmp_path / "out")])
    assert rc == 2


def test_error_line_is_machine_parsable(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"oracle_paths": 10, "bogus_key": 1})
    main(["single-qubit", "--config", cfg, "--out", str(tmp_path / "out")])
    line = _last_stderr_line(capsys)
    prefix = "simulate: error "
    assert line.startswith(prefix)
    payload = json.loads(line[len(prefix):])
    assert payload["kind"] == "config"
    assert "\n" not in payload["message"]


def test_trajectories_override_must_be_positive(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"oracle_paths": 10})
    rc = main([
        "single-qubit", "--config", cfg, "--out", str(tmp_path / "out"),
        "--trajectories", "0",
    ])
    assert rc == 2
    assert "--trajectories" in _last_stderr_line(capsys)


def test_workers_flag_must_be_positive(tmp_path):
    cfg = _write_config(tmp_path, SAMPLE_NOISE_CFG)
    rc = main([
        "sample-noise", "--config", cfg, "--out", str(tmp_path / "out"),
        "--workers", "0",
    ])
    assert rc == 2


# ---------------------------------------------------------------------------
# sample-noise
# ---------------------------------------------------------------------------


def test_sample_noise_outputs(tmp_path, capsys):
    cfg = _write_config(tmp_path, SAMPLE_NOISE_CFG)
    out = str(tmp_path / "out")
    rc = main(["sample-noise", "--config", cfg, "--out", out])
    assert rc == 0
    assert capsys.readouterr().out.strip().endswith("}")

    header, rows = _read_csv(os.path.join(out, "psd.csv"))
    assert header == ["channel", "frequency_hz", "psd", "analytic_psd"]
    channels = {r[0] for r in rows}
    assert channels == {"b_z", "dJ"}
    psd = np.array(_column(header, rows, "psd"))
    assert np.all(np.isfinite(psd)) and np.all(psd >= 0.0)

    header, rows = _read_csv(os.path.join(out, "trajectories.csv"))
    assert header == ["t_ns", "channel", "component", "value"]
    t = np.array(_column(header, rows, "t_ns"))
    # two channels with one component each, capped at dump_points grid points
    assert len(rows) == 2 * SAMPLE_NOISE_CFG["dump_points"]
    assert t.max() == (SAMPLE_NOISE_CFG["dump_points"] - 1) * 10.0
    qs_vals = [
        float(r[3]) for r in rows if r[1] == "dJ"
    ]
    # a frozen component is constant along the trace
    assert np.ptp(qs_vals) == 0.0


def test_sample_noise_deterministic(tmp_path):
    cfg = _write_config(tmp_path, SAMPLE_NOISE_CFG)
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["sample-noise", "--config", cfg, "--out", out1]) == 0
    assert main(["sample-noise", "--config", cfg, "--out", out2]) == 0
    assert _tree_bytes(out1) == _tree_bytes(out2)


def test_sample_noise_too_short_for_welch(tmp_path, capsys):
    payload = dict(SAMPLE_NOISE_CFG, duration_ns=100.0, dt_ns=10.0)
    cfg = _write_config(tmp_path, payload)
    rc = main(["sample-noise", "--config", cfg, "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "welch_segment_length" in _last_stderr_line(capsys)


# ---------------------------------------------------------------------------
# single-qubit and two-qubit validation reports
# ---------------------------------------------------------------------------


def test_single_qubit_report_passes(tmp_path):
    cfg = _write_config(tmp_path, {"oracle_paths": 800, "fine_dt_ns": 0.1})
    out = str(tmp_path / "out")
    rc = main(["single-qubit", "--config", cfg, "--out", out])
    assert rc == 0

    header, rows = _read_csv(os.path.join(out, "report.csv"))
    assert header == ["check", "value", "threshold", "status"]
    status = {r[0]: r[3] for r in rows}
    assert status["engine_vs_closed_form_max_abs_diff"] == "pass"
    assert status["engine_vs_oracle_over_three_sigma"] == "pass"

    header, rows = _read_csv(os.path.join(out, "generators.csv"))
    assert header == ["row", "col", "row_label", "col_label", "value"]
    assert len(rows) == 16  # 4x4 single-qubit superoperator
    labels = {r[2] for r in rows}
    assert labels == {"I", "X", "Y", "Z"}


def test_single_qubit_starved_oracle_exits_numerical(tmp_path, capsys):
    # two Monte Carlo paths cannot certify the propagator: the three-sigma
    # check fails and the command reports a numerical failure, but the
    # report is still written for inspection
    cfg = _write_config(tmp_path, {"oracle_paths": 2, "fine_dt_ns": 0.2})
    out = str(tmp_path / "out")
    rc = main(["single-qubit", "--config", cfg, "--out", out])
    assert rc == 3
    line = _last_stderr_line(capsys)
    payload = json.loads(line[len("simulate: error "):])
    assert payload["kind"] == "numerical"
    _, rows = _read_csv(os.path.join(out, "report.csv"))
    assert any(r[3] == "fail" for r in rows)


def test_two_qubit_report_passes(tmp_path):
    cfg = _write_config(tmp_path, {"oracle_paths": 400, "fine_dt_ns": 0.1})
    out = str(tmp_path / "out")
    rc = main(["two-qubit", "--config", cfg, "--out", out])
    assert rc == 0

    header, rows = _read_csv(os.path.join(out, "report.csv"))
    status = {r[0]: r[3] for r in rows}
    value = {r[0]: r[1] for r in rows}
    assert status["coherent_correction_max_abs"] == "pass"
    assert float(value["coherent_correction_max_abs"]) == 0.0
    assert status["dephasing_dissipator_residual"] == "pass"
    assert status["engine_vs_oracle_over_three_sigma"] == "pass"

    _, rows = _read_csv(os.path.join(out, "generators.csv"))
    assert len(rows) == 256  # 16x16 two-qubit superoperator


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def test_calibrate_free_induction_quasi_static(tmp_path, cache_dir):
    cfg = _write_config(tmp_path, {
        "experiment": "free_induction",
        "noise": QS_NOISE,
        "n_trajectories": 20,
    })
    out = str(tmp_path / "out")
    rc = main([
        "calibrate", "--config", cfg, "--out", out, "--cache", cache_dir,
    ])
    assert rc == 0

    header, rows = _read_csv(os.path.join(out, "curve.csv"))
    assert header == ["time_ns", "mean_probability"]
    probs = np.array(_column(header, rows, "mean_probability"))
    assert probs[0] == pytest.approx(1.0, abs=1e-9)
    assert np.all((probs > -1e-9) & (probs < 1 + 1e-9))

    header, rows = _read_csv(os.path.join(out, "fit.csv"))
    fits = {r[0]: float(r[1]) for r in rows}
    assert fits["t2star_analytic_quasi_static"] == pytest.approx(3500.0, rel=1e-3)
    assert fits["t2star"] == pytest.approx(fits["t2star_analytic_quasi_static"],
                                           rel=0.15)
    assert 1.5 < fits["b"] < 2.5


def test_calibrate_window_too_short_rejected(tmp_path, cache_dir, capsys):
    cfg = _write_config(tmp_path, {
        "experiment": "free_induction",
        "noise": QS_NOISE,
        "n_points": 20,
        "n_trajectories": 10,
    })
    rc = main([
        "calibrate", "--config", cfg, "--out", str(tmp_path / "out"),
        "--cache", cache_dir,
    ])
    assert rc == 2
    assert "decay" in _last_stderr_line(capsys)


# ---------------------------------------------------------------------------
# parity
# ---------------------------------------------------------------------------


def test_parity_outputs(tmp_path, cache_dir):
    cfg = _write_config(tmp_path, {
        "noise": QS_NOISE,
        "rounds": 12,
        "n_realizations": 30,
        "bootstrap_resamples": 100,
    })
    out = str(tmp_path / "out")
    rc = main([
        "parity", "--config", cfg, "--out", out, "--cache", cache_dir,
        "--workers", "2",
    ])
    assert rc == 0

    header, rows = _read_csv(os.path.join(out, "aggregate.csv"))
    assert header == ["round", "mean_outcome", "bootstrap_lo", "bootstrap_hi"]
    assert len(rows) == 12
    assert _column(header, rows, "round", int) == list(range(1, 13))
    mean = np.array(_column(header, rows, "mean_outcome"))
    lo = np.array(_column(header, rows, "bootstrap_lo"))
    hi = np.array(_column(header, rows, "bootstrap_hi"))
    assert np.all(lo <= mean + 1e-12) and np.all(mean <= hi + 1e-12)

    files = sorted(os.listdir(os.path.join(out, "realizations")))
    assert len(files) == 30
    assert files[0] == "realization_0000.csv"
    header, rows = _read_csv(os.path.join(out, "realizations", files[0]))
    assert header == ["round", "outcome", "parity_expectation"]
    assert len(rows) == 12
    assert set(_column(header, rows, "outcome", int)) <= {0, 1}

    # 12 rounds: saturation fit written, flip PSD skipped (needs a full
    # Welch segment of 30 rounds)
    assert os.path.exists(os.path.join(out, "saturation_fit.csv"))
    assert not os.path.exists(os.path.join(out, "flip_psd.csv"))


def test_parity_flip_psd_written(tmp_path, cache_dir):
    cfg = _write_config(tmp_path, {
        "noise": QS_NOISE,
        "rounds": 32,
        "n_realizations": 30,
        "welch_segment_length": 16,
        "bootstrap_resamples": 100,
    })
    out = str(tmp_path / "out")
    rc = main(["parity", "--config", cfg, "--out", out, "--cache", cache_dir])
    assert rc == 0
    header, rows = _read_csv(os.path.join(out, "flip_psd.csv"))
    assert header == [
        "frequency_per_round", "psd", "ci_lo", "ci_hi", "bernoulli_psd",
    ]
    assert len(rows) == 16 // 2 + 1
    freqs = np.array(_column(header, rows, "frequency_per_round"))
    assert freqs[0] == 0.0 and freqs[-1] == pytest.approx(0.5)
    lo = np.array(_column(header, rows, "ci_lo"))
    hi = np.array(_column(header, rows, "ci_hi"))
    assert np.all(lo <= hi)


def test_parity_too_few_realizations_rejected(tmp_path, cache_dir, capsys):
    cfg = _write_config(tmp_path, {
        "noise": QS_NOISE, "rounds": 12, "n_realizations": 4,
    })
    out = str(tmp_path / "out")
    rc = main(["parity", "--config", cfg, "--out", out, "--cache", cache_dir])
    assert rc == 2
    assert "n_realizations" in _last_stderr_line(capsys)
    # rejected before any propagation: no data files written
    assert not os.path.exists(os.path.join(out, "aggregate.csv"))
    assert not os.path.exists(os.path.join(out, "realizations"))


def test_parity_instant_cnot_all_zero(tmp_path, cache_dir):
    cfg = _write_config(tmp_path, {
        "noise": QS_NOISE,
        "rounds": 10,
        "n_realizations": 30,
        "variant": "instant_cnot",
        "bootstrap_resamples": 100,
    })
    out = str(tmp_path / "out")
    rc = main(["parity", "--config", cfg, "--out", out, "--cache", cache_dir])
    assert rc == 0
    header, rows = _read_csv(os.path.join(out, "aggregate.csv"))
    assert _column(header, rows, "mean_outcome") == [0.0] * 10


def test_parity_cache_and_worker_invariance(tmp_path, cache_dir):
    payload = {
        "noise": QS_NOISE,
        "rounds": 8,
        "n_realizations": 30,
        "bootstrap_resamples": 100,
    }
    cfg = _write_config(tmp_path, payload)
    fresh_cache = str(tmp_path / "fresh-cache")

    outs = {
        "cold": ["--cache", fresh_cache, "--workers", "2"],
        "warm": ["--cache", fresh_cache, "--workers", "2"],
        "one-worker": ["--cache", fresh_cache, "--workers", "1"],
        "no-cache": [],
    }
    trees = {}
    for label, extra in outs.items():
        out = str(tmp_path / label)
        assert main(["parity", "--config", cfg, "--out", out] + extra) == 0
        trees[label] = _tree_bytes(out)
    assert trees["cold"] == trees["warm"]
    assert trees["cold"] == trees["one-worker"]
    assert trees["cold"] == trees["no-cache"]


def test_parity_seed_override(tmp_path, cache_dir):
    cfg = _write_config(tmp_path, {
        "noise": QS_NOISE,
        "rounds": 8,
        "n_realizations": 30,
        "bootstrap_resamples": 100,
    })
    runs = {}
    for label, extra in {
        "default": [], "s7": ["--seed", "7"], "s7b": ["--seed", "7"],
    }.items():
        out = str(tmp_path / label)
        rc = main(
            ["parity", "--config", cfg, "--out", out, "--cache", cache_dir]
            + extra
        )
        assert rc == 0
        runs[label] = _tree_bytes(out)
    assert runs["s7"] == runs["s7b"]
    assert runs["s7"] != runs["default"]


# ---------------------------------------------------------------------------
# compare-coarse
# ---------------------------------------------------------------------------


def test_compare_coarse_outputs(tmp_path, cache_dir):
    cfg = _write_config(tmp_path, {
        "noise": QS_NOISE,
        "rounds": 5,
        "n_realizations": 30,
        "bootstrap_resamples": 100,
    })
    out = str(tmp_path / "out")
    rc = main([
        "compare-coarse", "--config", cfg, "--out", out, "--cache", cache_dir,
    ])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "aggregate_40ns.csv"))
    assert os.path.exists(os.path.join(out, "aggregate_120ns.csv"))

    header, rows = _read_csv(os.path.join(out, "comparison.csv"))
    assert header == [
        "round",
        "mean_40ns", "lo_40ns", "hi_40ns",
        "mean_120ns", "lo_120ns", "hi_120ns",
        "intervals_overlap",
    ]
    assert len(rows) == 5
    # frozen noise is insensitive to the coarse scale: identical means
    mean_a = _column(header, rows, "mean_40ns")
    mean_b = _column(header, rows, "mean_120ns")
    assert mean_a == mean_b
    assert _column(header, rows, "intervals_overlap", int) == [1] * 5
