import io
import json

import numpy as np
import pytest

from heralding import __version__
from heralding.cli import main
from heralding.sim import Channel, read_streams

S = 1_000_000_000_000


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def report(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return json.loads(out)


def test_simulate_reference_rates(tmp_path, capsys):
    out = tmp_path / "ref.csv"
    code, _, err = run(capsys, "simulate", "--pair_rate_hz", 57200, "--eta_signal", 0.822,
                       "--eta_herald", 0.115, "--duration_ps", 100 * S, "--out", out)
    assert code == 0, err
    streams = read_streams(out)
    sig, her = streams[Channel.SIGNAL], streams[Channel.HERALD]
    assert sig.duration_ps == 100 * S
    assert np.isclose(sig.rate_hz, 46_855, rtol=3e-3)
    assert np.isclose(her.rate_hz, 6_525, rtol=3e-3)
    meta = json.loads((tmp_path / "ref.csv.meta.json").read_text())
    assert meta["version"] == __version__
    assert meta["source_model"]["pair_rate_hz"] == 57200


def test_simulate_is_byte_identical(tmp_path, capsys):
    args = ["simulate", "--duration_ps", S // 10, "--rng_seed", 9,
            "--jitter_fwhm_signal_ps", 100_000, "--background_rate_signal_hz", 5000]
    assert run(capsys, *args, "--out", tmp_path / "a.csv")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b.csv")[0] == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert ((tmp_path / "a.csv.meta.json").read_bytes()
            == (tmp_path / "b.csv.meta.json").read_bytes())
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "a.csv", "a.csv.meta.json", "b.csv", "b.csv.meta.json"]


def test_simulate_rejects_zero_duration(capsys):
    code, _, err = run(capsys, "simulate", "--duration_ps", 0)
    assert code == 2
    assert "duration_ps" in err


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"pair_rate_hz": 1000.0, "duration_ps": S // 10,
                               "eta_signal": 1.0}))
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--eta_signal", 0.5)
    assert code == 0
    n = out.count("\n1,")
    assert 30 < n < 70  # 1000/s * 0.1 s * 0.5
    cfg.write_text(json.dumps({"no_such_field": 1}))
    assert run(capsys, "simulate", "--config", cfg)[0] == 2


def test_count_from_stdin(tmp_path, capsys, monkeypatch):
    code, csv_text, _ = run(capsys, "simulate", "--duration_ps", S, "--rng_seed", 2)
    assert code == 0
    monkeypatch.setattr("sys.stdin", io.StringIO(csv_text))
    rep = report(capsys, "count", "--input", "-", "--duration_ps", S)
    assert rep["command"] == "count" and rep["version"] == __version__
    assert rep["config"]["pulse_len_herald_ps"] == 1_000_000
    assert abs(rep["coincidences_hz"] - 5_418.8) < 5 * np.sqrt(5_418.8)
    assert np.isclose(rep["heralding_ratio"],
                      rep["coincidences_hz"] / rep["singles_herald_hz"])


def test_scan_delay_with_fit(tmp_path, capsys):
    out = tmp_path / "j.csv"
    assert run(capsys, "simulate", "--pair_rate_hz", 20000, "--eta_signal", 1, "--eta_herald", 1,
               "--duration_ps", S // 5, "--jitter_fwhm_signal_ps", 100_000,
               "--jitter_fwhm_herald_ps", 118_000, "--out", out)[0] == 0
    rep = report(capsys, "scan-delay", "--input", out, "--pulse_len_signal_ps", 10_000,
                 "--pulse_len_herald_ps", 10_000, "--delay_min_ps", -500_000,
                 "--delay_max_ps", 500_000, "--fit")
    assert len(rep["delays_ps"]) == 101
    assert abs(rep["fit"]["center_ps"]) < 10_000
    assert np.isclose(rep["fit"]["fwhm_ps"], 155_000, rtol=0.05)


def test_correct_reference_rates(tmp_path, capsys):
    rates = tmp_path / "rates.json"
    rates.write_text(json.dumps({"s1_hz": 46855.2, "s2_hz": 6525.0, "cc_hz": 5418.8,
                                 "duration_s": 100, "tau_w_ps": 1_050_000,
                                 "tau_max_ps": 1_000_000, "tau_d1_ps": 50_000,
                                 "tau_d2_ps": 1_000_000}))
    rep = report(capsys, "correct", "--input", rates)
    assert 0.817 <= rep["eta_signal"] <= 0.823
    assert rep["config"]["s1_hz"] == 46855.2
    assert np.isclose(rep["raw_eta_signal"], 0.8305, atol=1e-4)


def test_correct_zero_windows_give_raw_ratios(capsys):
    rep = report(capsys, "correct", "--tau_w_ps", 0, "--tau_max_ps", 0, "--tau_d1_ps", 0,
                 "--tau_d2_ps", 0)
    assert np.isclose(rep["eta_signal"], 5418.8 / 6525.0, rtol=1e-12)
    assert np.isclose(rep["eta_herald"], 5418.8 / 46855.2, rtol=1e-12)


def test_correct_error_exit_codes(tmp_path, capsys):
    assert run(capsys, "correct", "--cc_hz", 7000)[0] == 2
    assert run(capsys, "correct", "--s1_hz", 1e5, "--s2_hz", 1e5, "--cc_hz", 9.99e4)[0] == 3
    assert run(capsys, "correct", "--input", tmp_path / "missing.json")[0] == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "correct", "--input", bad)[0] == 2


def test_correct_montecarlo_mode(capsys):
    jac = report(capsys, "correct", "--error_model", "nested")
    mc = report(capsys, "correct", "--error_model", "nested", "--mode", "montecarlo",
                "--n_draws", 4000, "--seed", 3)
    assert np.isclose(jac["sigma_eta_signal"], mc["sigma_eta_signal"], rtol=0.1)


def test_count_missing_file(capsys):
    code, _, err = run(capsys, "count", "--input", "/nonexistent/x.csv")
    assert code == 4
    assert "I/O" in err


def test_discriminate_demo_and_saved_waveform(tmp_path, capsys):
    wf = tmp_path / "demo.bin"
    for (thr, dead), expected in (((0.7, 4_000_000), 3), ((0.4, 1_300_000), 5),
                                  ((0.15, 4_000_000), 4)):
        code, out, _ = run(capsys, "discriminate", "--demo", "--write_waveform", wf,
                           "--threshold", thr, "--rearm_dead_ps", dead)
        assert code == 0
        assert out.splitlines()[0] == "channel,time_ps"
        assert len(out.splitlines()) - 1 == expected
    code, out, _ = run(capsys, "discriminate", "--input", wf, "--threshold", 0.15,
                       "--rearm_dead_ps", 4_000_000, "--channel", "herald")
    assert code == 0
    assert [ln.split(",")[0] for ln in out.splitlines()[1:]] == ["2"] * 4


def test_phd_report(capsys):
    rep = report(capsys, "phd", "--demo", "--bins", 12, "--range_min", 0, "--range_max", 1.2)
    assert len(rep["bin_edges"]) == 13 and len(rep["counts"]) == 12
    assert sum(rep["counts"]) == rep["n_pulses"]


def test_chsh_report(capsys):
    rep = report(capsys, "chsh")
    assert np.isclose(rep["S_model"], 2.510, atol=1e-3)
    assert rep["sigmas_above_classical"] > 25
    assert rep["config"]["visibility"] == 0.8874


def test_pipeline_report(capsys):
    rep = report(capsys, "pipeline", "--duration_ps", 5 * S, "--n_seeds", 2)
    assert len(rep["runs"]) == 2
    assert rep["n_failed"] == 0
    assert set(rep["z_summary"]) == {"pair_rate", "eta_signal", "eta_herald"}


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--pair_rate_hz", "fast"])
    assert exc.value.code == 2
    assert run(capsys, "count")[0] == 2
    assert run(capsys, "discriminate")[0] == 2
