import json
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sigprop.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from sigprop.errors import ConfigError
from sigprop.harness import OUT_ENV, ExperimentConfig, default_out_dir, load_config, parse_config_text, run
from sigprop.io import format_value, read_csv, read_tokens_csv, write_csv, write_tokens_csv

SMALL_SIM = ["--set", "d=16", "--set", "n=4", "--set", "blocks=3", "--set", "n_probes=2", "--set", "n_seeds=2"]


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestIo:
    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_float_roundtrip(self, x):
        assert float(format_value(x)) == x

    def test_special_values(self):
        assert [format_value(v) for v in (math.nan, math.inf, -math.inf, True, np.int64(3), "a")] == \
            ["nan", "inf", "-inf", "true", "3", "a"]
        assert format_value(0.1) == "0.10000000000000001"

    def test_csv_roundtrip(self, tmp_path):
        path = write_csv(tmp_path / "a" / "x.csv", ("k", "v"), [(1, 0.5), (2, math.nan)])
        assert read_csv(path) == (["k", "v"], [["1", "0.5"], ["2", "nan"]])
        with pytest.raises(ValueError):
            write_csv(tmp_path / "y.csv", ("k",), [(1, 2)])

    def test_tokens_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((3, 5))
        np.testing.assert_array_equal(read_tokens_csv(write_tokens_csv(tmp_path / "t.csv", x)), x)
        assert read_csv(tmp_path / "t.csv")[0] == ["x0", "x1", "x2", "x3", "x4"]


class TestConfig:
    def test_parse_text(self):
        vals = parse_config_text("# comment\nmode = theory\nsigma_21 = 0.5, 0.6  # inline\n\n")
        assert vals == {"mode": "theory", "sigma_21": "0.5, 0.6"}
        with pytest.raises(ConfigError):
            parse_config_text("nonsense")

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("blocks = 5\nseed = 1\nnorm = erf\n")
        cfg = load_config(path, ["blocks=7"], seed=9)
        assert cfg.blocks == (7,) and cfg.seed == 9 and cfg.norm == "erf"

    def test_lists_and_types(self):
        cfg = load_config(None, ["sigma_21=0.1,0.2", "extended=yes", "context_n=16", "d=32.0"])
        assert cfg.sigma_21 == (0.1, 0.2) and cfg.extended is True and cfg.d == 32
        assert len(list(cfg.grid())) == 2

    @pytest.mark.parametrize("item", ["bogus=1", "blocks=0", "p0=2", "d=2.5", "extended=maybe", "norm=gelu",
                                      "heads=3", "extended=true", "alpha=-1", "probe=uniform", "n=1", "novalue"])
    def test_rejects(self, item):
        with pytest.raises(ConfigError):
            load_config(None, [item])

    def test_text_roundtrip(self):
        cfg = load_config(None, ["sigma_21=0.1,0.123456789012", "final_norm=true", "context_n=64"])
        again = ExperimentConfig.from_mapping(parse_config_text(cfg.to_text()))
        assert again.to_text() == cfg.to_text()
        assert again.sigma_21 == cfg.sigma_21

    def test_default_out_dir(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
        assert default_out_dir() == tmp_path / "env"
        monkeypatch.delenv(OUT_ENV)
        assert str(default_out_dir()) == "sigprop_out"


class TestRun:
    def test_theory_outputs(self, tmp_path):
        data = run(load_config(None, ["blocks=4"]), tmp_path)
        assert data["status"] == "complete"
        assert set(data["files"]) == {"trajectory.csv", "apjn.csv", "config.txt"}
        header, rows = read_csv(tmp_path / "apjn.csv")
        assert header[0] == "block" and [r[0] for r in rows] == ["1", "2", "3", "4"]
        assert _manifest(tmp_path) == data

    def test_failure_marks_manifest(self, tmp_path):
        from sigprop.errors import NoInteriorRootError
        with pytest.raises(NoInteriorRootError):
            run(load_config(None, ["mode=asymptotics", "norm=erf", "sigma_21=0"]), tmp_path)
        m = _manifest(tmp_path)
        assert m["status"] == "failed" and "NoInteriorRootError" in m["error"]

    def test_phase_map_records_missing_roots(self, tmp_path):
        run(load_config(None, ["mode=asymptotics", "norm=erf", "sigma_21=0,0.6", "alpha=0.5,1"]), tmp_path)
        _, rows = read_csv(tmp_path / "phase_map.csv")
        assert len(rows) == 4 and sum(r[3] == "no_interior_root" for r in rows) == 2

    def test_compare(self, tmp_path):
        cfg = load_config(None, ["mode=compare", "d=16", "n=4", "blocks=6", "n_probes=2", "n_seeds=2"])
        data = run(cfg, tmp_path)
        header, rows = read_csv(tmp_path / "compare.csv")
        assert header == ["block", "j_theory_forward", "j_theory_backward", "j_measured", "std_error", "fold",
                          "telescoping_check"]
        assert all(float(r[6]) == pytest.approx(1.0) for r in rows)
        assert set(data["summary"]["gmfe"]) == {"early", "middle", "deep"}

    def test_tokens_file(self, tmp_path):
        x = np.random.default_rng(1).standard_normal((4, 16))
        write_tokens_csv(tmp_path / "in.csv", x)
        cfg = load_config(None, ["mode=simulate", "d=16", "n=4", "blocks=1", "n_probes=1", "n_seeds=1",
                                 f"tokens={tmp_path / 'in.csv'}"])
        run(cfg, tmp_path / "o")
        np.testing.assert_array_equal(read_tokens_csv(tmp_path / "o" / "tokens.csv"), x)
        with pytest.raises(ConfigError):
            run(load_config(None, ["mode=simulate", f"tokens={tmp_path / 'in.csv'}"]), tmp_path / "p")

    def test_sweep(self, tmp_path):
        cfg = load_config(None, ["mode=sweep", "sigma_21=0.4,0.6", "blocks=2,3"])
        data = run(cfg, tmp_path, workers=2)
        _, rows = read_csv(tmp_path / "sweep.csv")
        assert [r[0] for r in rows] == ["point_0000", "point_0001", "point_0002", "point_0003"]
        assert "point_0003/apjn.csv" in data["files"]


class TestCli:
    def test_theory(self, tmp_path, capsys):
        assert main(["theory", "--out", str(tmp_path), "--set", "blocks=3"]) == EXIT_OK
        assert (tmp_path / "apjn.csv").is_file()
        assert str(tmp_path / "apjn.csv") in capsys.readouterr().out

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
        assert main(["asymptotics"]) == EXIT_OK
        assert _manifest(tmp_path / "env")["status"] == "complete"

    def test_config_error_exit(self, tmp_path, capsys):
        assert main(["theory", "--out", str(tmp_path), "--set", "blocks=-1"]) == EXIT_CONFIG
        assert "blocks" in capsys.readouterr().err
        assert main(["theory", "--out", str(tmp_path), "--config", str(tmp_path / "missing")]) == EXIT_CONFIG
        assert main(["theory", "--out", str(tmp_path), "--threads", "0"]) == EXIT_CONFIG

    def test_numerical_exit(self, tmp_path):
        code = main(["asymptotics", "--out", str(tmp_path), "--set", "norm=erf", "--set", "sigma_21=0"])
        assert code == EXIT_NUMERICAL
        assert _manifest(tmp_path)["status"] == "failed"

    def test_simulate_is_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["simulate", "--out", str(tmp_path / name), "--seed", "5", *SMALL_SIM]) == EXIT_OK
        assert (tmp_path / "a" / "measurement.csv").read_text() == (tmp_path / "b" / "measurement.csv").read_text()
        main(["simulate", "--out", str(tmp_path / "c"), "--seed", "6", *SMALL_SIM])
        assert (tmp_path / "a" / "measurement.csv").read_text() != (tmp_path / "c" / "measurement.csv").read_text()

    def test_threads_do_not_change_results(self, tmp_path):
        main(["simulate", "--out", str(tmp_path / "a"), *SMALL_SIM])
        main(["simulate", "--out", str(tmp_path / "b"), "--threads", "2", *SMALL_SIM])
        assert (tmp_path / "a" / "measurement.csv").read_text() == (tmp_path / "b" / "measurement.csv").read_text()

    @pytest.mark.parametrize("which,extra", [("fig2", ["--set", "norm=erf"]), ("fig4a", []), ("fig4b", []),
                                              ("fig6", ["--set", "blocks=4"])])
    def test_figures(self, tmp_path, which, extra):
        assert main(["figure", which, "--out", str(tmp_path), *extra]) == EXIT_OK
        assert (tmp_path / f"{which}.csv").is_file()

    def test_fig4b_zeta(self, tmp_path):
        main(["figure", "fig4b", "--out", str(tmp_path), "--set", f"sigma_21={math.sqrt(2)}", "--set", "sigma_ov=1"])
        _, rows = read_csv(tmp_path / "fig4b.csv")
        assert float(rows[0][2]) == pytest.approx(0.5, rel=1e-15)

    def test_check_unknown_criterion(self, capsys):
        assert main(["check", "99"]) == EXIT_CONFIG

    def test_check_single_criterion(self, capsys):
        assert main(["check", "2"]) == EXIT_OK
        assert "[PASS] criterion  2:" in capsys.readouterr().out

    def test_exit_check_constant(self):
        assert EXIT_CHECK == 4

    def test_console_entry(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "sigprop.cli", "theory", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        proc = subprocess.run([sys.executable, "-m", "sigprop.cli", "frobnicate"], capture_output=True, text=True)
        assert proc.returncode == 2
