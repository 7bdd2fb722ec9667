import csv
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srd_chance import cli
from srd_chance.config import ESTIMATORS, ExperimentConfig
from srd_chance.errors import ConfigError, DefinitenessError, InfeasibleStartError

TINY = """[experiment]
problem = linear
n = 12
K = 6
N = 300
N_schedule = 50, 100
reference_N = 2000
repetitions = 3
variance_N = 100
variance_repetitions = 3
K_list = 2, 4
K_reference = 6
opt_N = 200
max_iter = 20
"""


def write_config(tmp_path, extra=""):
    """Tiny config with ``key = value`` lines of ``extra`` replacing the defaults above."""
    entries = dict(line.split(" = ", 1) for line in (TINY + extra).splitlines()[1:] if line)
    path = tmp_path / "cfg.ini"
    path.write_text("[experiment]\n" + "".join(f"{k} = {v}\n" for k, v in entries.items()))
    return str(path)


def read_rows(path):
    with open(path) as fh:
        comment = fh.readline()
        return comment, list(csv.DictReader(fh))


bounds = st.floats(-5, 5, allow_nan=False).flatmap(
    lambda lo: st.tuples(st.just(lo), st.floats(lo + 0.01, lo + 10)))


class TestExperimentConfig:
    @given(n=st.integers(3, 300), K=st.integers(1, 30), lu=bounds, seed=st.integers(0, 2 ** 31),
           est=st.lists(st.sampled_from(ESTIMATORS), min_size=1, max_size=3, unique=True),
           ps=st.lists(st.floats(0.01, 0.99), min_size=1, max_size=4),
           amp=st.floats(0.1, 10), infinite_lower=st.booleans())
    @settings(max_examples=60)
    def test_text_round_trip(self, n, K, lu, seed, est, ps, amp, infinite_lower):
        lower = -math.inf if infinite_lower else lu[0]
        cfg = ExperimentConfig(n=n, K=K, lower=lower, upper=lu[1], seed=seed, estimators=tuple(est),
                               p_list=tuple(ps), noise_amplitude=amp).validate()
        back = ExperimentConfig.from_text(cfg.to_text())
        assert back == cfg
        assert back.sha256() == cfg.sha256()

    @pytest.mark.parametrize("text,match", [
        ("[experiment]\nbogus = 1\n", "unknown"),
        ("[other]\nn = 3\n", "section"),
        ("[experiment]\nn = 1.5\n", "integer"),
        ("[experiment]\nupper = nan\n", "NaN"),
        ("[experiment]\nlower = 0.5\nupper = 0.1\n", "below"),
        ("[experiment]\nestimators = mc, quantum\n", "estimators"),
        ("[experiment]\np_list = 0.5, 1.0\n", "probabilities"),
        ("[experiment]\nK_list = 10, 40\n", "K_reference"),
        ("no section at all", "parse"),
    ])
    def test_validation_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            ExperimentConfig.from_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(tmp_path / "absent.ini")

    def test_defaults_mirror_reference_setup(self):
        cfg = ExperimentConfig()
        assert (cfg.n, cfg.K, cfg.gamma, cfg.alpha_reg, cfg.alpha_cov) == (128, 20, 4.0, 1e-5, 0.1)
        assert cfg.reference_N == 10 ** 7

    def test_fast_profile(self):
        fast = ExperimentConfig().fast()
        assert fast.n == 64 and max(fast.N_schedule) <= 10 ** 4 and fast.repetitions == 20
        assert ExperimentConfig(problem="bilinear", n=33).fast().n == 33

    def test_hash_ignores_thread_count(self):
        cfg = ExperimentConfig()
        assert cfg.sha256() == cfg.replace(threads=4).sha256()
        assert cfg.sha256() != cfg.replace(seed=1).sha256()

    def test_comments_allowed(self):
        cfg = ExperimentConfig.from_text("[experiment]\nn = 16  # coarse\n")
        assert cfg.n == 16


class TestCli:
    def test_estimate_writes_csv_and_config(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["estimate", "--config", write_config(tmp_path), "--out", str(out)]) == 0
        cfg = ExperimentConfig.from_file(out / "config.ini")
        comment, rows = read_rows(out / "estimate.csv")
        assert comment.startswith(f"# config_sha256={cfg.sha256()}")
        assert [r["estimator"] for r in rows] == list(ESTIMATORS)
        for r in rows:
            assert 0 <= float(r["p_hat"]) <= 1
        assert (out / "timing.csv").exists()

    def test_overrides(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["estimate", "--config", write_config(tmp_path), "--out", str(out), "--seed", "7",
                  "--threads", "2"])
        cfg = ExperimentConfig.from_file(out / "config.ini")
        assert cfg.seed == 7 and cfg.threads == 2

    def test_upper_below_lower_exit_code(self, tmp_path, capsys):
        code = cli.main(["estimate", "--config", write_config(tmp_path, "lower = 0.3\nupper = -0.3\n"),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore:mean state violates the bounds")
    def test_slater_exit_code(self, tmp_path):
        code = cli.main(["estimate", "--config", write_config(tmp_path, "lower = 0.1\nupper = 0.3\n"),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_SLATER

    @pytest.mark.parametrize("exc,code", [(DefinitenessError("x"), cli.EXIT_DEFINITENESS),
                                          (InfeasibleStartError("x"), cli.EXIT_INFEASIBLE)])
    def test_error_exit_codes(self, tmp_path, monkeypatch, exc, code):
        def boom(cfg, out):
            raise exc
        monkeypatch.setitem(cli.COMMANDS, "estimate", boom)
        assert cli.main(["estimate", "--config", write_config(tmp_path), "--out", str(tmp_path / "o")]) == code

    def test_ball_mode_variance_zero(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["estimate", "--config", write_config(tmp_path, "mode = ball\noracle_radius = 2.0\n"),
                  "--out", str(out)])
        _, rows = read_rows(out / "estimate.csv")
        for r in rows:
            if r["estimator"] != "mc":
                assert float(r["var"]) == 0.0
                assert float(r["rho_inf"]) == float(r["rho_sup"]) == 2.0

    def test_halfspace_variance_ratio_near_one(self, tmp_path):
        out = tmp_path / "out"
        extra = "mode = halfspace\nvariance_N = 2000\nvariance_repetitions = 20\n"
        cli.main(["variance-study", "--config", write_config(tmp_path, extra), "--out", str(out)])
        _, rows = read_rows(out / "variance_study.csv")
        assert float(rows[0]["ratio"]) == pytest.approx(1.0, abs=0.02)

    def test_dump_operators(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["estimate", "--config", write_config(tmp_path), "--out", str(out), "--dump-operators"])
        coo = np.loadtxt(out / "operator_laplacian_mixed.txt", ndmin=2)
        assert coo.shape[1] == 3 and coo.shape[0] > 0

    def test_dump_bilinear_operators(self, tmp_path):
        out = tmp_path / "out"
        extra = "problem = bilinear\nn = 9\nupper = 1.1\nlower = -inf\nestimators = srd-mc\nN = 20\n"
        assert cli.main(["estimate", "--config", write_config(tmp_path, extra), "--out", str(out),
                         "--dump-operators"]) == 0
        assert (out / "operator_stiffness.txt").exists() and (out / "operator_mass.txt").exists()

    def test_optimize_outputs(self, tmp_path):
        out = tmp_path / "out"
        extra = "lower = -inf\nupper = 0.3\np_list = 0.9\n"
        assert cli.main(["optimize", "--config", write_config(tmp_path, extra), "--out", str(out)]) == 0
        _, rows = read_rows(out / "objective_vs_p.csv")
        assert rows[0]["p"] == "unconstrained" and rows[1]["p"] == "0.9"
        for name in ("control_p0.9.csv", "mean_state_p0.9.csv", "history_p0.9.csv", "state_max_p0.9.csv"):
            assert (out / name).exists()

    def test_module_entry_point(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "srd_chance.cli", "estimate", "--config",
                              write_config(tmp_path, "lower = 0.3\nupper = -0.3\n"), "--out", str(tmp_path / "o")],
                             capture_output=True, text=True)
        assert res.returncode == cli.EXIT_CONFIG
