import json
import subprocess
import sys
from pathlib import Path

import pytest

from ldplab.cli import main, read_csv

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
DATA = Path(__file__).resolve().parent / "data"


def run_cli(*args):
    return main(list(args))


def write_config(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


SMALL_MC = """
[experiment]
kind = "mc-laplace"
[grid]
horizon = 1.0
steps = 32
x0 = [0.0]
[model]
kind = "constant"
[model.params]
drift = [0.0]
sigma = 1.0
[payoff]
kind = "clipped_linear"
[payoff.params]
slope = 1.0
cap = 10.0
[mc]
epsilon = [0.4, 0.2]
n_paths = 4000
seed = 42
[output]
dir = "unused"
"""


class TestExitCodes:
    def test_valid_laplace_run(self, tmp_path):
        out = tmp_path / "out"
        code = run_cli("rate-laplace", "--config",
                       str(CONFIGS / "rate_laplace_linear.toml"), "--out", str(out))
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["results"]["value"] == pytest.approx(-0.5, abs=1e-3)
        assert (out / "control.csv").exists()
        assert (out / "timing.json").exists()

    def test_unknown_model_kind_is_config_error(self, tmp_path):
        bad = (CONFIGS / "rate_laplace_linear.toml").read_text().replace(
            'kind = "constant"', 'kind = "mystery"')
        code = run_cli("run", "--config", write_config(tmp_path, bad),
                       "--out", str(tmp_path / "o"))
        assert code == 2

    def test_missing_config_file(self, tmp_path):
        assert run_cli("run", "--config", str(tmp_path / "nope.toml")) == 2

    def test_underflow_is_numerical_failure(self, tmp_path):
        code = run_cli("run", "--config", str(CONFIGS / "mc_underflow_demo.toml"),
                       "--out", str(tmp_path / "o"))
        assert code == 3

    def test_unknown_experiment_kind(self, tmp_path):
        bad = SMALL_MC.replace('kind = "mc-laplace"', 'kind = "mc-lapalce"', 1)
        assert run_cli("run", "--config", write_config(tmp_path, bad),
                       "--out", str(tmp_path / "o")) == 2


class TestManifests:
    def test_reruns_byte_identical(self, tmp_path):
        cfgp = write_config(tmp_path, SMALL_MC)
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("mc-laplace", "--config", cfgp, "--out", str(a)) == 0
        assert run_cli("mc-laplace", "--config", cfgp, "--out", str(b)) == 0
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        assert (a / "estimates.csv").read_bytes() == (b / "estimates.csv").read_bytes()

    def test_thread_count_does_not_change_outputs(self, tmp_path):
        cfgp = write_config(tmp_path, SMALL_MC)
        a, b = tmp_path / "t1", tmp_path / "t4"
        assert run_cli("mc-laplace", "--config", cfgp, "--out", str(a), "--threads", "1") == 0
        assert run_cli("mc-laplace", "--config", cfgp, "--out", str(b), "--threads", "4") == 0
        assert (a / "estimates.csv").read_bytes() == (b / "estimates.csv").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()

    def test_threads_env_fallback(self, tmp_path, monkeypatch):
        cfgp = write_config(tmp_path, SMALL_MC)
        a, b = tmp_path / "env", tmp_path / "flag"
        monkeypatch.setenv("LDPLAB_THREADS", "3")
        assert run_cli("mc-laplace", "--config", cfgp, "--out", str(a)) == 0
        monkeypatch.delenv("LDPLAB_THREADS")
        assert run_cli("mc-laplace", "--config", cfgp, "--out", str(b),
                       "--threads", "3") == 0
        assert (a / "estimates.csv").read_bytes() == (b / "estimates.csv").read_bytes()

    def test_seed_override_changes_hash_and_results(self, tmp_path):
        cfgp = write_config(tmp_path, SMALL_MC)
        a, b = tmp_path / "s1", tmp_path / "s2"
        assert run_cli("mc-laplace", "--config", cfgp, "--out", str(a), "--seed", "1") == 0
        assert run_cli("mc-laplace", "--config", cfgp, "--out", str(b), "--seed", "2") == 0
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        assert ma["seed"] == 1 and mb["seed"] == 2
        assert (a / "estimates.csv").read_bytes() != (b / "estimates.csv").read_bytes()


class TestFlowDump:
    def test_trajectory_matches_direct_integration(self, tmp_path):
        out = tmp_path / "o"
        assert run_cli("flow", "dump", "--config",
                       str(CONFIGS / "flow_dump_constant.toml"), "--out", str(out)) == 0
        header, rows = read_csv(out / "trajectory.csv")
        assert header == ["t", "c0", "c1"]
        assert len(rows) == 65
        # constant model: x_T = 0.5 + 1.0 + 2.0 * 0.5 = 2.5, omega_T = 0.5
        assert rows[-1]["c0"] == pytest.approx(0.5, abs=1e-12)
        assert rows[-1]["c1"] == pytest.approx(2.5, abs=1e-12)


class TestEikonalCheck:
    def test_csv_schema_and_residuals(self, tmp_path):
        out = tmp_path / "o"
        assert run_cli("eikonal-check", "--config",
                       str(CONFIGS / "eikonal_check_linear.toml"), "--out", str(out)) == 0
        header, rows = read_csv(out / "eikonal.csv")
        assert header == ["t", "u", "du_dt", "du_domega0", "du_dx0",
                          "residual", "misfit", "K0", "K"]
        assert len(rows) == 3
        for r in rows:
            assert abs(r["residual"]) <= 0.05
            assert r["du_dx0"] == pytest.approx(1.0, abs=2e-2)
            assert r["du_dt"] == pytest.approx(0.5, abs=2e-2)


class TestPlot:
    def test_golden_file(self, tmp_path):
        out = tmp_path / "plot.svg"
        assert run_cli("plot", str(DATA / "convergence_fixture.csv"),
                       "--out", str(out), "--title", "exit convergence") == 0
        assert out.read_bytes() == (DATA / "golden_convergence.svg").read_bytes()

    def test_structural_elements(self, tmp_path):
        out = tmp_path / "plot.svg"
        run_cli("plot", str(DATA / "convergence_fixture.csv"), "--out", str(out))
        svg = out.read_text()
        assert "<polygon" in svg          # CI band
        assert "stroke-dasharray" in svg  # limit line
        assert svg.count("<circle") == 3  # one marker per row

    def test_single_row(self, tmp_path):
        csv = tmp_path / "one.csv"
        csv.write_text("eps,estimate,stderr,ci_lo,ci_hi,limit,abs_gap\n"
                       "0.2,0.5,0.01,0.48,0.52,0.45,0.05\n")
        out = tmp_path / "one.svg"
        assert run_cli("plot", str(csv), "--out", str(out)) == 0
        svg = out.read_text()
        assert svg.count("<circle") == 1
        assert "<polyline" not in svg

    def test_empty_csv_rejected(self, tmp_path):
        csv = tmp_path / "empty.csv"
        csv.write_text("")
        assert run_cli("plot", str(csv), "--out", str(tmp_path / "x.svg")) == 2

    def test_schema_mismatch_rejected(self, tmp_path):
        csv = tmp_path / "bad.csv"
        csv.write_text("a,b\n1,2\n")
        assert run_cli("plot", str(csv), "--out", str(tmp_path / "x.svg")) == 2


SMALL_CONVERGENCE = """
[experiment]
kind = "convergence"
[convergence]
problem = "laplace"
[grid]
horizon = 1.0
steps = 32
x0 = [0.0]
[model]
kind = "constant"
[model.params]
drift = [0.0]
sigma = 1.0
[payoff]
kind = "clipped_linear"
[payoff.params]
slope = 1.0
cap = inf
[optimizer]
restarts = 2
seed = 7
[mc]
epsilon = [0.4, 0.2]
n_paths = 4000
seed = 42
[output]
plots = true
"""

SMALL_MC_EXIT = """
[experiment]
kind = "mc-exit"
[grid]
horizon = 1.0
steps = 32
x0 = [0.0]
[model]
kind = "constant"
[model.params]
drift = [0.0]
sigma = 1.0
[domain]
kind = "interval"
[domain.params]
lower = -1.0
upper = 1.0
[mc]
epsilon = [0.5]
n_paths = 4000
seed = 7
[output]
dir = "unused"
"""


class TestConvergenceCli:
    def test_csv_schema_limit_and_plot(self, tmp_path):
        out = tmp_path / "o"
        cfgp = write_config(tmp_path, SMALL_CONVERGENCE)
        assert run_cli("convergence", "--config", cfgp, "--out", str(out)) == 0
        header, rows = read_csv(out / "convergence.csv")
        assert header == ["eps", "estimate", "stderr", "ci_lo", "ci_hi", "limit", "abs_gap"]
        assert len(rows) == 2
        for r in rows:
            assert r["limit"] == pytest.approx(-0.5, abs=1e-6)
            assert r["abs_gap"] == pytest.approx(abs(r["estimate"] - r["limit"]), rel=1e-12)
        svg = (out / "convergence.svg").read_text()
        assert "<polygon" in svg and svg.count("<circle") == 2

    def test_mc_exit_run(self, tmp_path):
        out = tmp_path / "o"
        cfgp = write_config(tmp_path, SMALL_MC_EXIT)
        assert run_cli("mc-exit", "--config", cfgp, "--out", str(out)) == 0
        header, rows = read_csv(out / "estimates.csv")
        assert len(rows) == 1
        manifest = json.loads((out / "manifest.json").read_text())
        key = "eps=0.5"
        assert manifest["results"][key]["bridge_corrected"] is True
        assert 0.0 < manifest["results"][key]["prob"]["value"] < 1.0


class TestSmileCli:
    def test_flag_overrides(self, tmp_path):
        out = tmp_path / "o"
        code = run_cli("smile", "--config", str(CONFIGS / "smile_running_max.toml"),
                       "--out", str(out), "--model", "constant:0.2", "--k", "0.1",
                       "--a-schedule=-0.5,-1,-2")
        assert code == 0
        header, rows = read_csv(out / "smile.csv")
        assert header == ["k", "Q0", "Sigma0_sq", "a_used"]
        assert rows[0]["Q0"] == pytest.approx(0.125, rel=1e-3)
        assert rows[0]["Sigma0_sq"] == pytest.approx(0.04, rel=1e-3)

    def test_eps_schedule_flag_without_mc_block(self, tmp_path):
        # the MC gap table takes its schedule from the flag; the seed comes
        # from --seed when the config has no [mc] section
        base = (CONFIGS / "smile_running_max.toml").read_text()
        base += '\n[mc]\nn_paths = 4000\nmc_steps = 32\n'
        cfgp = write_config(tmp_path, base)
        out = tmp_path / "o"
        code = run_cli("smile", "--config", cfgp, "--out", str(out),
                       "--model", "constant:0.2", "--k", "0.1",
                       "--eps-schedule", "0.3", "--seed", "5")
        assert code == 0
        header, rows = read_csv(out / "call_rate.csv")
        assert len(rows) == 1 and rows[0]["eps"] == 0.3


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        r = subprocess.run(
            [sys.executable, "-m", "ldplab.cli", "rate-laplace", "--config",
             str(CONFIGS / "rate_laplace_linear.toml"), "--out", str(tmp_path / "o")],
            capture_output=True, text=True)
        assert r.returncode == 0
