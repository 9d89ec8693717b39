import json

import pytest

from cais_lab.cli import main
from cais_lab.selftest import CheckResult, check_huber_hand_cases, selftest

SHORT = {"protocol": {"baseline_steps": 100, "attached_steps": 300, "extinction_steps": 110}}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SHORT))
    return path


def test_selftest_passes_quickly(capsys):
    results = selftest()
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
    assert sum(r.seconds for r in results) < 60
    assert main(["selftest"]) == 0
    assert "7/7 checks passed" in capsys.readouterr().out


def test_perturbed_kappa_fails_the_hand_case():
    assert check_huber_hand_cases(kappa=1.0).passed
    assert not check_huber_hand_cases(kappa=0.4).passed


def test_selftest_reports_failures(monkeypatch, capsys):
    import cais_lab.cli as cli

    monkeypatch.setattr(cli, "selftest", lambda: [CheckResult("broken", False, "forced")])
    assert cli.main(["selftest"]) == 1
    assert "[FAIL] broken" in capsys.readouterr().out


def test_run_writes_csv_manifest_and_summary(tmp_path, cfg):
    out = tmp_path / "out"
    code = main(["run", "--config", str(cfg), "--seed", "3", "--condition", "noisy", "--reward", "rtl",
                 "--temperature", "0.5", "--out", str(out)])
    assert code == 0
    assert (out / "noisy" / "rtl" / "3.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["agent"]["temperature"] == 0.5
    assert manifest["config"]["seeds"] == [3]
    assert (out / "summary.csv").exists()


def test_output_root_from_environment(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("CAIS_LAB_OUT", str(tmp_path / "envout"))
    assert main(["run", "--config", str(cfg), "--seed", "0"]) == 0
    assert (tmp_path / "envout" / "free" / "cais" / "0.csv").exists()
    assert main(["report"]) == 0
    assert (tmp_path / "envout" / "plots" / "free_cais.svg").exists()


def test_sweep_and_report(tmp_path, cfg, capsys):
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(cfg), "--conditions", "free,noisy", "--rewards", "mtl,cais+surprise",
                 "--seeds", "2", "--jobs", "2", "--out", str(out)])
    assert code == 0
    assert len(list(out.glob("*/*/*.csv"))) == 8
    assert main(["report", "--in", str(out)]) == 0
    assert len(list((out / "plots").glob("*.svg"))) == 4
    text = capsys.readouterr().out
    assert "separation" in text


def test_partial_sweep_failure_is_nonzero(tmp_path, cfg, capsys):
    code = main(["sweep", "--config", str(cfg), "--conditions", "free", "--rewards", "mtl", "--seeds", "1",
                 "--jobs", "1", "--set", "env.tether_gain=1e300", "--out", str(tmp_path / "o")])
    assert code == 1
    assert "FAILED free/mtl/seed 0" in capsys.readouterr().err


def test_config_errors_exit_with_usage_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"agent": {"gamma": 1.5}}))
    assert main(["run", "--config", str(bad)]) == 2
    assert "agent.gamma" in capsys.readouterr().err
    assert main(["sweep", "--seeds", "zero"]) == 2


def test_report_on_empty_directory_fails(tmp_path):
    assert main(["report", "--in", str(tmp_path)]) == 1


def test_exactly_one_subcommand_is_required():
    with pytest.raises(SystemExit):
        main([])
