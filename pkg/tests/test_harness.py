import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cais_lab.env import N_JOINTS, Condition
from cais_lab.errors import ConfigError, ContractError
from cais_lab.harness import (
    ProtocolConfig,
    RunConfig,
    aggregate,
    cell_config,
    contingency_separation,
    extinction_burst_index,
    read_run_csv,
    run_experiment,
    run_path,
    summarize_run,
    sweep,
    write_run_csv,
)
from helpers import make_log

SHORT = ProtocolConfig(100, 300, 120)


@pytest.fixture(scope="module")
def full_run():
    run = cell_config(RunConfig(), "free", "cais+surprise")
    return run_experiment(run, 0)


def test_protocol_boundaries():
    p = ProtocolConfig()
    assert p.total == 2500
    assert (p.attach_start, p.attach_end) == (501, 2000)
    assert [p.attached(t) for t in (500, 501, 2000, 2001)] == [False, True, True, False]
    assert [p.phase(t) for t in (1, 500, 501, 2000, 2001, 2500)] == [
        "baseline", "baseline", "attached", "attached", "extinction", "extinction"]
    with pytest.raises(ConfigError):
        ProtocolConfig(baseline_steps=-1)


def test_full_run_records(full_run):
    log, summary = full_run
    assert log.n_steps == 2500
    assert log.phase[499] == "baseline" and log.phase[500] == "attached"
    assert log.phase[1999] == "attached" and log.phase[2000] == "extinction"
    assert np.array_equal(np.flatnonzero(log.attached) + 1, np.arange(501, 2001))
    assert log.meta["model_updates"] == 2500
    for name in ("p_move", "q_move", "q_no", "mtl", "rtl", "surprise", "cais_move", "reward", "mobile_speed"):
        assert np.all(np.isfinite(getattr(log, name))), name
    assert set(summary) >= {"separation", "burst_index", "cais_attached", "surprise_onset_ratio"}


def test_forced_no_torque_keeps_the_free_mobile_still():
    run = dataclasses.replace(RunConfig(protocol=SHORT), forced_action="no_torque")
    log, _ = run_experiment(run, 1)
    assert np.all(log.actions == 0)
    assert np.max(log.mtl) <= 1e-9


def test_identical_seeds_give_identical_csv_bytes(tmp_path):
    run = cell_config(RunConfig(protocol=SHORT), "noisy", "cais+surprise")
    paths = []
    for k in range(2):
        log, _ = run_experiment(run, 4)
        path = tmp_path / f"{k}.csv"
        write_run_csv(log, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_summary_is_reproducible():
    run = cell_config(RunConfig(protocol=SHORT), "free", "mtl")
    assert run_experiment(run, 2)[1] == run_experiment(run, 2)[1]


def test_csv_round_trip(tmp_path):
    run = cell_config(RunConfig(protocol=SHORT), "free", "rtl")
    log, _ = run_experiment(run, 5)
    path = tmp_path / "run.csv"
    write_run_csv(log, path)
    text = path.read_text()
    assert text.startswith("# cais-lab per-step run log")
    assert "nan" not in text.lower()
    back = read_run_csv(path)
    assert back.n_steps == log.n_steps and back.phase == log.phase
    np.testing.assert_array_equal(back.actions, log.actions)
    np.testing.assert_array_equal(back.attached_joints, log.attached_joints)
    for name in ("p_move", "q_move", "q_no", "mtl", "rtl", "surprise", "cais_move", "reward"):
        np.testing.assert_allclose(getattr(back, name), getattr(log, name), rtol=1e-9, atol=1e-300)
    assert summarize_run(back).keys() == summarize_run(log).keys()


def test_malformed_csv_is_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# nothing here\n")
    with pytest.raises(ContractError):
        read_run_csv(path)
    log = make_log(SHORT)
    write_run_csv(log, path)
    lines = path.read_text().splitlines()
    lines[-1] = lines[-1].replace(",0.5", ",abc", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ContractError):
        read_run_csv(path)


def test_separation_examples():
    assert contingency_separation(make_log()) == 0.0
    assert contingency_separation(make_log(p_att=0.8, p_un=0.4)) == pytest.approx(0.4, abs=1e-12)
    with pytest.raises(ContractError):
        contingency_separation(make_log(), window=(10, 5))
    with pytest.raises(ContractError):
        contingency_separation(make_log(), window=(2400, 2600))


def test_separation_default_window_is_the_last_300_attached_steps():
    p = np.full(2500, 0.5)
    p[1700:2000] = 0.9
    assert contingency_separation(make_log(p_att=p)) == pytest.approx(0.4, abs=1e-12)


def test_untrained_agents_show_no_baseline_separation():
    run = cell_config(RunConfig(protocol=ProtocolConfig(500, 300, 100)), "free", "cais")
    seps = [contingency_separation(run_experiment(run, s)[0], window=(1, 500)) for s in range(10)]
    assert abs(np.mean(seps)) < 0.05


def test_burst_examples():
    assert extinction_burst_index(make_log(p_att=0.6)) == pytest.approx(0.0, abs=1e-15)
    p = np.full(2500, 0.6)
    p[2000:] = 0.75
    assert extinction_burst_index(make_log(p_att=p)) == pytest.approx(0.15, abs=1e-12)
    with pytest.raises(ContractError):
        extinction_burst_index(make_log(ProtocolConfig(500, 1500, 50)))


def test_aggregate_examples():
    one = aggregate([{"x": 0.3}])
    assert one["x"]["std"] == 0.0 and one["x"]["n"] == 1
    two = aggregate([{"x": 0.1}, {"x": 0.3}])
    assert two["x"]["mean"] == pytest.approx(0.2)
    assert two["x"]["std"] == pytest.approx(0.1414, abs=1e-4)
    with pytest.raises(ContractError):
        aggregate([])


@given(values=st.lists(st.floats(-10, 10), min_size=1, max_size=12), seed=st.integers(0, 1000))
def test_aggregate_is_permutation_invariant(values, seed):
    perm = np.random.default_rng(seed).permutation(len(values))
    a = aggregate([{"x": v} for v in values])["x"]
    b = aggregate([{"x": values[i]} for i in perm])["x"]
    assert a["mean"] == pytest.approx(b["mean"], abs=1e-12)
    assert a["std"] == pytest.approx(b["std"], abs=1e-12)
    assert a["std"] >= 0


def test_cell_config_and_paths(tmp_path):
    run = cell_config(RunConfig(), "noisy", "rtl+surprise")
    assert run.env.condition is Condition.NOISY
    assert run.agent.reward.name == "rtl+surprise"
    assert run_path(tmp_path, run, 3) == tmp_path / "noisy" / "rtl+surprise" / "3.csv"


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(seeds=[])
    with pytest.raises(ConfigError):
        RunConfig(seeds=[-1])
    with pytest.raises(ConfigError):
        RunConfig(forced_action="dance")


def test_sweep_writes_every_cell_and_reports_failures(tmp_path):
    run = RunConfig(protocol=SHORT, seeds=[0, 1])
    res = sweep(run, ["free"], ["mtl", "cais"], jobs=1, outdir=tmp_path)
    assert not res.failures
    for reward in ("mtl", "cais"):
        for seed in (0, 1):
            assert (tmp_path / "free" / reward / f"{seed}.csv").exists()
    assert (tmp_path / "summary.csv").exists() and (tmp_path / "manifest.json").exists()
    assert set(res.timings) == {("free", r, s) for r in ("mtl", "cais") for s in (0, 1)}

    broken = dataclasses.replace(run, env=dataclasses.replace(run.env, tether_gain=1e300))
    res = sweep(broken, ["free"], ["mtl"], seeds=[0], jobs=1)
    assert len(res.failures) == 1 and res.failures[0][:3] == ("free", "mtl", 0)
