import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cais_lab.errors import ConfigError, ContractError
from cais_lab.outcome import (
    OutcomeConfig,
    OutcomeModelBank,
    huber,
    quantile_huber_grad,
    quantile_huber_loss,
    quantile_levels,
    surprise,
    wasserstein1,
)

TAUS = quantile_levels()
finite = st.floats(-10, 10, allow_nan=False)
tables = arrays(np.float64, 49, elements=st.floats(-5, 5, allow_nan=False)).map(np.sort)


def test_quantile_levels():
    assert TAUS.shape == (49,)
    np.testing.assert_allclose(TAUS, np.arange(1, 50) * 0.02, rtol=0, atol=1e-15)
    assert np.all(np.diff(TAUS) > 0)
    np.testing.assert_allclose(TAUS + TAUS[::-1], 1.0, atol=1e-15)


@pytest.mark.parametrize("u, tau, want", [(0.0, 0.5, 0.0), (0.5, 0.5, 0.0625), (-2.0, 0.25, 1.125)])
def test_quantile_huber_loss_hand_cases(u, tau, want):
    assert quantile_huber_loss(u, tau, 1.0) == pytest.approx(want, abs=1e-15)


def test_huber_branches():
    assert huber(0.5, 1.0) == pytest.approx(0.125)
    assert huber(3.0, 1.0) == pytest.approx(2.5)
    assert huber(-3.0, 1.0) == pytest.approx(2.5)


@given(u=finite, tau=st.floats(0.01, 0.99), kappa=st.floats(0.05, 3.0))
def test_loss_is_non_negative(u, tau, kappa):
    assert quantile_huber_loss(u, tau, kappa) >= 0


@given(q=finite, y=finite, tau=st.floats(0.01, 0.99), kappa=st.floats(0.05, 3.0))
def test_loss_gradient_matches_finite_differences(q, y, tau, kappa):
    u = y - q
    h = 1e-6
    # stay away from the kinks at |u| in {0, kappa}
    assume(abs(u) > 1e-3 and abs(abs(u) - kappa) > 1e-3)
    fd = (quantile_huber_loss(y - (q + h), tau, kappa) - quantile_huber_loss(y - (q - h), tau, kappa)) / (2 * h)
    an = float(quantile_huber_grad(q, y, tau, kappa))
    assert abs(fd - an) <= 1e-6 * max(abs(an), 1e-3)


def test_w1_examples():
    assert wasserstein1(TAUS, TAUS) == 0.0
    assert wasserstein1(np.zeros(49), np.ones(49)) == 1.0
    assert wasserstein1(TAUS, 2 * TAUS) == pytest.approx(0.5, abs=1e-15)


def test_w1_rejects_mismatched_grids():
    with pytest.raises(ContractError):
        wasserstein1(np.zeros(49), np.zeros(48))


@given(a=tables, b=tables, c=tables)
def test_w1_metric_axioms(a, b, c):
    ab, ba = wasserstein1(a, b), wasserstein1(b, a)
    assert ab == ba
    assert ab >= 0
    assert wasserstein1(a, a) == 0
    assert wasserstein1(a, c) <= ab + wasserstein1(b, c) + 1e-12
    if not np.array_equal(a, b):
        assert ab > 0


@given(a=tables, shift=st.floats(-3, 3))
def test_w1_of_translation_is_the_shift(a, shift):
    assert wasserstein1(a, a + shift) == pytest.approx(abs(shift), abs=1e-9)


def _bank_with(baseline, shifts):
    """Bank whose conditional tables are the baseline shifted per dimension."""
    dim = baseline.shape[0]
    bank = OutcomeModelBank(dim)
    bank.values[0] = baseline
    bank.values[1:] = baseline + np.asarray(shifts)[:, None]
    return bank


def test_cais_examples():
    base = np.tile(TAUS, (4, 1))
    assert _bank_with(base, np.zeros(4)).cais(3, 1) == 0.0
    assert _bank_with(base, np.full(4, 0.2)).cais(3, 1) == pytest.approx(0.2, abs=1e-12)
    assert _bank_with(base, [0.2, 0.2, 0.0, 0.0]).cais(5, 0) == pytest.approx(0.1, abs=1e-12)


def test_cais_matrix_agrees_with_cais(rng):
    bank = OutcomeModelBank(5)
    bank.values = np.sort(rng.normal(size=bank.values.shape), axis=-1)
    m = bank.cais_matrix()
    assert m.shape == (12, 2)
    for j in range(12):
        for v in range(2):
            assert m[j, v] == pytest.approx(bank.cais(j, v), abs=1e-12)
    assert np.all(m >= 0)


@given(seed=st.integers(0, 10_000))
def test_cais_is_invariant_under_dimension_permutation(seed):
    r = np.random.default_rng(seed)
    bank = OutcomeModelBank(6)
    bank.values = np.sort(r.normal(size=bank.values.shape), axis=-1)
    perm = r.permutation(6)
    other = OutcomeModelBank(6)
    other.values = bank.values[:, perm, :].copy()
    np.testing.assert_allclose(bank.cais_matrix(), other.cais_matrix(), rtol=0, atol=1e-12)


def test_expected_outcome_examples():
    bank = OutcomeModelBank(3)
    bank.values[:] = 0.7
    np.testing.assert_allclose(bank.expected_outcome(2, 1), 0.7)
    bank.values[:] = TAUS
    np.testing.assert_allclose(bank.expected_outcome(0, 0), 0.5, atol=1e-15)
    bank.values[:] = TAUS - 0.5
    np.testing.assert_allclose(bank.expected_outcome(), 0.0, atol=1e-15)


def test_predict_is_additive_over_joints():
    bank = OutcomeModelBank(2)
    bank.values[0] = 1.0
    bank.values[1:] = 1.0
    # joint 4 MOVE shifts by +0.3, joint 7 NO_TORQUE by -0.1
    bank.values[1 + 2 * 4 + 1] += 0.3
    bank.values[1 + 2 * 7 + 0] -= 0.1
    actions = np.zeros(12, dtype=int)
    actions[4] = 1
    np.testing.assert_allclose(bank.predict(actions), 1.2)


def test_surprise_examples():
    assert surprise(np.ones(64), np.ones(64)) == 0.0
    assert surprise(np.zeros(64), np.ones(64)) == pytest.approx(1.0)
    d = np.zeros(64)
    d[10] = 1.0
    assert surprise(np.zeros(64), d) == pytest.approx(1 / 8)
    with pytest.raises(ContractError):
        surprise(np.zeros(64), np.zeros(63))


def _train(samples, config=None):
    bank = OutcomeModelBank(1, config, n_joints=1)
    for y in samples:
        bank.update(np.zeros(1, dtype=int), np.array([y]))
    return bank.baseline[0]


def test_constant_stream_converges():
    q = _train(np.full(3000, 0.4))
    assert np.max(np.abs(q - 0.4)) < 0.01


def test_gaussian_median_converges():
    r = np.random.default_rng(3)
    q = _train(r.normal(1.0, 0.5, 20_000))
    assert q[24] == pytest.approx(1.0, abs=0.05)


def test_update_touches_only_taken_rows(rng):
    bank = OutcomeModelBank(3)
    actions = rng.integers(0, 2, 12)
    bank.update(actions, np.array([1.0, -1.0, 0.5]))
    touched = {0} | {1 + 2 * j + a for j, a in enumerate(actions)}
    for r in range(bank.values.shape[0]):
        changed = np.any(bank.values[r] != 0.0)
        assert changed == (r in touched)
    assert bank.update_count == 1
    assert bank.steps[0] == 1


@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 10))
def test_tables_stay_sorted_after_every_update(seed, scale):
    r = np.random.default_rng(seed)
    bank = OutcomeModelBank(2, OutcomeConfig(lr=0.05, kappa=1.0))
    for _ in range(40):
        bank.update(r.integers(0, 2, 12), r.normal(0, scale, 2))
        assert np.all(np.diff(bank.values, axis=-1) >= 0)


def test_update_matches_numpy_oracle_with_sorting(rng):
    cfg = OutcomeConfig(lr=0.3, kappa=0.5)
    bank = OutcomeModelBank(1, cfg, n_joints=1)
    # unsorted start so the projection has to reorder values and moments
    bank.values[0, 0] = rng.normal(size=49)
    bank.m[0, 0] = rng.normal(size=49) * 0.1
    bank.v[0, 0] = rng.random(49) * 0.1
    bank.steps[0] = 3
    q, m, v = bank.values[0, 0].copy(), bank.m[0, 0].copy(), bank.v[0, 0].copy()
    y = 0.25

    u = y - q
    w = np.where(u >= 0, TAUS, 1 - TAUS)
    g = -w * np.clip(u, -cfg.kappa, cfg.kappa)
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    t = 4
    q = q - cfg.lr * (m / (1 - cfg.beta1**t)) / (np.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps)
    order = np.argsort(q, kind="stable")

    bank.update(np.zeros(1, dtype=int), np.array([y]))
    np.testing.assert_allclose(bank.values[0, 0], q[order], rtol=0, atol=1e-14)
    np.testing.assert_allclose(bank.m[0, 0], m[order], rtol=0, atol=1e-14)
    np.testing.assert_allclose(bank.v[0, 0], v[order], rtol=0, atol=1e-14)


def test_update_rejects_bad_inputs():
    bank = OutcomeModelBank(4)
    with pytest.raises(ContractError):
        bank.update(np.zeros(12, dtype=int), np.zeros(3))
    with pytest.raises(ContractError):
        bank.update(np.zeros(11, dtype=int), np.zeros(4))
    with pytest.raises(ContractError):
        bank.update(np.zeros(12, dtype=int), np.array([0, np.nan, 0, 0]))


@pytest.mark.parametrize(
    "kwargs, field",
    [({"kappa": 0}, "model.kappa"), ({"lr": -1}, "model.lr"), ({"beta1": 1.0}, "model.beta1"),
     ({"n_quantiles": 0}, "model.n_quantiles"), ({"outcome": "velocity"}, "model.outcome"),
     ({"weight_decay": -0.1}, "model.weight_decay")],
)
def test_outcome_config_validation(kwargs, field):
    with pytest.raises(ConfigError) as exc:
        OutcomeConfig(**kwargs)
    assert exc.value.path == field


def test_dump_csv(tmp_path, rng):
    bank = OutcomeModelBank(2)
    bank.values = np.sort(rng.normal(size=bank.values.shape), axis=-1)
    path = tmp_path / "bank.csv"
    bank.dump_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 25 * 2 * 49
    first = rows[0]
    assert (first["joint"], first["value"]) == ("-1", "-1")
    r = next(x for x in rows if x["joint"] == "5" and x["value"] == "1" and x["dim"] == "1" and x["tau_index"] == "7")
    assert float(r["quantile"]) == bank.conditional(5, 1)[1, 7]
    assert math.isclose(float(r["tau"]), 0.16)
