"""Oracle suite for the numerical kernels.

Every check compares a kernel against an independent reference: analytic
values, hand evaluations, Monte Carlo ground truth or central finite
differences.  ``selftest()`` runs them all and returns the results;
the CLI exits nonzero when any check fails.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .agent import AgentConfig, expected_sarsa_delta, policy_probs
from .outcome import OutcomeConfig, OutcomeModelBank, quantile_huber_loss, quantile_levels, wasserstein1
from .qnet import NetworkSpec, backward, forward, initialize


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _table_stream(samples: np.ndarray, config: OutcomeConfig | None = None) -> np.ndarray:
    """Train a single quantile table on a scalar sample stream and return it."""
    bank = OutcomeModelBank(1, config, n_joints=1)
    action = np.zeros(1, dtype=np.int64)
    buf = np.zeros(1)
    for y in samples:
        buf[0] = y
        bank.update(action, buf)
    return bank.baseline[0].copy()


def check_w1_analytic() -> CheckResult:
    taus = quantile_levels()
    cases = [
        ("identical", wasserstein1(taus, taus), 0.0),
        ("point masses 0 and 1", wasserstein1(np.zeros(49), np.ones(49)), 1.0),
        ("U[0,1] vs U[0,2]", wasserstein1(taus, 2 * taus), 0.5),
    ]
    errs = [abs(got - want) for _, got, want in cases]
    ok = all(e <= 1e-12 for e in errs)
    detail = ", ".join(f"{n}={got:.12g} (want {want})" for n, got, want in cases)
    return CheckResult("W1 analytic cases", ok, detail)


def check_uniform_quantiles(n_updates: int = 50_000, tol: float = 0.05, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    table = _table_stream(rng.random(n_updates))
    err = float(np.max(np.abs(table - quantile_levels())))
    return CheckResult("quantile regression on U[0,1]", err < tol, f"max |q(tau)-tau| = {err:.4f} after {n_updates} updates (< {tol})")


def check_translated_gaussians(
    mu1: float = 0.0, mu2: float = 1.0, sigma: float = 0.5, n_updates: int = 20_000, rel_tol: float = 0.10, seed: int = 1
) -> CheckResult:
    rng = np.random.default_rng(seed)
    qa = _table_stream(rng.normal(mu1, sigma, n_updates))
    qb = _table_stream(rng.normal(mu2, sigma, n_updates))
    w = wasserstein1(qa, qb)
    target = abs(mu2 - mu1)
    rel = abs(w - target) / target
    return CheckResult(
        "W1 of learned translated Gaussians", rel < rel_tol, f"W1 = {w:.4f} vs |mu1-mu2| = {target} (rel err {rel:.3f} < {rel_tol})"
    )


def check_huber_hand_cases(kappa: float = 1.0) -> CheckResult:
    cases = [((0.5, 0.5), 0.0625), ((-2.0, 0.25), 1.125), ((0.0, 0.5), 0.0)]
    got = [quantile_huber_loss(u, tau, kappa) for (u, tau), _ in cases]
    ok = all(abs(g - want) <= 1e-12 for g, (_, want) in zip(got, cases))
    detail = ", ".join(f"L(u={u}, tau={t})={g:.12g} (want {w})" for g, ((u, t), w) in zip(got, cases))
    return CheckResult("quantile Huber hand cases", ok, detail)


def check_boltzmann_hand_case() -> CheckResult:
    cfg = AgentConfig(temperature=0.3, move_bias=0.0)
    q = np.zeros(24)
    q[1] = 0.3
    p = float(policy_probs(q, cfg)[0, 1])
    want = math.e / (1 + math.e)
    ok = abs(p - 0.7311) <= 1e-4 and abs(p - want) <= 1e-12
    return CheckResult("Boltzmann hand case", ok, f"p_move = {p:.6f} (want 0.7311 +- 1e-4)")


def check_expected_sarsa_hand_case() -> CheckResult:
    delta = float(expected_sarsa_delta(0.0, 0.1, [0.5, 0.5], [1.0, 3.0], 0.0))
    ok = abs(delta - 0.2) <= 1e-12
    return CheckResult("Expected SARSA hand case", ok, f"delta = {delta!r} (want 0.2 to 1e-12)")


def check_gradients(n_probes: int = 120, tol: float = 1e-4, step: float = 1e-5, seed: int = 0) -> CheckResult:
    """Analytic parameter gradients against central finite differences."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec()
    params = initialize(spec, seed)
    # randomize gains and offsets so every parameter group has a generic gradient
    params.buffer += rng.normal(0.0, 0.1, params.buffer.shape)
    x = rng.normal(0.0, 1.0, spec.input_dim)
    g = rng.normal(0.0, 1.0, spec.output_dim)
    _, trace = forward(params, x)
    grads = backward(params, trace, g)
    flat_grad = np.concatenate([grads[k].ravel() for k in spec.shapes()])
    worst = 0.0
    probes = rng.choice(params.buffer.size, size=n_probes, replace=False)
    for idx in probes:
        old = params.buffer[idx]
        params.buffer[idx] = old + step
        fp = float(forward(params, x)[0] @ g)
        params.buffer[idx] = old - step
        fm = float(forward(params, x)[0] @ g)
        params.buffer[idx] = old
        fd = (fp - fm) / (2 * step)
        an = flat_grad[idx]
        denom = max(abs(fd), abs(an), 1e-7)
        worst = max(worst, abs(fd - an) / denom)
    ok = worst < tol
    return CheckResult("value-net gradient check", ok, f"max relative error {worst:.2e} over {n_probes} probes (< {tol})")


CHECKS = (
    check_w1_analytic,
    check_huber_hand_cases,
    check_boltzmann_hand_case,
    check_expected_sarsa_hand_case,
    check_gradients,
    check_uniform_quantiles,
    check_translated_gaussians,
)


def selftest(checks=CHECKS) -> list[CheckResult]:
    """Run every check, timing each; exceptions count as failures."""
    results = []
    for check in checks:
        t0 = time.perf_counter()
        try:
            r = check()
        except Exception as exc:  # a crashing kernel is a failed check, not a crashed suite
            r = CheckResult(getattr(check, "__name__", "check"), False, f"raised {type(exc).__name__}: {exc}")
        r.seconds = time.perf_counter() - t0
        results.append(r)
    return results
