"""Online quantile models of action outcomes, Wasserstein-1 and CAIS.

The bank keeps one quantile table per latent dimension for the unconditional
outcome distribution p(h), and one per (joint, action value, dimension) for the
conditional distributions p(h | a_i = v).  Tables are plain parameter arrays
trained with AdamW on the quantile Huber loss and re-sorted after every step so
that each table stays a valid (non-decreasing) quantile function.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np

from .env import N_JOINTS
from .errors import ConfigError, ContractError

N_QUANTILES = 49


def quantile_levels(n: int = N_QUANTILES) -> np.ndarray:
    """Evenly spaced quantile levels i/(n+1), i = 1..n (0.02..0.98 for n=49)."""
    if n < 1:
        raise ContractError(f"need at least one quantile level, got {n}")
    return np.arange(1, n + 1, dtype=float) / (n + 1)


def huber(u, kappa):
    """Huber function: quadratic for |u| <= kappa, linear beyond."""
    a = np.abs(u)
    return np.where(a <= kappa, 0.5 * u * u, kappa * (a - 0.5 * kappa))


def quantile_huber_loss(u, tau, kappa: float = 1.0):
    """Asymmetric quantile Huber loss of the residual ``u = target - prediction``.

    Args:
        u: residual(s).
        tau: quantile level(s) in (0, 1), broadcast against ``u``.
        kappa: Huber threshold, strictly positive.

    Returns:
        ``|tau - 1{u < 0}| * huber(u, kappa)``; a float for scalar inputs.
    """
    u = np.asarray(u, dtype=float)
    weight = np.abs(tau - (u < 0))
    out = weight * huber(u, kappa)
    return float(out) if out.ndim == 0 else out


def quantile_huber_grad(q, y, tau, kappa: float = 1.0):
    """Derivative of ``quantile_huber_loss(y - q, tau, kappa)`` with respect to ``q``."""
    u = np.asarray(y, dtype=float) - np.asarray(q, dtype=float)
    weight = np.abs(tau - (u < 0))
    psi = np.clip(u, -kappa, kappa)
    return -weight * psi


def wasserstein1(qa: np.ndarray, qb: np.ndarray) -> np.ndarray | float:
    """W1 between distributions given by quantile tables on a shared uniform grid.

    The last axis indexes quantile levels; leading axes broadcast.
    """
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    if qa.shape[-1] != qb.shape[-1]:
        raise ContractError(f"quantile grids differ: {qa.shape[-1]} vs {qb.shape[-1]}")
    out = np.abs(qa - qb).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def surprise(expected: np.ndarray, actual: np.ndarray) -> float:
    """Root-mean-square prediction error."""
    expected = np.asarray(expected, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if expected.shape != actual.shape or expected.ndim != 1:
        raise ContractError(f"surprise needs equal 1-d vectors, got {expected.shape} and {actual.shape}")
    return float(np.linalg.norm(expected - actual) / math.sqrt(expected.size))


class OutcomeKind(str, enum.Enum):
    # latent averaged over every physics substep of the agent step
    MEAN = "mean"
    # change of the observed latent across the agent step
    DELTA = "delta"
    # observed latent at the end of the agent step
    ABSOLUTE = "absolute"


@dataclass
class OutcomeConfig:
    """Settings of the outcome model bank.

    Attributes:
        outcome: which statistic of the latent stream is modelled.
        n_quantiles: number of quantile levels per table.
        kappa: Huber threshold of the quantile loss.
        lr, beta1, beta2, eps, weight_decay: AdamW settings for the tables.
    """

    outcome: OutcomeKind = OutcomeKind.MEAN
    n_quantiles: int = N_QUANTILES
    kappa: float = 0.01
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        try:
            self.outcome = OutcomeKind(self.outcome)
        except ValueError:
            raise ConfigError("model.outcome", f"unknown outcome {self.outcome!r}") from None
        if isinstance(self.n_quantiles, bool) or not isinstance(self.n_quantiles, int) or self.n_quantiles < 1:
            raise ConfigError("model.n_quantiles", f"must be a positive integer, got {self.n_quantiles!r}")
        for name in ("kappa", "lr", "eps"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"model.{name}", f"must be a positive number, got {v!r}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0 <= v < 1):
                raise ConfigError(f"model.{name}", f"must lie in [0, 1), got {v!r}")
        if not (isinstance(self.weight_decay, (int, float)) and self.weight_decay >= 0):
            raise ConfigError("model.weight_decay", f"must be >= 0, got {self.weight_decay!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outcome"] = self.outcome.value
        return d


@numba.njit(cache=True)
def _update_rows(values, m, v, steps, rows, y, taus, kappa, lr, beta1, beta2, eps, weight_decay):
    """AdamW step on the summed quantile Huber loss for the given table rows.

    Each (row, dim) table is re-sorted afterwards by insertion sort, which is
    near linear because a single small step rarely breaks the ordering; the
    moment estimates are permuted together with their values.
    """
    n_q = taus.shape[0]
    dim = values.shape[1]
    for r in rows:
        steps[r] += 1
        c1 = 1.0 - beta1 ** steps[r]
        c2 = 1.0 - beta2 ** steps[r]
        decay = 1.0 - lr * weight_decay
        for d in range(dim):
            q = values[r, d]
            mm = m[r, d]
            vv = v[r, d]
            for k in range(n_q):
                u = y[d] - q[k]
                w = taus[k] if u >= 0.0 else 1.0 - taus[k]
                psi = min(max(u, -kappa), kappa)
                g = -w * psi
                mm[k] = beta1 * mm[k] + (1.0 - beta1) * g
                vv[k] = beta2 * vv[k] + (1.0 - beta2) * g * g
                q[k] = q[k] * decay - lr * (mm[k] / c1) / (math.sqrt(vv[k] / c2) + eps)
            for k in range(1, n_q):
                if q[k] < q[k - 1]:
                    qk, mk, vk = q[k], mm[k], vv[k]
                    j = k - 1
                    while j >= 0 and q[j] > qk:
                        q[j + 1] = q[j]
                        mm[j + 1] = mm[j]
                        vv[j + 1] = vv[j]
                        j -= 1
                    q[j + 1] = qk
                    mm[j + 1] = mk
                    vv[j + 1] = vk


@numba.njit(cache=True)
def _w1_to_baseline(values):
    """Mean over dims of W1(row, baseline) for every conditional row."""
    n_rows, dim, n_q = values.shape
    out = np.zeros(n_rows - 1)
    for r in range(1, n_rows):
        acc = 0.0
        for d in range(dim):
            for k in range(n_q):
                acc += abs(values[r, d, k] - values[0, d, k])
        out[r - 1] = acc / (dim * n_q)
    return out


def _row(joint: int, value: int) -> int:
    return 1 + 2 * joint + value


class OutcomeModelBank:
    """Baseline and per-(joint, value) quantile tables for a ``dim``-vector outcome.

    ``values`` has shape ``(1 + 2 * n_joints, dim, n_quantiles)``; row 0 is the
    baseline p(h) and row ``1 + 2*i + v`` is p(h | a_i = v).
    """

    def __init__(self, dim: int, config: OutcomeConfig | None = None, n_joints: int = N_JOINTS):
        if dim < 1:
            raise ContractError(f"outcome dimension must be >= 1, got {dim}")
        self.config = config or OutcomeConfig()
        self.dim = dim
        self.n_joints = n_joints
        self.taus = quantile_levels(self.config.n_quantiles)
        shape = (1 + 2 * n_joints, dim, self.config.n_quantiles)
        self.values = np.zeros(shape)
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.steps = np.zeros(shape[0], dtype=np.int64)
        self.update_count = 0

    @property
    def baseline(self) -> np.ndarray:
        return self.values[0]

    def conditional(self, joint: int, value: int) -> np.ndarray:
        return self.values[_row(joint, value)]

    def update(self, actions, outcome) -> None:
        """One AdamW step on the baseline and on the conditional table of every taken action."""
        actions = np.asarray(actions)
        outcome = np.asarray(outcome, dtype=float)
        if outcome.shape != (self.dim,):
            raise ContractError(f"outcome must have shape ({self.dim},), got {outcome.shape}")
        if actions.shape != (self.n_joints,):
            raise ContractError(f"actions must have shape ({self.n_joints},), got {actions.shape}")
        if not np.all(np.isfinite(outcome)):
            raise ContractError("outcome contains non-finite values")
        cfg = self.config
        rows = np.concatenate([[0], 1 + 2 * np.arange(self.n_joints) + actions.astype(np.int64)])
        _update_rows(
            self.values, self.m, self.v, self.steps, rows, outcome, self.taus,
            float(cfg.kappa), float(cfg.lr), float(cfg.beta1), float(cfg.beta2), float(cfg.eps),
            float(cfg.weight_decay),
        )
        self.update_count += 1

    def cais(self, joint: int, value: int) -> float:
        """Mean over latent dimensions of W1(p(h_d | a_joint = value), p(h_d))."""
        return float(wasserstein1(self.conditional(joint, value), self.baseline).mean())

    def cais_matrix(self) -> np.ndarray:
        """CAIS for every (joint, value), shape ``(n_joints, 2)``."""
        return _w1_to_baseline(self.values).reshape(self.n_joints, 2)

    def expected_outcome(self, joint: int | None = None, value: int | None = None) -> np.ndarray:
        """Mean of the quantile values per dimension; baseline when ``joint`` is None."""
        if joint is None:
            return self.values[0].mean(axis=-1)
        return self.conditional(joint, value).mean(axis=-1)

    def predict(self, actions) -> np.ndarray:
        """Expected outcome given the full action vector.

        Per-joint effects are assumed additive: the baseline mean plus the
        deviation of each taken action's conditional mean from it.
        """
        actions = np.asarray(actions, dtype=np.int64)
        means = self.values.mean(axis=-1)
        rows = 1 + 2 * np.arange(self.n_joints) + actions
        return means[0] + (means[rows] - means[0]).sum(axis=0)

    def dump_csv(self, path: str | Path) -> None:
        """Write every quantile value as one row keyed by (joint, value, dim, tau index).

        Baseline rows carry ``joint = -1`` and ``value = -1``.
        """
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write("# outcome model bank snapshot; joint=-1,value=-1 marks the baseline table\n")
            w = csv.writer(fh)
            w.writerow(["joint", "value", "dim", "tau_index", "tau", "quantile"])
            for r in range(self.values.shape[0]):
                joint, value = (-1, -1) if r == 0 else divmod(r - 1, 2)
                for d in range(self.dim):
                    for k, tau in enumerate(self.taus):
                        w.writerow([joint, value, d, k, f"{tau:.2f}", repr(float(self.values[r, d, k]))])
