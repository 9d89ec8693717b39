"""Three-phase mobile protocol, run logs, metrics and sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agent import Agent, AgentConfig, RewardSpec, RtlKind, assemble_reward, policy_probs, rtl, rtl_path, select_actions
from .env import JOINT_NAMES, MOVE, N_JOINTS, NO_TORQUE, Condition, EnvConfig, MobileEnv
from .errors import ConfigError, ContractError, NumericalInstabilityError
from .outcome import OutcomeConfig, OutcomeKind, OutcomeModelBank, surprise
from .qnet import NetworkSpec, forward, initialize

PHASES = ("baseline", "attached", "extinction")
CONDITION_KEYS = {"free": Condition.FREE, "noisy": Condition.NOISY}
REWARD_NAMES = ("mtl", "rtl", "cais", "surprise", "mtl+surprise", "rtl+surprise", "cais+surprise")

SEPARATION_WINDOW = 300
CAIS_WINDOW = 1000
BURST_WINDOW = 100
SURPRISE_ONSET = 50
SURPRISE_REFERENCE = 200


@dataclass
class ProtocolConfig:
    baseline_steps: int = 500
    attached_steps: int = 1500
    extinction_steps: int = 500

    def __post_init__(self):
        for name in ("baseline_steps", "attached_steps", "extinction_steps"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(f"protocol.{name}", f"expected a non-negative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.baseline_steps + self.attached_steps + self.extinction_steps

    @property
    def attach_start(self) -> int:
        """First attached step (1-based)."""
        return self.baseline_steps + 1

    @property
    def attach_end(self) -> int:
        """Last attached step (1-based)."""
        return self.baseline_steps + self.attached_steps

    def attached(self, step: int) -> bool:
        return self.attach_start <= step <= self.attach_end

    def phase(self, step: int) -> str:
        if step < self.attach_start:
            return "baseline"
        return "attached" if step <= self.attach_end else "extinction"

    def to_dict(self) -> dict:
        return {
            "baseline_steps": self.baseline_steps,
            "attached_steps": self.attached_steps,
            "extinction_steps": self.extinction_steps,
        }


@dataclass
class RunConfig:
    """Everything needed to reproduce one or more runs.

    ``forced_action`` is a debug switch that overrides the policy with a
    constant action (``"no_torque"`` or ``"move"``) on every joint.
    """

    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    model: OutcomeConfig = field(default_factory=OutcomeConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    out: str | None = None
    forced_action: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        for s in self.seeds:
            if isinstance(s, bool) or not isinstance(s, int) or s < 0:
                raise ConfigError("seeds", f"seeds must be unsigned integers, got {s!r}")
        if self.forced_action not in (None, "no_torque", "move"):
            raise ConfigError("forced_action", f"expected null, 'no_torque' or 'move', got {self.forced_action!r}")

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "agent": self.agent.to_dict(),
            "model": self.model.to_dict(),
            "protocol": self.protocol.to_dict(),
            "seeds": list(self.seeds),
            "out": self.out,
            "forced_action": self.forced_action,
        }


@dataclass
class RunLog:
    """Per-step records of one run, stored column-wise."""

    protocol: ProtocolConfig
    attached_joints: np.ndarray
    phase: list[str]
    attached: np.ndarray
    actions: np.ndarray
    p_move: np.ndarray
    q_move: np.ndarray
    q_no: np.ndarray
    mtl: np.ndarray
    rtl: np.ndarray
    surprise: np.ndarray
    cais_move: np.ndarray
    reward: np.ndarray
    mobile_speed: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.phase)

    @classmethod
    def empty(cls, protocol: ProtocolConfig, attached_joints, n: int | None = None) -> "RunLog":
        n = protocol.total if n is None else n
        z = lambda *s: np.zeros((n, *s))  # noqa: E731
        return cls(
            protocol, np.asarray(attached_joints), [""] * n, np.zeros(n, dtype=bool),
            np.zeros((n, N_JOINTS), dtype=np.int64), z(N_JOINTS), z(N_JOINTS), z(N_JOINTS),
            z(), z(), z(), z(N_JOINTS), z(N_JOINTS), z(),
        )

    def columns(self) -> list[str]:
        cols = ["step", "phase", "attached"]
        for prefix in ("action", "p_move", "q_move", "q_no_torque"):
            cols += [f"{prefix}_{j}" for j in JOINT_NAMES]
        cols += ["mtl", "rtl", "surprise"]
        cols += [f"cais_move_{j}" for j in JOINT_NAMES]
        cols += [f"reward_{j}" for j in JOINT_NAMES]
        cols += ["mobile_speed"]
        return cols

    def rows(self):
        f = _fmt
        for t in range(self.n_steps):
            yield (
                [str(t + 1), self.phase[t], str(int(self.attached[t]))]
                + [str(int(a)) for a in self.actions[t]]
                + [f(v) for v in self.p_move[t]]
                + [f(v) for v in self.q_move[t]]
                + [f(v) for v in self.q_no[t]]
                + [f(self.mtl[t]), f(self.rtl[t]), f(self.surprise[t])]
                + [f(v) for v in self.cais_move[t]]
                + [f(v) for v in self.reward[t]]
                + [f(self.mobile_speed[t])]
            )


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


CSV_DOC = """\
# cais-lab per-step run log
# one row per agent step; step is 1-based; phase in {baseline, attached, extinction}
# attached: 1 while the tether is active
# action_<joint>: 0 = NO_TORQUE, 1 = MOVE
# p_move_<joint>: Boltzmann probability of MOVE (bias included) before acting
# q_move_<joint>, q_no_torque_<joint>: stored Q-values before acting
# mtl: mobile path length over the step; rtl: latent trajectory length
# surprise: RMS error of the predicted outcome; cais_move_<joint>: CAIS of MOVE after the model update
# reward_<joint>: assembled reward used in the TD update
# mobile_speed: mtl divided by the step duration
"""


def write_run_csv(log: RunLog, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(CSV_DOC)
    for key in sorted(log.meta):
        buf.write(f"# {key}={log.meta[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(log.columns())
    w.writerows(log.rows())
    path.write_text(buf.getvalue())


def read_run_csv(path: str | Path) -> RunLog:
    """Parse a CSV written by :func:`write_run_csv`; raises ContractError on malformed input."""
    path = Path(path)
    meta, lines = {}, []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body and " " not in body.split("=", 1)[0]:
                k, v = body.split("=", 1)
                meta[k] = v
        elif line:
            lines.append(line)
    if not lines:
        raise ContractError(f"{path}: no header row")
    reader = csv.reader(lines)
    header = next(reader)
    rows = list(reader)
    try:
        protocol = ProtocolConfig(**json.loads(meta["protocol"]))
        attached_joints = np.array(json.loads(meta["attached_joints"]), dtype=np.int64)
    except (KeyError, ValueError, TypeError) as exc:
        raise ContractError(f"{path}: missing or invalid metadata ({exc})") from None
    log = RunLog.empty(protocol, attached_joints, n=len(rows))
    if header != log.columns():
        raise ContractError(f"{path}: unexpected columns")
    try:
        data = np.array([[float(x) for i, x in enumerate(r) if i != 1] for r in rows])
    except ValueError as exc:
        raise ContractError(f"{path}: non-numeric value ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header) - 1:
        raise ContractError(f"{path}: ragged rows")
    if not np.all(np.isfinite(data)):
        raise ContractError(f"{path}: non-finite values")
    log.phase = [r[1] for r in rows]
    c = 2  # after dropping the phase column: step, attached, ...
    log.attached = data[:, 1].astype(bool)
    for name in ("actions", "p_move", "q_move", "q_no"):
        block = data[:, c : c + N_JOINTS]
        setattr(log, name, block.astype(np.int64) if name == "actions" else block)
        c += N_JOINTS
    log.mtl, log.rtl, log.surprise = data[:, c], data[:, c + 1], data[:, c + 2]
    c += 3
    log.cais_move = data[:, c : c + N_JOINTS]
    c += N_JOINTS
    log.reward = data[:, c : c + N_JOINTS]
    log.mobile_speed = data[:, c + N_JOINTS]
    log.meta = meta
    return log


def _derive_seeds(seed: int) -> tuple[int, np.random.Generator]:
    net_ss, policy_ss = np.random.SeedSequence([seed, 0x5EED]).spawn(2)
    return int(net_ss.generate_state(1)[0]), np.random.default_rng(policy_ss)


def run_experiment(run: RunConfig, seed: int) -> tuple[RunLog, dict]:
    """Execute the full protocol for one seed.

    Returns:
        The per-step log and the per-seed summary metrics.

    Raises:
        NumericalInstabilityError: with the failing step index attached.
    """
    env = MobileEnv(run.env, seed=seed)
    cfg = run.agent
    proto = run.protocol
    net_seed, policy_rng = _derive_seeds(seed)
    spec = NetworkSpec(input_dim=N_JOINTS + run.env.latent_dim, output_dim=2 * N_JOINTS)
    agent = Agent(initialize(spec, net_seed), cfg)
    bank = OutcomeModelBank(run.env.latent_dim, run.model)
    log = RunLog.empty(proto, env.attached_joints)
    forced = {None: None, "no_torque": NO_TORQUE, "move": MOVE}[run.forced_action]

    obs = env.observation
    for t in range(1, proto.total + 1):
        attached = proto.attached(t)
        q, trace = forward(agent.params, obs.vector())
        probs = policy_probs(q, cfg)
        if forced is None:
            actions = select_actions(probs, policy_rng)
        else:
            actions = np.full(N_JOINTS, forced, dtype=np.int64)
        try:
            result = env.step(actions, attached)
        except NumericalInstabilityError as exc:
            exc.step = t
            raise
        nxt = result.observation

        mtl = result.mobile_path_length
        rtl_value = rtl_path(result.latent_checkpoints) if cfg.rtl is RtlKind.PATH else rtl(obs.latent, nxt.latent)
        if run.model.outcome is OutcomeKind.MEAN:
            y = result.latent_mean
        elif run.model.outcome is OutcomeKind.DELTA:
            y = nxt.latent - obs.latent
        else:
            y = nxt.latent
        bank.update(actions, y)
        cais = bank.cais_matrix()
        s = surprise(bank.predict(actions), y)
        reward = assemble_reward(cfg.reward, actions, cais, s, rtl_value, mtl)

        q_next, _ = forward(agent.params, nxt.vector())
        try:
            agent.td_update(trace, q, actions, reward, q_next)
        except NumericalInstabilityError as exc:
            exc.step = t
            raise

        i = t - 1
        log.phase[i] = proto.phase(t)
        log.attached[i] = attached
        log.actions[i] = actions
        log.p_move[i] = probs[:, MOVE]
        qq = q.reshape(-1, 2)
        log.q_move[i] = qq[:, MOVE]
        log.q_no[i] = qq[:, NO_TORQUE]
        log.mtl[i] = mtl
        log.rtl[i] = rtl_value
        log.surprise[i] = s
        log.cais_move[i] = cais[:, MOVE]
        log.reward[i] = reward
        log.mobile_speed[i] = mtl / run.env.step_seconds
        obs = nxt

    log.meta = {
        "condition": run.env.condition.value,
        "reward": cfg.reward.name,
        "seed": seed,
        "protocol": json.dumps(proto.to_dict(), sort_keys=True),
        "attached_joints": json.dumps(env.attached_joints.tolist()),
        "model_updates": bank.update_count,
    }
    return log, summarize_run(log)


# ---------------------------------------------------------------- metrics


def _window(values: np.ndarray, lo: int, hi: int, n: int) -> np.ndarray:
    """Rows for 1-based inclusive steps [lo, hi]."""
    if lo < 1 or hi > n or lo > hi:
        raise ContractError(f"window [{lo}, {hi}] is empty or outside 1..{n}")
    return values[lo - 1 : hi]


def contingency_separation(log: RunLog, window: tuple[int, int] | None = None) -> float:
    """Mean attached-limb p_move minus mean unattached p_move over a step window.

    The default window is the last 300 attached steps (1701-2000 for the standard protocol).
    """
    if window is None:
        window = (log.protocol.attach_end - SEPARATION_WINDOW + 1, log.protocol.attach_end)
    p = _window(log.p_move, *window, log.n_steps)
    mask = np.zeros(p.shape[1], dtype=bool)
    mask[log.attached_joints] = True
    return float(p[:, mask].mean() - p[:, ~mask].mean())


def extinction_burst_index(log: RunLog, window: int = BURST_WINDOW) -> float:
    """Attached-limb p_move just after the tether is removed minus just before it."""
    end = log.protocol.attach_end
    if log.n_steps < end + window:
        raise ContractError(f"run has {log.n_steps} steps; burst index needs {end + window}")
    p = log.p_move[:, log.attached_joints].mean(axis=1)
    after = _window(p, end + 1, end + window, log.n_steps).mean()
    before = _window(p, end - window + 1, end, log.n_steps).mean()
    return float(after - before)


def summarize_run(log: RunLog) -> dict:
    """Per-seed headline metrics of a full-length run."""
    pr = log.protocol
    n = log.n_steps
    mask = np.zeros(N_JOINTS, dtype=bool)
    mask[log.attached_joints] = True
    out = {
        "separation": contingency_separation(log),
        "burst_index": extinction_burst_index(log),
    }
    lo = max(pr.attach_start, pr.attach_end - CAIS_WINDOW + 1)
    cais = _window(log.cais_move, lo, pr.attach_end, n)
    out["cais_attached"] = float(cais[:, mask].mean())
    out["cais_unattached"] = float(cais[:, ~mask].mean())
    out["cais_baseline"] = float(_window(log.cais_move, 1, pr.baseline_steps, n).mean())

    def mean_s(lo, hi):
        return float(_window(log.surprise, lo, hi, n).mean())

    s0 = pr.attach_start
    out["surprise_onset_ratio"] = mean_s(s0, s0 + SURPRISE_ONSET - 1) / max(
        mean_s(max(1, s0 - SURPRISE_REFERENCE), s0 - 1), 1e-300
    )
    e0 = pr.attach_end + 1
    out["surprise_extinction_ratio"] = mean_s(e0, e0 + SURPRISE_ONSET - 1) / max(
        mean_s(max(1, e0 - SURPRISE_REFERENCE), e0 - 1), 1e-300
    )
    reward = log.reward.mean(axis=1)
    for phase in PHASES:
        sel = np.array([p == phase for p in log.phase])
        out[f"reward_{phase}"] = float(reward[sel].mean()) if sel.any() else float("nan")
    return out


def aggregate(per_seed: list[dict]) -> dict:
    """Mean and sample standard deviation (n-1) of every metric across seeds."""
    if not per_seed:
        raise ContractError("aggregate needs at least one seed")
    keys = per_seed[0].keys()
    out = {}
    for k in keys:
        vals = np.array([d[k] for d in per_seed], dtype=float)
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[k] = {"mean": float(vals.mean()), "std": std, "n": int(vals.size), "values": vals.tolist()}
    return out


# ---------------------------------------------------------------- sweeps


def cell_config(run: RunConfig, condition: Condition | str, reward: str | RewardSpec) -> RunConfig:
    """Copy of ``run`` with the condition and reward replaced."""
    if isinstance(condition, str):
        condition = CONDITION_KEYS.get(condition.lower(), condition)
    env = replace(run.env, condition=condition)
    if isinstance(reward, str):
        base = run.agent.reward
        overrides = {"surprise_weight": base.surprise_weight}
        reward = RewardSpec.from_name(reward, **overrides)
    agent = replace(run.agent, reward=reward)
    return replace(run, env=env, agent=agent)


def condition_key(condition: Condition) -> str:
    return {Condition.FREE: "free", Condition.NOISY: "noisy"}[condition]


def run_path(outdir: str | Path, run: RunConfig, seed: int) -> Path:
    return Path(outdir) / condition_key(run.env.condition) / run.agent.reward.name / f"{seed}.csv"


def _run_cell(args):
    run, seed, outdir = args
    t0 = time.perf_counter()
    try:
        log, summary = run_experiment(run, seed)
    except (NumericalInstabilityError, ContractError) as exc:
        return run.env.condition, run.agent.reward.name, seed, None, str(exc), time.perf_counter() - t0
    elapsed = time.perf_counter() - t0
    if outdir is not None:
        write_run_csv(log, run_path(outdir, run, seed))
    return run.env.condition, run.agent.reward.name, seed, summary, None, elapsed


@dataclass
class SweepResult:
    summaries: dict  # (condition_key, reward) -> list of per-seed summary dicts
    failures: list  # (condition_key, reward, seed, message)
    # (condition_key, reward, seed) -> wall-clock seconds of run_experiment
    timings: dict = field(default_factory=dict)

    def stats(self) -> dict:
        return {cell: aggregate(s) for cell, s in self.summaries.items() if s}


def sweep(
    run: RunConfig,
    conditions: list[str],
    rewards: list[str],
    seeds: list[int] | None = None,
    jobs: int | None = None,
    outdir: str | Path | None = None,
) -> SweepResult:
    """Run every (condition, reward, seed) cell, in parallel when ``jobs > 1``."""
    seeds = list(run.seeds if seeds is None else seeds)
    cells = [(cell_config(run, c, r), s, outdir) for c in conditions for r in rewards for s in seeds]
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1:
        results = [_run_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    summaries: dict = {}
    failures = []
    timings = {}
    for cond, reward, seed, summary, err, elapsed in results:
        key = (condition_key(cond), reward)
        summaries.setdefault(key, [])
        timings[(*key, seed)] = elapsed
        if err is None:
            summaries[key].append(summary)
        else:
            failures.append((key[0], reward, seed, err))
    result = SweepResult(summaries, failures, timings)
    if outdir is not None:
        write_summary_csv(result.stats(), Path(outdir) / "summary.csv")
        write_manifest(run, Path(outdir) / "manifest.json", conditions=conditions, rewards=rewards, seeds=seeds)
    return result


def write_summary_csv(stats: dict, path: str | Path, thresholds: dict | None = None) -> None:
    """One row per (condition, reward, metric) with mean, std, seed count and per-seed values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write("# cais-lab summary: mean and sample std (n-1) over seeds\n")
    buf.write("# values lists the per-seed numbers in seed order, separated by ';'\n")
    buf.write("# metric separation_pass holds per-seed flags (1 if separation > 0.15)\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "reward", "metric", "mean", "std", "n_seeds", "values"])
    for (cond, reward), metrics in sorted(stats.items()):
        for name, m in metrics.items():
            w.writerow([cond, reward, name, _fmt(m["mean"]), _fmt(m["std"]), m["n"], ";".join(_fmt(v) for v in m["values"])])
        if "separation" in metrics:
            flags = [1.0 if v > 0.15 else 0.0 for v in metrics["separation"]["values"]]
            w.writerow([cond, reward, "separation_pass", _fmt(np.mean(flags)), "", len(flags), ";".join(str(int(f)) for f in flags)])
    path.write_text(buf.getvalue())


def write_manifest(run: RunConfig, path: str | Path, **extra) -> None:
    """Fully resolved configuration plus the code version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, "config": run.to_dict()}
    doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
