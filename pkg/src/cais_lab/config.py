"""JSON run configuration: parsing, validation, flag overrides and manifests.

A config document looks like::

    {
      "env": {"condition": "noisy", ...},
      "agent": {"temperature": 0.3, "reward": {"base": "cais", "add_surprise": true}},
      "model": {"kappa": 0.01},
      "protocol": {"baseline_steps": 500, "attached_steps": 1500, "extinction_steps": 500},
      "seeds": 10,
      "out": "results",
      "sweep": {"conditions": ["free", "noisy"], "rewards": ["mtl", "cais"]}
    }

Every section and key is optional; absent values take the package defaults.
A manifest written by a run or sweep is itself a valid config document.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .agent import AgentConfig, RewardSpec
from .env import EnvConfig
from .errors import ConfigError
from .harness import CONDITION_KEYS, REWARD_NAMES, ProtocolConfig, RunConfig
from .outcome import OutcomeConfig

SECTIONS = {"env": EnvConfig, "agent": AgentConfig, "model": OutcomeConfig, "protocol": ProtocolConfig}
TOP_LEVEL = set(SECTIONS) | {"seeds", "out", "forced_action", "sweep"}
SWEEP_KEYS = {"conditions", "rewards", "seeds"}


@dataclass
class SweepGrid:
    """Cells of a sweep: conditions x reward names x seeds."""

    conditions: list[str]
    rewards: list[str]
    seeds: list[int]

    def __post_init__(self):
        for c in self.conditions:
            if c not in CONDITION_KEYS:
                raise ConfigError("sweep.conditions", f"unknown condition {c!r}; choose from {sorted(CONDITION_KEYS)}")
        for r in self.rewards:
            RewardSpec.from_name(r)
        if not self.conditions or not self.rewards:
            raise ConfigError("sweep", "conditions and rewards must be non-empty")

    @property
    def n_cells(self) -> int:
        return len(self.conditions) * len(self.rewards) * len(self.seeds)


def load_document(path: str | Path) -> dict:
    """Read a JSON config or manifest file as a plain config document."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config file ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return unwrap_manifest(doc)


def unwrap_manifest(doc: Any) -> dict:
    """Turn a manifest (``{"version", "config", ...}``) back into a config document."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", f"expected a JSON object, got {type(doc).__name__}")
    if "config" in doc and "version" in doc:
        inner = copy.deepcopy(doc["config"])
        if not isinstance(inner, dict):
            raise ConfigError("config", "manifest config must be an object")
        grid = {k: doc[k] for k in SWEEP_KEYS if k in doc and k != "seeds"}
        if grid:
            inner["sweep"] = grid
        return inner
    return doc


def apply_overrides(doc: dict, overrides: dict[str, Any] | None) -> dict:
    """Return a copy of ``doc`` with dotted-path overrides such as ``agent.temperature`` applied."""
    doc = copy.deepcopy(doc)
    for dotted, value in (overrides or {}).items():
        keys = dotted.split(".")
        node = doc
        for i, k in enumerate(keys[:-1]):
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise ConfigError(".".join(keys[: i + 1]), "cannot override inside a non-object value")
            node = child
        node[keys[-1]] = value
    return doc


def _expected_kind(default) -> str | None:
    if isinstance(default, bool):
        return "boolean"
    if isinstance(default, enum.Enum) or isinstance(default, str):
        return "string"
    if isinstance(default, int):
        return "integer"
    if isinstance(default, float):
        return "number"
    return None


def _matches(kind: str, value) -> bool:
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "string":
        return isinstance(value, str)
    if kind == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_section(path: str, cls, data, skip: tuple[str, ...] = ()) -> dict:
    """Reject unknown keys and primitive type mismatches before the dataclass validates ranges."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}", f"unknown key; valid keys are {sorted(fields)}")
        if key in skip:
            continue
        f = fields[key]
        if f.default is not dataclasses.MISSING:
            kind = _expected_kind(f.default)
            if kind is not None and not _matches(kind, value):
                raise ConfigError(f"{path}.{key}", f"expected {kind}, got {type(value).__name__} {value!r}")
    return data


def _seeds(value, path: str = "seeds") -> list[int]:
    if isinstance(value, int) and not isinstance(value, bool):
        if value < 1:
            raise ConfigError(path, f"seed count must be >= 1, got {value}")
        return list(range(value))
    if isinstance(value, list) and all(isinstance(s, int) and not isinstance(s, bool) for s in value):
        return list(value)
    raise ConfigError(path, f"expected a seed count or a list of integers, got {value!r}")


def build_run_config(doc: dict) -> RunConfig:
    """Construct a validated :class:`RunConfig` from a config document."""
    doc = unwrap_manifest(doc)
    for key in doc:
        if key not in TOP_LEVEL:
            raise ConfigError(key, f"unknown key; valid top-level keys are {sorted(TOP_LEVEL)}")

    env = EnvConfig(**_check_section("env", EnvConfig, doc.get("env", {})))
    agent_doc = dict(_check_section("agent", AgentConfig, doc.get("agent", {}), skip=("reward",)))
    reward_doc = agent_doc.pop("reward", {})
    reward_doc = _check_section("agent.reward", RewardSpec, reward_doc, skip=("base_scale",))
    if "base_scale" in reward_doc and reward_doc["base_scale"] is not None and not _matches("number", reward_doc["base_scale"]):
        raise ConfigError("agent.reward.base_scale", f"expected number or null, got {reward_doc['base_scale']!r}")
    agent = AgentConfig(reward=RewardSpec(**reward_doc), **agent_doc)
    model = OutcomeConfig(**_check_section("model", OutcomeConfig, doc.get("model", {})))
    protocol = ProtocolConfig(**_check_section("protocol", ProtocolConfig, doc.get("protocol", {})))

    kwargs: dict[str, Any] = {"env": env, "agent": agent, "model": model, "protocol": protocol}
    if "seeds" in doc:
        kwargs["seeds"] = _seeds(doc["seeds"])
    if doc.get("out") is not None:
        if not isinstance(doc["out"], str):
            raise ConfigError("out", f"expected a path string, got {doc['out']!r}")
        kwargs["out"] = doc["out"]
    if "forced_action" in doc:
        kwargs["forced_action"] = doc["forced_action"]
    return RunConfig(**kwargs)


def build_sweep_grid(doc: dict, run: RunConfig) -> SweepGrid:
    """Sweep cells from the optional ``sweep`` section; defaults cover the full grid."""
    section = doc.get("sweep", {})
    if not isinstance(section, dict):
        raise ConfigError("sweep", f"expected an object, got {type(section).__name__}")
    for key in section:
        if key not in SWEEP_KEYS:
            raise ConfigError(f"sweep.{key}", f"unknown key; valid keys are {sorted(SWEEP_KEYS)}")
    conditions = section.get("conditions", list(CONDITION_KEYS))
    rewards = section.get("rewards", list(REWARD_NAMES))
    for name, value in (("conditions", conditions), ("rewards", rewards)):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"sweep.{name}", f"expected a list of strings, got {value!r}")
    seeds = _seeds(section["seeds"], "sweep.seeds") if "seeds" in section else list(run.seeds)
    return SweepGrid([c.lower() for c in conditions], [r.lower() for r in rewards], seeds)


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load a config file (or defaults when ``path`` is None) and apply flag overrides.

    Raises:
        ConfigError: naming the offending key path.
    """
    doc = load_document(path) if path is not None else {}
    return build_run_config(apply_overrides(doc, overrides))


def parse_sweep(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> tuple[RunConfig, SweepGrid]:
    """Like :func:`parse_config` but also returns the sweep grid."""
    doc = load_document(path) if path is not None else {}
    doc = apply_overrides(doc, overrides)
    run = build_run_config(doc)
    return run, build_sweep_grid(doc, run)
