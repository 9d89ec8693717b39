"""Constructors for synthetic run logs used by several test modules."""

from __future__ import annotations

import json

import numpy as np

from cais_lab.env import N_JOINTS
from cais_lab.harness import ProtocolConfig, RunLog

ATTACHED = np.array([8, 9, 10])


def make_log(protocol=None, p_att=0.5, p_un=0.5, attached_joints=ATTACHED, seed=0) -> RunLog:
    """A log whose MOVE probabilities follow the given per-step arrays or constants."""
    protocol = protocol or ProtocolConfig()
    n = protocol.total
    log = RunLog.empty(protocol, attached_joints)
    mask = np.zeros(N_JOINTS, dtype=bool)
    mask[attached_joints] = True
    p_att = np.broadcast_to(np.asarray(p_att, dtype=float), (n,))
    p_un = np.broadcast_to(np.asarray(p_un, dtype=float), (n,))
    log.p_move[:, mask] = p_att[:, None]
    log.p_move[:, ~mask] = p_un[:, None]
    for t in range(1, n + 1):
        log.phase[t - 1] = protocol.phase(t)
        log.attached[t - 1] = protocol.attached(t)
    r = np.random.default_rng(seed)
    log.surprise[:] = 0.1 + 0.01 * r.random(n)
    log.cais_move[:] = 0.01
    log.reward[:] = 0.5
    log.meta = {
        "condition": "FreeMobile",
        "reward": "cais",
        "seed": seed,
        "protocol": json.dumps(protocol.to_dict(), sort_keys=True),
        "attached_joints": json.dumps([int(j) for j in attached_joints]),
        "model_updates": n,
    }
    return log
