"""Greedy evaluation of trained nets."""

from __future__ import annotations

import numpy as np

from .core import MacroEnv, MacroExecutor
from .learners import AgentNets, Policy


def eval_mode(nets: AgentNets) -> str:
    """Decentralized execution unless only a joint net exists."""
    return "decentralized" if nets.dec else "centralized"


def evaluate_policy(nets, env: MacroEnv, gamma: float = 0.98, episodes: int = 1,
                    seed: int = 0) -> float:
    """Mean of sum_t gamma^t r_t over greedy episodes.

    ``nets`` is an :class:`AgentNets` or any policy object with ``reset``,
    ``observe`` and ``select`` (e.g. a scripted policy).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    policy = Policy(nets, eval_mode(nets)) if isinstance(nets, AgentNets) else nets
    rng = np.random.default_rng(seed)
    ex = MacroExecutor(env, gamma)
    total = 0.0
    for k in range(episodes):
        policy.reset(ex.reset(seed + k))
        while True:
            actions = policy.select(ex.pending, ex.running, 0.0, rng)
            record, done = ex.run_until_any_termination(actions)
            if done:
                break
            policy.observe(record)
        total += ex.discounted_return
    return total / episodes
