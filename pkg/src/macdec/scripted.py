"""Hand-written joint policies used as oracles and for debugging traces."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import JointStepRecord, MacroEnv, MacroExecutor, Obs
from .envs import boxpushing as bp
from .envs import warehouse as wtd


class ScriptedPolicy:
    """Each agent walks through its own action list.

    ``cycle[i]`` repeats agent ``i``'s list forever; otherwise the agent
    falls back to ``fallback[i]`` once the list is exhausted.
    """

    def __init__(self, sequences: Sequence[Sequence[int]], cycle: Sequence[bool] | None = None,
                 fallback: Sequence[int | None] | None = None):
        self.sequences = [list(s) for s in sequences]
        n = len(self.sequences)
        self.cycle = list(cycle) if cycle is not None else [False] * n
        self.fallback = list(fallback) if fallback is not None else [None] * n
        self.cursor = [0] * n

    def reset(self, obs: Sequence[Obs]) -> None:
        self.cursor = [0] * len(self.sequences)

    def observe(self, record: JointStepRecord) -> None:
        pass

    def next_action(self, agent: int) -> int:
        seq, k = self.sequences[agent], self.cursor[agent]
        self.cursor[agent] += 1
        if self.cycle[agent]:
            return seq[k % len(seq)]
        if k < len(seq):
            return seq[k]
        if self.fallback[agent] is None:
            raise IndexError(f"agent {agent} ran out of scripted actions")
        return self.fallback[agent]

    def select(self, free, running, epsilon: float = 0.0, rng=None) -> dict[int, int]:
        return {i: self.next_action(i) for i in sorted(free)}


def bp_big_box_script() -> ScriptedPolicy:
    """Both robots go under the big box, then push it together."""
    return ScriptedPolicy([[bp.MOVE_BIG], [bp.MOVE_BIG]], fallback=[bp.PUSH, bp.PUSH])


def bp_small_box_script() -> ScriptedPolicy:
    """Robot 0 pushes its small box; robot 1 stays put."""
    return ScriptedPolicy([[bp.MOVE_SMALL], [bp.STAY]], cycle=[False, True],
                          fallback=[bp.PUSH, None])


def bp_stay_script() -> ScriptedPolicy:
    return ScriptedPolicy([[bp.STAY], [bp.STAY]], cycle=[True, True])


def wtd_script() -> ScriptedPolicy:
    """Gray searches and passes tools in order; mobiles alternate fetching and delivering.

    Mobile 1 starts on the delivery leg so the two mobiles reach the table in turn.
    """
    gray = [wtd.SEARCH_1, wtd.PASS_0, wtd.SEARCH_2, wtd.SEARCH_3, wtd.PASS_1, wtd.PASS_0]
    return ScriptedPolicy(
        [[wtd.GET_TOOL, wtd.GO_WS], [wtd.GO_WS, wtd.GET_TOOL], gray],
        cycle=[True, True, False],
        fallback=[None, None, wtd.WAIT_M],
    )


def rollout(env: MacroEnv, policy, gamma: float = 0.98, seed: int | None = None,
            plain_sum: bool = False, epsilon: float = 0.0,
            rng: np.random.Generator | None = None) -> tuple[list[JointStepRecord], MacroExecutor]:
    """Play one episode; returns its records and the executor (for the returns)."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    ex = MacroExecutor(env, gamma, plain_sum)
    policy.reset(ex.reset(seed))
    records = []
    while True:
        actions = policy.select(ex.pending, ex.running, epsilon, rng)
        record, done = ex.run_until_any_termination(actions)
        records.append(record)
        if done:
            return records, ex
        policy.observe(record)
