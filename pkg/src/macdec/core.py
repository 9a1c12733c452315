"""Macro-action environment contract and the asynchronous executor.

An environment advances in primitive ticks. Each agent runs one macro-action
at a time; the executor keeps ticking until at least one agent's macro-action
terminates (a *boundary*), then emits a :class:`JointStepRecord` holding the
joint view (all agents, joint accumulated reward since the previous boundary)
and the per-agent view (each agent's reward accumulated since its own
macro-action began).  Only agents whose macro-action terminated receive a new
macro-observation; everybody else keeps their last one.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

Obs = tuple[int, ...]


class ContractViolation(ValueError):
    """Raised when the caller breaks the executor's action protocol."""


@dataclass(frozen=True)
class EnvSpec:
    """Static description of a macro-action environment.

    ``obs_cards[i]`` lists the cardinality of every categorical feature in
    agent ``i``'s macro-observation.  Encoded inputs are one-hot per feature.
    """

    name: str
    n_actions: tuple[int, ...]
    obs_cards: tuple[tuple[int, ...], ...]
    horizon: int
    action_names: tuple[tuple[str, ...], ...] = ()

    @property
    def n_agents(self) -> int:
        return len(self.n_actions)

    @property
    def n_joint(self) -> int:
        return math.prod(self.n_actions)

    def obs_dim(self, agent: int) -> int:
        return sum(self.obs_cards[agent])

    def input_dim(self, agent: int) -> int:
        """Width of the decentralized net input: one-hot obs + one-hot prev action."""
        return self.obs_dim(agent) + self.n_actions[agent]

    @property
    def joint_input_dim(self) -> int:
        return sum(self.input_dim(i) for i in range(self.n_agents))

    @cached_property
    def joint_table(self) -> np.ndarray:
        """(n_joint, n_agents) component table, row-major in agent order."""
        grids = np.meshgrid(*[np.arange(n) for n in self.n_actions], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def joint_index(self, actions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(a) for a in actions), self.n_actions))

    def validate_obs(self, agent: int, obs: Obs) -> None:
        cards = self.obs_cards[agent]
        if len(obs) != len(cards):
            raise ValueError(f"agent {agent}: obs has {len(obs)} features, expected {len(cards)}")
        for k, (v, c) in enumerate(zip(obs, cards)):
            if not 0 <= v < c:
                raise ValueError(f"agent {agent}: feature {k}={v} outside [0, {c})")

    def encode(self, agent: int, obs: Obs, prev_action: int | None) -> np.ndarray:
        """One-hot observation followed by one-hot previous action (zeros if none)."""
        x = np.zeros(self.input_dim(agent))
        offset = 0
        for v, c in zip(obs, self.obs_cards[agent]):
            x[offset + v] = 1.0
            offset += c
        if prev_action is not None:
            x[offset + prev_action] = 1.0
        return x

    def encode_joint(self, obs: Sequence[Obs], prev_actions: Sequence[int | None]) -> np.ndarray:
        return np.concatenate(
            [self.encode(i, obs[i], prev_actions[i]) for i in range(self.n_agents)]
        )


@dataclass(frozen=True)
class TickResult:
    reward: float
    terminated: tuple[bool, ...]
    terminal: bool


class MacroEnv(ABC):
    """A domain whose agents act through temporally extended macro-actions.

    Implementations own the primitive state and the low-level controllers.
    The executor drives them through :meth:`begin` / :meth:`tick`.
    """

    spec: EnvSpec

    @property
    @abstractmethod
    def clock(self) -> int: ...

    @abstractmethod
    def reset(self, seed: int | None = None) -> list[Obs]:
        """Restore the initial state; return every agent's first macro-observation."""

    @abstractmethod
    def begin(self, agent: int, action: int) -> None:
        """Start ``action`` as ``agent``'s running macro-action at the current clock."""

    @abstractmethod
    def tick(self) -> TickResult:
        """Advance one primitive step of every running controller."""

    @abstractmethod
    def observe(self, agent: int) -> Obs:
        """Macro-observation of ``agent`` at the current clock."""

    def render(self) -> str:
        return ""


def accumulate_reward(rewards: Sequence[float], gamma: float) -> float:
    """Discounted sum ``sum_k gamma**k * r_k`` of one macro-action's rewards."""
    if len(rewards) == 0:
        raise ValueError("cannot accumulate an empty reward sequence")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    total = 0.0
    disc = 1.0
    for r in rewards:
        total += disc * r
        disc *= gamma
    return total


@dataclass(frozen=True)
class JointStepRecord:
    """Everything that happened between two consecutive boundaries.

    ``obs[i]`` is the macro-observation on which agent ``i`` chose
    ``actions[i]``; for agents that did not terminate, ``next_obs[i]`` repeats
    it.  ``rewards[i]`` and ``durations[i]`` run from the start of agent
    ``i``'s macro-action; ``joint_reward`` and ``gap`` from the previous
    boundary.
    """

    obs: tuple[Obs, ...]
    actions: tuple[int, ...]
    next_obs: tuple[Obs, ...]
    rewards: tuple[float, ...]
    durations: tuple[int, ...]
    terminated: tuple[bool, ...]
    joint_reward: float
    gap: int
    boundary_time: int
    terminal: bool = False
    truncated: bool = False

    @property
    def undone_mask(self) -> tuple[bool, ...]:
        return tuple(not t for t in self.terminated)

    def to_dict(self) -> dict:
        return {
            "obs": [list(o) for o in self.obs],
            "actions": list(self.actions),
            "next_obs": [list(o) for o in self.next_obs],
            "rewards": list(self.rewards),
            "durations": list(self.durations),
            "terminated": list(self.terminated),
            "joint_reward": self.joint_reward,
            "gap": self.gap,
            "boundary_time": self.boundary_time,
            "terminal": self.terminal,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "JointStepRecord":
        return cls(
            obs=tuple(tuple(o) for o in d["obs"]),
            actions=tuple(d["actions"]),
            next_obs=tuple(tuple(o) for o in d["next_obs"]),
            rewards=tuple(float(r) for r in d["rewards"]),
            durations=tuple(d["durations"]),
            terminated=tuple(bool(t) for t in d["terminated"]),
            joint_reward=float(d["joint_reward"]),
            gap=int(d["gap"]),
            boundary_time=int(d["boundary_time"]),
            terminal=bool(d["terminal"]),
            truncated=bool(d["truncated"]),
        )


@dataclass
class _AgentSlot:
    obs: Obs
    action: int | None = None
    start: int = 0
    reward: float = 0.0


@dataclass
class MacroExecutor:
    """Drives a :class:`MacroEnv` from boundary to boundary.

    With ``plain_sum=True`` rewards are accumulated without within-macro
    discounting, as in the literal plain-sum definition of the accumulated
    reward.
    """

    env: MacroEnv
    gamma: float = 0.98
    plain_sum: bool = False
    slots: list[_AgentSlot] = field(default_factory=list, init=False)
    pending: set[int] = field(default_factory=set, init=False)
    done: bool = field(default=True, init=False)
    last_boundary: int = field(default=0, init=False)
    discounted_return: float = field(default=0.0, init=False)
    undiscounted_return: float = field(default=0.0, init=False)

    @property
    def spec(self) -> EnvSpec:
        return self.env.spec

    @property
    def acc_gamma(self) -> float:
        return 1.0 if self.plain_sum else self.gamma

    def reset(self, seed: int | None = None) -> list[Obs]:
        obs = self.env.reset(seed)
        for i, o in enumerate(obs):
            self.spec.validate_obs(i, o)
        self.slots = [_AgentSlot(obs=o) for o in obs]
        self.pending = set(range(self.spec.n_agents))
        self.done = False
        self.last_boundary = 0
        self.discounted_return = 0.0
        self.undiscounted_return = 0.0
        return list(obs)

    @property
    def running(self) -> tuple[int | None, ...]:
        return tuple(s.action for s in self.slots)

    def run_until_any_termination(
        self, new_actions: Mapping[int, int]
    ) -> tuple[JointStepRecord, bool]:
        """Start ``new_actions`` and tick until some macro-action terminates."""
        if self.done:
            raise ContractViolation("episode finished; call reset() first")
        given = set(new_actions)
        if given - self.pending:
            raise ContractViolation(
                f"actions supplied for busy agents {sorted(given - self.pending)}"
            )
        if self.pending - given:
            raise ContractViolation(
                f"missing actions for free agents {sorted(self.pending - given)}"
            )
        env = self.env
        for i in sorted(new_actions):
            a = int(new_actions[i])
            if not 0 <= a < self.spec.n_actions[i]:
                raise ContractViolation(f"agent {i}: action {a} out of range")
            slot = self.slots[i]
            slot.action = a
            slot.start = env.clock
            slot.reward = 0.0
            env.begin(i, a)

        g = self.acc_gamma
        joint = 0.0
        start = self.last_boundary
        while True:
            t = env.clock
            res = env.tick()
            r = float(res.reward)
            self.discounted_return += self.gamma ** t * r
            self.undiscounted_return += r
            joint += g ** (t - start) * r
            for s in self.slots:
                s.reward += g ** (t - s.start) * r
            terminated = res.terminated
            now = env.clock
            truncated = not res.terminal and now >= self.spec.horizon
            if res.terminal or truncated:
                terminated = (True,) * self.spec.n_agents
            if any(terminated):
                break

        next_obs = []
        for i, s in enumerate(self.slots):
            if terminated[i]:
                o = env.observe(i)
                self.spec.validate_obs(i, o)
                next_obs.append(o)
            else:
                next_obs.append(s.obs)
        record = JointStepRecord(
            obs=tuple(s.obs for s in self.slots),
            actions=tuple(s.action for s in self.slots),
            next_obs=tuple(next_obs),
            rewards=tuple(s.reward for s in self.slots),
            durations=tuple(now - s.start for s in self.slots),
            terminated=tuple(bool(x) for x in terminated),
            joint_reward=joint,
            gap=now - start,
            boundary_time=now,
            terminal=bool(res.terminal),
            truncated=truncated,
        )
        for i, s in enumerate(self.slots):
            if terminated[i]:
                s.obs = next_obs[i]
        self.pending = {i for i, t in enumerate(terminated) if t}
        self.last_boundary = now
        self.done = res.terminal or truncated
        return record, self.done
