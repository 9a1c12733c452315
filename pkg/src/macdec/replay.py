"""Episodic replay of joint macro-action experience.

One buffer of :class:`JointStepRecord` episodes serves both views:

* joint view: every boundary is a training sample for the centralized net;
* per-agent view: agent ``i`` learns only at boundaries where its own
  macro-action terminated, and its recurrent state is held in between.

Sequences stay aligned on joint boundaries so centralized and decentralized
values can be read at the same index.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import EnvSpec, JointStepRecord


@dataclass
class EpisodeRecord:
    records: list[JointStepRecord]
    source: str = ""

    def __post_init__(self):
        if not self.records:
            raise ValueError("episode has no boundaries")
        times = [r.boundary_time for r in self.records]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("boundary times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def terminal(self) -> bool:
        return self.records[-1].terminal

    def to_dict(self) -> dict:
        return {"source": self.source, "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        return cls([JointStepRecord.from_dict(r) for r in d["records"]], d.get("source", ""))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class _Encoded:
    """Per-episode arrays, built once at insertion."""

    dec_inputs: list[np.ndarray]  # (K+1, in_i)
    advance: np.ndarray  # (K+1, n)
    joint_inputs: np.ndarray  # (K+1, joint_in)
    actions: np.ndarray  # (K, n)
    rewards: np.ndarray  # (K, n)
    durations: np.ndarray  # (K, n)
    terminated: np.ndarray  # (K, n)
    joint_reward: np.ndarray  # (K,)
    gap: np.ndarray  # (K,)
    terminal: np.ndarray  # (K,)


def encode_episode(spec: EnvSpec, episode: EpisodeRecord) -> _Encoded:
    recs = episode.records
    n = spec.n_agents
    K = len(recs)
    first = recs[0]
    dec = [np.zeros((K + 1, spec.input_dim(i))) for i in range(n)]
    advance = np.zeros((K + 1, n), dtype=bool)
    advance[0] = True
    for i in range(n):
        dec[i][0] = spec.encode(i, first.obs[i], None)
    joint = np.zeros((K + 1, spec.joint_input_dim))
    joint[0] = spec.encode_joint(first.obs, [None] * n)
    for k, r in enumerate(recs):
        for i in range(n):
            if r.terminated[i]:
                dec[i][k + 1] = spec.encode(i, r.next_obs[i], r.actions[i])
                advance[k + 1, i] = True
        joint[k + 1] = spec.encode_joint(r.next_obs, r.actions)
    return _Encoded(
        dec_inputs=dec,
        advance=advance,
        joint_inputs=joint,
        actions=np.array([r.actions for r in recs], dtype=np.int64),
        rewards=np.array([r.rewards for r in recs], dtype=float),
        durations=np.array([r.durations for r in recs], dtype=float),
        terminated=np.array([r.terminated for r in recs], dtype=bool),
        joint_reward=np.array([r.joint_reward for r in recs], dtype=float),
        gap=np.array([r.gap for r in recs], dtype=float),
        terminal=np.array([r.terminal for r in recs], dtype=bool),
    )


@dataclass
class Batch:
    """Padded, time-major mini-batch.

    Input sequences have ``T + 1`` steps (history before each boundary plus
    the one after the last); per-boundary arrays have ``T``.
    """

    dec_inputs: list[np.ndarray]  # (T+1, B, in_i)
    hold: list[np.ndarray]  # (T+1, B)
    joint_inputs: np.ndarray  # (T+1, B, joint_in)
    actions: np.ndarray  # (T, B, n)
    joint_actions: np.ndarray  # (T, B)
    rewards: np.ndarray  # (T, B, n)
    durations: np.ndarray  # (T, B, n)
    terminated: np.ndarray  # (T, B, n), False on padding
    undone: np.ndarray  # (T, B, n), False on padding
    valid: np.ndarray  # (T, B)
    joint_reward: np.ndarray  # (T, B)
    gap: np.ndarray  # (T, B)
    terminal: np.ndarray  # (T, B)
    lengths: np.ndarray  # (B,)
    sources: list[str] = field(default_factory=list)
    indices: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.valid.shape[0]

    @property
    def B(self) -> int:
        return self.valid.shape[1]

    def agent_mask(self, i: int) -> np.ndarray:
        return self.terminated[:, :, i]


def collate(spec: EnvSpec, encoded: Sequence[_Encoded], sources: Sequence[str] = ()) -> Batch:
    n = spec.n_agents
    B = len(encoded)
    lengths = np.array([e.actions.shape[0] for e in encoded])
    T = int(lengths.max())
    dec = [np.zeros((T + 1, B, spec.input_dim(i))) for i in range(n)]
    hold = [np.zeros((T + 1, B), dtype=bool) for _ in range(n)]
    joint = np.zeros((T + 1, B, spec.joint_input_dim))
    actions = np.zeros((T, B, n), dtype=np.int64)
    rewards = np.zeros((T, B, n))
    durations = np.ones((T, B, n))
    terminated = np.zeros((T, B, n), dtype=bool)
    valid = np.zeros((T, B), dtype=bool)
    joint_reward = np.zeros((T, B))
    gap = np.ones((T, B))
    terminal = np.zeros((T, B), dtype=bool)
    for b, e in enumerate(encoded):
        K = e.actions.shape[0]
        for i in range(n):
            dec[i][:K + 1, b] = e.dec_inputs[i]
            hold[i][:K + 1, b] = ~e.advance[:, i]
        joint[:K + 1, b] = e.joint_inputs
        actions[:K, b] = e.actions
        rewards[:K, b] = e.rewards
        durations[:K, b] = e.durations
        terminated[:K, b] = e.terminated
        valid[:K, b] = True
        joint_reward[:K, b] = e.joint_reward
        gap[:K, b] = e.gap
        terminal[:K, b] = e.terminal
    undone = ~terminated & valid[:, :, None]
    joint_actions = np.ravel_multi_index(
        tuple(actions[..., i] for i in range(n)), spec.n_actions
    )
    return Batch(
        dec_inputs=dec, hold=hold, joint_inputs=joint, actions=actions,
        joint_actions=joint_actions, rewards=rewards, durations=durations,
        terminated=terminated, undone=undone, valid=valid, joint_reward=joint_reward,
        gap=gap, terminal=terminal, lengths=lengths, sources=list(sources),
    )


class ReplayBuffer:
    """FIFO store of whole episodes, sampled uniformly with replacement."""

    def __init__(self, spec: EnvSpec, capacity: int = 1000, name: str = ""):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.spec = spec
        self.capacity = capacity
        self.name = name
        self.episodes: deque[EpisodeRecord] = deque(maxlen=capacity)
        self._encoded: deque[_Encoded] = deque(maxlen=capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return len(self.episodes)

    def push_episode(self, episode: EpisodeRecord | Iterable[JointStepRecord]) -> "ReplayBuffer":
        if not isinstance(episode, EpisodeRecord):
            episode = EpisodeRecord(list(episode), source=self.name)
        self.episodes.append(episode)
        self._encoded.append(encode_episode(self.spec, episode))
        self.inserted += 1
        return self

    def sample_minibatch(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if not self.episodes:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(len(self.episodes), size=batch_size)
        batch = collate(
            self.spec,
            [self._encoded[k] for k in idx],
            [self.episodes[k].source or self.name for k in idx],
        )
        batch.indices = idx
        return batch

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for ep in self.episodes:
                fh.write(json.dumps(ep.to_dict(), sort_keys=True) + "\n")

    def load(self, path: str | Path) -> "ReplayBuffer":
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    self.push_episode(EpisodeRecord.from_dict(json.loads(line)))
        return self
