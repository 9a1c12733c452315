"""Value targets, gradient updates, exploration and training loops.

Four learners share this module:

``dec_hddrqn``
    each agent trains its own recurrent Q-net with a double-Q target and
    hysteretic down-weighting of negative TD errors;
``cen_ddrqn``
    one joint Q-net over the product macro-action space, trained with a
    double-Q target whose argmax keeps still-running agents' actions fixed;
``macdec_maddrqn`` (+ ``_regular_double_q`` ablation)
    joint and per-agent nets trained together; each agent's target picks
    its next action from the joint net's (conditional) argmax and values it
    with the agent's own target net;
``parallel_macdec_maddrqn``
    the same updates fed by two environments, one explored through the
    joint net and one through the per-agent nets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import LearnerConfig
from .core import EnvSpec, JointStepRecord, MacroEnv, MacroExecutor, Obs
from .nn import Adam, RecurrentQNet
from .replay import Batch, EpisodeRecord, ReplayBuffer

USES_CEN = {"cen_ddrqn", "macdec_maddrqn", "parallel_macdec_maddrqn",
            "macdec_maddrqn_regular_double_q"}
USES_DEC = {"dec_hddrqn", "macdec_maddrqn", "parallel_macdec_maddrqn",
            "macdec_maddrqn_regular_double_q"}


@dataclass
class AgentNets:
    spec: EnvSpec
    cen: RecurrentQNet | None = None
    cen_target: RecurrentQNet | None = None
    cen_opt: Adam | None = None
    dec: list[RecurrentQNet] = field(default_factory=list)
    dec_target: list[RecurrentQNet] = field(default_factory=list)
    dec_opt: list[Adam] = field(default_factory=list)
    cen_updates: int = 0
    dec_updates: list[int] = field(default_factory=list)
    # (net, batch sources, update counter) per gradient step when not None
    trace: list | None = None

    def update_targets(self) -> None:
        if self.cen is not None:
            self.cen_target.copy_from(self.cen)
        for net, tgt in zip(self.dec, self.dec_target):
            tgt.copy_from(net)


def build_nets(spec: EnvSpec, cfg: LearnerConfig, rng: np.random.Generator) -> AgentNets:
    nets = AgentNets(spec)
    if cfg.algorithm in USES_CEN:
        nets.cen = RecurrentQNet(spec.joint_input_dim, spec.n_joint, cfg.cen_hidden,
                                 cfg.cen_lstm, rng=rng)
        nets.cen_target = nets.cen.clone()
        nets.cen_opt = Adam(nets.cen, lr=cfg.lr)
    if cfg.algorithm in USES_DEC:
        for i in range(spec.n_agents):
            net = RecurrentQNet(spec.input_dim(i), spec.n_actions[i], cfg.dec_hidden,
                                cfg.dec_lstm, rng=rng)
            nets.dec.append(net)
            nets.dec_target.append(net.clone())
            nets.dec_opt.append(Adam(net, lr=cfg.lr))
        nets.dec_updates = [0] * spec.n_agents
    return nets


# -- conditional argmax ---------------------------------------------------


def conditional_joint_argmax(q_joint: np.ndarray, undone: Sequence[bool],
                             running: Sequence[int | None],
                             n_actions: Sequence[int]) -> tuple[int, ...]:
    """Best joint action whose components for busy agents equal their running actions.

    Ties resolve to the lowest row-major joint index.
    """
    q_joint = np.asarray(q_joint, dtype=float)
    n_joint = int(np.prod(n_actions))
    if q_joint.shape != (n_joint,):
        raise ValueError(f"q_joint must have {n_joint} entries, got {q_joint.shape}")
    ok = np.ones(n_joint, dtype=bool)
    table = _joint_table(tuple(n_actions))
    for i, busy in enumerate(undone):
        if busy:
            if running[i] is None:
                raise ValueError(f"agent {i} is undone but has no running macro-action")
            ok &= table[:, i] == running[i]
    idx = int(np.argmax(np.where(ok, q_joint, -np.inf)))
    return tuple(int(a) for a in table[idx])


_TABLES: dict[tuple[int, ...], np.ndarray] = {}


def _joint_table(n_actions: tuple[int, ...]) -> np.ndarray:
    if n_actions not in _TABLES:
        grids = np.meshgrid(*[np.arange(n) for n in n_actions], indexing="ij")
        _TABLES[n_actions] = np.stack([g.ravel() for g in grids], axis=1)
    return _TABLES[n_actions]


def select_joint(q: np.ndarray, undone: np.ndarray | None, running: np.ndarray | None,
                 table: np.ndarray) -> np.ndarray:
    """Vectorized conditional argmax over the last axis of ``q``."""
    if undone is None:
        return q.argmax(-1)
    ok = np.ones(q.shape, dtype=bool)
    for i in range(table.shape[1]):
        ok &= (table[:, i] == running[..., i, None]) | ~undone[..., i, None]
    return np.where(ok, q, -np.inf).argmax(-1)


def _take(q: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(q, idx[..., None], axis=-1)[..., 0]


# -- targets ----------------------------------------------------------------


def _discount(cfg: LearnerConfig, steps: np.ndarray) -> np.ndarray:
    if cfg.plain_sum_gamma_power_1:
        return np.full_like(steps, cfg.gamma, dtype=float)
    return cfg.gamma ** steps


def cen_target(batch: Batch, nets: AgentNets, cfg: LearnerConfig,
               q_next: np.ndarray | None = None) -> np.ndarray:
    """Joint double-Q target with the conditional argmax; zero on padding.

    ``q_next`` optionally supplies the online joint net's outputs for steps
    ``1..T`` when the caller has already evaluated them.
    """
    table = nets.spec.joint_table
    if q_next is None:
        q_next = nets.cen.forward(batch.joint_inputs, keep_cache=False)[0][1:]
    qt_next = nets.cen_target.forward(batch.joint_inputs, keep_cache=False)[0][1:]
    sel = select_joint(q_next, batch.undone, batch.actions, table)
    boot = np.where(batch.terminal, 0.0, _discount(cfg, batch.gap) * _take(qt_next, sel))
    return np.where(batch.valid, batch.joint_reward + boot, 0.0)


def macdec_target(batch: Batch, nets: AgentNets, cfg: LearnerConfig, agent: int,
                  q_phi_next: np.ndarray | None = None) -> np.ndarray:
    """Per-agent target: joint net selects, the agent's target net evaluates.

    Entries where ``agent``'s macro-action did not terminate are zero and are
    excluded from the loss by :meth:`Batch.agent_mask`.
    """
    table = nets.spec.joint_table
    if q_phi_next is None:
        q_phi_next = nets.cen.forward(batch.joint_inputs, keep_cache=False)[0][1:]
    if cfg.conditional:
        sel = select_joint(q_phi_next, batch.undone, batch.actions, table)
    else:
        sel = q_phi_next.argmax(-1)
    comp = table[sel, agent]
    qt = nets.dec_target[agent].forward(batch.dec_inputs[agent], hold=batch.hold[agent],
                                        keep_cache=False)[0][1:]
    return _agent_target(batch, cfg, agent, _take(qt, comp))


def dec_double_target(batch: Batch, nets: AgentNets, cfg: LearnerConfig, agent: int,
                      q_next: np.ndarray | None = None) -> np.ndarray:
    """Independent double-Q target: the agent's own online net selects."""
    x, hold = batch.dec_inputs[agent], batch.hold[agent]
    if q_next is None:
        q_next = nets.dec[agent].forward(x, hold=hold, keep_cache=False)[0][1:]
    qt = nets.dec_target[agent].forward(x, hold=hold, keep_cache=False)[0][1:]
    return _agent_target(batch, cfg, agent, _take(qt, q_next.argmax(-1)))


def _agent_target(batch: Batch, cfg: LearnerConfig, agent: int, boot: np.ndarray) -> np.ndarray:
    disc = _discount(cfg, batch.durations[..., agent])
    y = batch.rewards[..., agent] + np.where(batch.terminal, 0.0, disc * boot)
    return np.where(batch.agent_mask(agent), y, 0.0)


# -- gradient steps ----------------------------------------------------------


def td_loss_grad(q: np.ndarray, actions: np.ndarray, y: np.ndarray, mask: np.ndarray,
                 beta: float | None = None) -> tuple[float, np.ndarray]:
    """Masked (optionally hysteretic) mean squared TD error and its gradient w.r.t. ``q``.

    ``q`` has one more step than ``actions``; the extra last step gets no gradient.
    """
    q_sa = _take(q[:-1], actions)
    delta = y - q_sa
    w = mask.astype(float)
    if beta is not None:
        w = w * np.where(delta < 0, beta, 1.0)
    n = max(int(mask.sum()), 1)
    loss = float((w * delta * delta).sum() / n)
    dq = np.zeros_like(q)
    np.put_along_axis(dq[:-1], actions[..., None], (-2.0 * w * delta / n)[..., None], axis=-1)
    return loss, dq


def apply_td_step(net: RecurrentQNet, opt: Adam, q: np.ndarray, actions: np.ndarray,
                  y: np.ndarray, mask: np.ndarray, cfg: LearnerConfig,
                  beta: float | None = None) -> float:
    """Backpropagate the TD loss through ``net``'s cached forward pass and step."""
    if not mask.any():
        return 0.0
    loss, dq = td_loss_grad(q, actions, y, mask, beta)
    grads = net.backward(dq)
    if cfg.grad_clip > 0:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    opt.step(grads)
    return loss


def td_update(net: RecurrentQNet, opt: Adam, inputs: np.ndarray, hold: np.ndarray | None,
              actions: np.ndarray, y: np.ndarray, mask: np.ndarray, cfg: LearnerConfig,
              beta: float | None = None) -> float:
    q, _ = net.forward(inputs, hold=hold)
    return apply_td_step(net, opt, q, actions, y, mask, cfg, beta)


def _log(nets: AgentNets, name: str, batch: Batch, counter: int) -> None:
    if nets.trace is not None:
        nets.trace.append((name, tuple(sorted(set(batch.sources))), counter))


def cen_update(batch: Batch, nets: AgentNets, cfg: LearnerConfig) -> float:
    q, _ = nets.cen.forward(batch.joint_inputs)
    y = cen_target(batch, nets, cfg, q_next=q[1:])
    loss = apply_td_step(nets.cen, nets.cen_opt, q, batch.joint_actions, y, batch.valid, cfg)
    nets.cen_updates += 1
    _log(nets, "cen", batch, nets.cen_updates)
    return loss


def dec_update(batch: Batch, nets: AgentNets, cfg: LearnerConfig, agent: int,
               target: Callable[[np.ndarray], np.ndarray], beta: float | None = None) -> float:
    """One step on agent ``agent``; ``target`` maps the online outputs to targets."""
    q, _ = nets.dec[agent].forward(batch.dec_inputs[agent], hold=batch.hold[agent])
    y = target(q)
    loss = apply_td_step(nets.dec[agent], nets.dec_opt[agent], q, batch.actions[..., agent],
                         y, batch.agent_mask(agent), cfg, beta)
    nets.dec_updates[agent] += 1
    _log(nets, f"dec{agent}", batch, nets.dec_updates[agent])
    return loss


def dec_hddrqn_update(batch: Batch, nets: AgentNets, cfg: LearnerConfig) -> list[float]:
    """Hysteretic independent double-Q step for every agent."""
    return [
        dec_update(batch, nets, cfg, i,
                   lambda q, i=i: dec_double_target(batch, nets, cfg, i, q_next=q[1:]),
                   beta=cfg.hysteretic_beta)
        for i in range(nets.spec.n_agents)
    ]


def macdec_train_step(batch: Batch, nets: AgentNets, cfg: LearnerConfig,
                      dec_batch: Batch | None = None, update_cen: bool = True) -> dict:
    """Joint net first, then each agent net against the freshly updated joint net.

    ``dec_batch`` defaults to ``batch``; the parallel variant passes samples
    from its decentralized buffer here.
    """
    dec_batch = batch if dec_batch is None else dec_batch
    info: dict = {"targets": []}
    if update_cen:
        info["cen_loss"] = cen_update(batch, nets, cfg)
    own_selector = cfg.algorithm == "macdec_maddrqn_regular_double_q"
    q_phi_next = None
    if not own_selector:
        q_phi_next = nets.cen.forward(dec_batch.joint_inputs, keep_cache=False)[0][1:]

    def target(q, i):
        if own_selector:
            y = dec_double_target(dec_batch, nets, cfg, i, q_next=q[1:])
        else:
            y = macdec_target(dec_batch, nets, cfg, i, q_phi_next)
        info["targets"].append(y)
        return y

    info["dec_loss"] = [
        dec_update(dec_batch, nets, cfg, i, lambda q, i=i: target(q, i))
        for i in range(nets.spec.n_agents)
    ]
    return info


def train_iteration(nets: AgentNets, cfg: LearnerConfig, rng: np.random.Generator,
                    buffer: ReplayBuffer, dec_buffer: ReplayBuffer | None = None) -> None:
    """One sampled mini-batch update for the configured algorithm."""
    batch = buffer.sample_minibatch(cfg.batch_size, rng)
    algo = cfg.algorithm
    if algo == "dec_hddrqn":
        dec_hddrqn_update(batch, nets, cfg)
    elif algo == "cen_ddrqn":
        cen_update(batch, nets, cfg)
    elif algo == "parallel_macdec_maddrqn":
        dec_batch = dec_buffer.sample_minibatch(cfg.batch_size, rng)
        macdec_train_step(batch, nets, cfg, dec_batch=dec_batch)
    else:
        macdec_train_step(batch, nets, cfg)


# -- acting -----------------------------------------------------------------


class DecentralizedActor:
    """Per-agent recurrent state; an agent's net only steps on its own new observations."""

    def __init__(self, nets: Sequence[RecurrentQNet], spec: EnvSpec):
        self.nets = list(nets)
        self.spec = spec
        self.q: list[np.ndarray] = []
        self.state: list = []

    def reset(self, obs: Sequence[Obs]) -> None:
        self.q, self.state = [], []
        for i, net in enumerate(self.nets):
            q, st = net.step(self.spec.encode(i, obs[i], None), net.zero_state())
            self.q.append(q)
            self.state.append(st)

    def observe(self, record: JointStepRecord) -> None:
        for i, net in enumerate(self.nets):
            if record.terminated[i]:
                x = self.spec.encode(i, record.next_obs[i], record.actions[i])
                self.q[i], self.state[i] = net.step(x, self.state[i])


class CentralizedActor:
    def __init__(self, net: RecurrentQNet, spec: EnvSpec):
        self.net = net
        self.spec = spec
        self.q: np.ndarray | None = None
        self.state = None

    def reset(self, obs: Sequence[Obs]) -> None:
        x = self.spec.encode_joint(obs, [None] * self.spec.n_agents)
        self.q, self.state = self.net.step(x, self.net.zero_state())

    def observe(self, record: JointStepRecord) -> None:
        x = self.spec.encode_joint(record.next_obs, record.actions)
        self.q, self.state = self.net.step(x, self.state)


def epsilon_greedy_select(free: Sequence[int], running: Sequence[int | None], epsilon: float,
                          mode: str, rng: np.random.Generator, spec: EnvSpec,
                          dec_q: Sequence[np.ndarray] | None = None,
                          cen_q: np.ndarray | None = None) -> dict[int, int]:
    """New macro-actions for the agents in ``free``.

    ``decentralized``: each free agent explores or acts greedily on its own Q.
    ``centralized``: with probability epsilon a uniform joint action over the
    free agents, otherwise their components of the conditional joint argmax.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    free = sorted(free)
    if mode == "decentralized":
        out = {}
        for i in free:
            if rng.random() < epsilon:
                out[i] = int(rng.integers(spec.n_actions[i]))
            else:
                out[i] = int(np.argmax(dec_q[i]))
        return out
    if mode != "centralized":
        raise ValueError(f"unknown exploration mode {mode!r}")
    if rng.random() < epsilon:
        return {i: int(rng.integers(spec.n_actions[i])) for i in free}
    undone = [i not in free for i in range(spec.n_agents)]
    joint = conditional_joint_argmax(cen_q, undone, running, spec.n_actions)
    return {i: joint[i] for i in free}


class Policy:
    """Epsilon-greedy behaviour over either the joint net or the per-agent nets."""

    def __init__(self, nets: AgentNets, mode: str):
        self.spec = nets.spec
        self.mode = mode
        if mode == "centralized":
            if nets.cen is None:
                raise ValueError("centralized mode needs a joint Q-net")
            self.actor = CentralizedActor(nets.cen, nets.spec)
        else:
            if not nets.dec:
                raise ValueError("decentralized mode needs per-agent Q-nets")
            self.actor = DecentralizedActor(nets.dec, nets.spec)

    def reset(self, obs: Sequence[Obs]) -> None:
        self.actor.reset(obs)

    def observe(self, record: JointStepRecord) -> None:
        self.actor.observe(record)

    def select(self, free, running, epsilon: float, rng: np.random.Generator) -> dict[int, int]:
        if self.mode == "centralized":
            return epsilon_greedy_select(free, running, epsilon, "centralized", rng, self.spec,
                                         cen_q=self.actor.q)
        return epsilon_greedy_select(free, running, epsilon, "decentralized", rng, self.spec,
                                     dec_q=self.actor.q)


class EnvRunner:
    """Steps one environment boundary by boundary, collecting whole episodes."""

    def __init__(self, executor: MacroExecutor, policy: Policy, source: str = ""):
        self.executor = executor
        self.policy = policy
        self.source = source
        self.records: list[JointStepRecord] = []
        self.total_steps = 0
        self.total_boundaries = 0
        self.episodes = 0
        self._fresh = True

    def step(self, epsilon: float, rng: np.random.Generator,
             seed: int | None = None) -> tuple[JointStepRecord, EpisodeRecord | None]:
        ex = self.executor
        if self._fresh:
            self.policy.reset(ex.reset(seed))
            self.records = []
            self._fresh = False
        actions = self.policy.select(ex.pending, ex.running, epsilon, rng)
        before = ex.env.clock
        record, done = ex.run_until_any_termination(actions)
        self.total_steps += ex.env.clock - before
        self.total_boundaries += 1
        self.records.append(record)
        if done:
            self._fresh = True
            self.episodes += 1
            return record, EpisodeRecord(self.records, source=self.source)
        self.policy.observe(record)
        return record, None


def run_episode(executor: MacroExecutor, policy: Policy, epsilon: float,
                rng: np.random.Generator, seed: int | None = None,
                source: str = "") -> EpisodeRecord:
    runner = EnvRunner(executor, policy, source)
    while True:
        _, episode = runner.step(epsilon, rng, seed)
        if episode is not None:
            return episode


# -- training loops -----------------------------------------------------------

Callback = Callable[[int, AgentNets, float], None]


class _Schedule:
    """Training and target-refresh triggers shared by both loops."""

    def __init__(self, cfg: LearnerConfig):
        self.cfg = cfg
        self.copies = 0

    def should_train_on_boundary(self, t_boundaries: int) -> bool:
        k = self.cfg.train_interval
        return k > 0 and t_boundaries % k == 0

    def should_train_on_episode(self) -> bool:
        return self.cfg.train_interval == 0

    def maybe_refresh(self, nets: AgentNets, total_steps: int) -> None:
        due = total_steps // self.cfg.target_update_steps
        if due > self.copies:
            nets.update_targets()
            self.copies = due


def _ready(cfg: LearnerConfig, *buffers: ReplayBuffer) -> bool:
    need = max(1, cfg.warmup_episodes)
    return all(len(b) >= need for b in buffers)


def train(env_factory: Callable[[], MacroEnv], cfg: LearnerConfig, episodes: int, seed: int,
          callback: Callback | None = None, nets: AgentNets | None = None) -> AgentNets:
    """Train any algorithm for ``episodes`` episodes (dec-env episodes for the parallel one)."""
    if cfg.algorithm == "parallel_macdec_maddrqn":
        return parallel_train(env_factory, cfg, episodes, seed, callback, nets)
    rng = np.random.default_rng(seed)
    env = env_factory()
    spec = env.spec
    nets = nets or build_nets(spec, cfg, rng)
    mode = cfg.exploration_mode
    if cfg.algorithm == "dec_hddrqn":
        mode = "decentralized"
    elif cfg.algorithm == "cen_ddrqn":
        mode = "centralized"
    buffer = ReplayBuffer(spec, cfg.buffer_capacity, name="env")
    runner = EnvRunner(MacroExecutor(env, cfg.gamma, cfg.plain_sum_gamma_power_1),
                       Policy(nets, mode), source="env")
    sched = _Schedule(cfg)
    for ep in range(episodes):
        eps = cfg.epsilon(ep, episodes)
        while True:
            _, episode = runner.step(eps, rng)
            if sched.should_train_on_boundary(runner.total_boundaries) and _ready(cfg, buffer):
                for _ in range(cfg.updates_per_train):
                    train_iteration(nets, cfg, rng, buffer)
            sched.maybe_refresh(nets, runner.total_steps)
            if episode is not None:
                break
        buffer.push_episode(episode)
        if sched.should_train_on_episode() and _ready(cfg, buffer):
            for _ in range(cfg.updates_per_train):
                train_iteration(nets, cfg, rng, buffer)
        if callback is not None:
            callback(ep, nets, eps)
    return nets


def parallel_train(env_factory: Callable[[], MacroEnv], cfg: LearnerConfig, episodes: int,
                   seed: int, callback: Callback | None = None,
                   nets: AgentNets | None = None) -> AgentNets:
    """Two environments: one explores through the joint net, one through the agent nets.

    The joint net learns only from the first one's buffer and the agent nets
    only from the second's; training and target refreshes are clocked by the
    decentralized environment.
    """
    if cfg.algorithm != "parallel_macdec_maddrqn":
        raise ValueError(f"parallel_train needs algorithm parallel_macdec_maddrqn, got {cfg.algorithm}")
    rng = np.random.default_rng(seed)
    cen_env, dec_env = env_factory(), env_factory()
    if cen_env is dec_env:
        raise ValueError("env_factory must build independent environments")
    spec = dec_env.spec
    nets = nets or build_nets(spec, cfg, rng)
    d_cen = ReplayBuffer(spec, cfg.buffer_capacity, name="cen-env")
    d_dec = ReplayBuffer(spec, cfg.buffer_capacity, name="dec-env")
    cen_runner = EnvRunner(MacroExecutor(cen_env, cfg.gamma, cfg.plain_sum_gamma_power_1),
                           Policy(nets, "centralized"), source="cen-env")
    dec_runner = EnvRunner(MacroExecutor(dec_env, cfg.gamma, cfg.plain_sum_gamma_power_1),
                           Policy(nets, "decentralized"), source="dec-env")
    sched = _Schedule(cfg)
    ep = 0
    while ep < episodes:
        eps = cfg.epsilon(ep, episodes)
        _, cen_episode = cen_runner.step(eps, rng)
        if cen_episode is not None:
            d_cen.push_episode(cen_episode)
        _, dec_episode = dec_runner.step(eps, rng)
        if dec_episode is not None:
            d_dec.push_episode(dec_episode)
        trigger = sched.should_train_on_boundary(dec_runner.total_boundaries) or (
            dec_episode is not None and sched.should_train_on_episode()
        )
        if trigger and _ready(cfg, d_cen, d_dec):
            for _ in range(cfg.updates_per_train):
                train_iteration(nets, cfg, rng, d_cen, d_dec)
        sched.maybe_refresh(nets, dec_runner.total_steps)
        if dec_episode is not None:
            if callback is not None:
                callback(ep, nets, eps)
            ep += 1
    return nets
