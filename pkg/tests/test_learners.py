from __future__ import annotations

import itertools
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macdec.config import LearnerConfig
from macdec.core import EnvSpec, JointStepRecord, MacroExecutor
from macdec.envs import make_env
from macdec.learners import (
    AgentNets, Policy, build_nets, cen_target, conditional_joint_argmax,
    dec_double_target, dec_update, epsilon_greedy_select, macdec_target, macdec_train_step,
    parallel_train, run_episode, select_joint, td_loss_grad, train,
)
from macdec.replay import ReplayBuffer

FIXTURE = json.loads((Path(__file__).parent / "fixtures" / "target_fixture.json").read_text())
TOY = EnvSpec("toy", (2, 2), ((2,), (2,)), 10)


class TableNet:
    """Stand-in net whose outputs are a fixed table per sequence step."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=float)

    def forward(self, x, state=None, hold=None, keep_cache=True):
        T, B = x.shape[:2]
        return np.broadcast_to(self.rows[:T, None, :], (T, B, self.rows.shape[1])).copy(), None


def _fixture_batch(terminal_last: bool):
    records = [JointStepRecord.from_dict(r) for r in FIXTURE["records"]]
    if terminal_last:
        records[-1] = replace(records[-1], terminal=True, truncated=False)
    buf = ReplayBuffer(TOY).push_episode(records)
    return buf.sample_minibatch(1, np.random.default_rng(0))


def _fixture_nets() -> AgentNets:
    nets = AgentNets(TOY)
    nets.cen = TableNet(FIXTURE["q_phi"])
    nets.cen_target = TableNet(FIXTURE["q_phi_target"])
    nets.dec_target = [TableNet(t) for t in FIXTURE["q_theta_target"]]
    return nets


@pytest.mark.parametrize("case", sorted(FIXTURE["cases"]))
def test_targets_match_hand_computed_fixture(case):
    spec = FIXTURE["cases"][case]
    cfg = LearnerConfig(gamma=FIXTURE["gamma"], plain_sum_gamma_power_1=spec["plain_sum"],
                        conditional=spec.get("conditional", True))
    batch = _fixture_batch(spec["terminal_last"])
    nets = _fixture_nets()
    if "cen" in spec:
        assert cen_target(batch, nets, cfg)[:, 0].tolist() == spec["cen"]
    for i, want in enumerate(spec["agent"]):
        assert macdec_target(batch, nets, cfg, i)[:, 0].tolist() == want


def test_conditional_argmax_examples():
    q = np.array([1.0, 5.0, 3.0, 4.0])
    assert conditional_joint_argmax(q, [False, False], [None, None], (2, 2)) == (0, 1)
    assert conditional_joint_argmax(q, [False, True], [None, 0], (2, 2)) == (1, 0)
    assert conditional_joint_argmax(q, [True, False], [1, None], (2, 2)) == (1, 1)
    # ties go to the lowest joint index
    assert conditional_joint_argmax(np.zeros(4), [False, False], [None, None], (2, 2)) == (0, 0)


def test_conditional_argmax_errors():
    with pytest.raises(ValueError):
        conditional_joint_argmax(np.zeros(3), [False, False], [None, None], (2, 2))
    with pytest.raises(ValueError):
        conditional_joint_argmax(np.zeros(4), [True, False], [None, None], (2, 2))


@st.composite
def _joint_problem(draw):
    n_actions = tuple(draw(st.lists(st.integers(1, 4), min_size=1, max_size=3)))
    n_joint = int(np.prod(n_actions))
    q = np.array(draw(st.lists(st.floats(-1e3, 1e3), min_size=n_joint, max_size=n_joint)))
    undone = draw(st.lists(st.booleans(), min_size=len(n_actions), max_size=len(n_actions)))
    running = [draw(st.integers(0, n - 1)) if u else None for u, n in zip(undone, n_actions)]
    return q, undone, running, n_actions


@settings(max_examples=1000, deadline=None)
@given(problem=_joint_problem(), scale=st.floats(0.1, 10.0), shift=st.floats(-100, 100))
def test_conditional_argmax_brute_force(problem, scale, shift):
    q, undone, running, n_actions = problem
    best, best_q = None, -np.inf
    for joint in itertools.product(*[range(n) for n in n_actions]):
        if any(u and joint[i] != running[i] for i, u in enumerate(undone)):
            continue
        v = q[np.ravel_multi_index(joint, n_actions)]
        if v > best_q:
            best, best_q = joint, v
    got = conditional_joint_argmax(q, undone, running, n_actions)
    assert q[np.ravel_multi_index(got, n_actions)] == best_q
    assert all(got[i] == running[i] for i, u in enumerate(undone) if u)
    if len(set(q.tolist())) == q.size:
        assert got == best
        moved = scale * q + shift
        if len(set(moved.tolist())) == q.size:
            assert conditional_joint_argmax(moved, undone, running, n_actions) == got
    # the vectorized form agrees
    table = EnvSpec("x", n_actions, ((1,),) * len(n_actions), 1).joint_table
    run = np.array([r if r is not None else 0 for r in running])
    idx = select_joint(q, np.array(undone), run, table)
    assert tuple(table[idx]) == got


def test_single_agent_reduces_to_double_dqn():
    spec = EnvSpec("solo", (3,), ((4,),), 20)
    cfg = LearnerConfig(dec_hidden=8, dec_lstm=8, cen_hidden=8, cen_lstm=8)
    nets = build_nets(spec, cfg, np.random.default_rng(0))
    nets.cen.copy_from(nets.dec[0])
    nets.cen_target.copy_from(nets.dec_target[0])
    rng = np.random.default_rng(1)
    records, obs = [], (0,)
    for k in range(6):
        nxt = (int(rng.integers(4)),)
        records.append(JointStepRecord((obs,), (int(rng.integers(3)),), (nxt,), (float(k),),
                                       (2,), (True,), float(k), 2, 2 * (k + 1)))
        obs = nxt
    batch = ReplayBuffer(spec).push_episode(records).sample_minibatch(3, rng)
    a = macdec_target(batch, nets, cfg, 0)
    # plain double-DQN: online net picks, target net values, gamma^duration discount
    q = nets.dec[0].forward(batch.dec_inputs[0])[0][1:]
    qt = nets.dec_target[0].forward(batch.dec_inputs[0])[0][1:]
    pick = np.take_along_axis(qt, q.argmax(-1)[..., None], -1)[..., 0]
    want = np.where(batch.valid, batch.rewards[..., 0] + cfg.gamma ** batch.durations[..., 0] * pick, 0.0)
    assert np.array_equal(a, want)
    assert np.array_equal(a, dec_double_target(batch, nets, cfg, 0))
    assert np.array_equal(a, cen_target(batch, nets, cfg))


def _td_problem():
    q = np.array([[[1.0, 2.0]], [[0.5, -1.0]], [[0.0, 0.0]]])  # (T+1, B, A)
    actions = np.array([[1], [0]])
    return q, actions


def test_hysteresis_beta_one_is_plain_loss():
    q, actions = _td_problem()
    y = np.array([[3.0], [-1.0]])
    mask = np.ones((2, 1), dtype=bool)
    l0, g0 = td_loss_grad(q, actions, y, mask)
    l1, g1 = td_loss_grad(q, actions, y, mask, beta=1.0)
    assert l0 == l1 and np.array_equal(g0, g1)


def test_hysteresis_beta_one_gives_identical_parameter_updates():
    cfg = LearnerConfig(batch_size=4, dec_hidden=8, dec_lstm=8, cen_hidden=8, cen_lstm=8)
    nets_a, batch = _bp_batch(cfg)
    nets_b, _ = _bp_batch(cfg)
    for i in range(2):
        target = lambda q, i=i: dec_double_target(batch, nets_a, cfg, i, q_next=q[1:])
        dec_update(batch, nets_a, cfg, i, target, beta=None)
        target = lambda q, i=i: dec_double_target(batch, nets_b, cfg, i, q_next=q[1:])
        dec_update(batch, nets_b, cfg, i, target, beta=1.0)
        assert np.array_equal(nets_a.dec[i].flat(), nets_b.dec[i].flat())


def test_hysteresis_beta_zero_ignores_negative_errors():
    q, actions = _td_problem()
    y = np.array([[0.0], [-5.0]])  # both targets below the prediction
    loss, grad = td_loss_grad(q, actions, y, np.ones((2, 1), dtype=bool), beta=0.0)
    assert loss == 0.0 and np.all(grad == 0)


def test_hysteretic_loss_mixed_signs():
    q, actions = _td_problem()
    # deltas: 4 - 2 = +2 and 0 - 0.5 = -0.5
    y = np.array([[4.0], [0.0]])
    loss, grad = td_loss_grad(q, actions, y, np.ones((2, 1), dtype=bool), beta=0.4)
    assert loss == pytest.approx((4.0 + 0.4 * 0.25) / 2)
    assert grad[0, 0, 1] == pytest.approx(-2.0 * 2.0 / 2)
    assert grad[1, 0, 0] == pytest.approx(-2.0 * 0.4 * -0.5 / 2)
    assert np.count_nonzero(grad) == 2


def test_masked_entries_do_not_count():
    q, actions = _td_problem()
    y = np.array([[4.0], [100.0]])
    mask = np.array([[True], [False]])
    loss, grad = td_loss_grad(q, actions, y, mask)
    assert loss == pytest.approx(4.0)
    assert grad[1].sum() == 0
    # perturbing only the masked step's target changes nothing
    loss2, grad2 = td_loss_grad(q, actions, np.array([[4.0], [-7.0]]), mask)
    assert loss2 == loss and np.array_equal(grad, grad2)


def _bp_batch(cfg, n=4, seed=0):
    env = make_env("bp10", horizon=30)
    nets = build_nets(env.spec, cfg, np.random.default_rng(seed))
    buf = ReplayBuffer(env.spec)
    rng = np.random.default_rng(seed)
    for _ in range(n):
        buf.push_episode(run_episode(MacroExecutor(env, cfg.gamma), Policy(nets, "centralized"),
                                     1.0, rng))
    return nets, buf.sample_minibatch(cfg.batch_size, rng)


def test_macdec_updates_joint_net_before_agents(monkeypatch):
    import macdec.learners as L

    cfg = LearnerConfig(batch_size=4)
    nets, batch = _bp_batch(cfg)
    nets.trace = []
    q_before = nets.cen.forward(batch.joint_inputs, keep_cache=False)[0][1:]
    seen = []
    real = L.macdec_target

    def spy(batch, nets, cfg, agent, q_phi_next=None):
        seen.append(q_phi_next)
        return real(batch, nets, cfg, agent, q_phi_next)

    monkeypatch.setattr(L, "macdec_target", spy)
    macdec_train_step(batch, nets, cfg)
    assert [t[0] for t in nets.trace] == ["cen", "dec0", "dec1"]
    q_after = nets.cen.forward(batch.joint_inputs, keep_cache=False)[0][1:]
    assert len(seen) == 2
    for q in seen:
        np.testing.assert_array_equal(q, q_after)
        assert not np.array_equal(q, q_before)


def test_zero_nets_zero_rewards_give_zero_loss():
    cfg = LearnerConfig(batch_size=4)
    nets, batch = _bp_batch(cfg)
    for net in [nets.cen, nets.cen_target, *nets.dec, *nets.dec_target]:
        net.load_flat(np.zeros(net.n_params))
    batch.rewards[:] = 0.0
    batch.joint_reward[:] = 0.0
    info = macdec_train_step(batch, nets, cfg)
    assert info["cen_loss"] == 0.0 and info["dec_loss"] == [0.0, 0.0]
    assert all(np.all(y == 0) for y in info["targets"])
    assert all(np.all(net.flat() == 0) for net in [nets.cen, *nets.dec])


def test_regular_double_q_without_joint_update_is_dec_ddrqn():
    cfg = LearnerConfig(algorithm="macdec_maddrqn_regular_double_q", batch_size=4)
    nets, batch = _bp_batch(cfg)
    cen_before = nets.cen.flat()
    macdec_train_step(batch, nets, cfg, update_cen=False)
    # plain non-hysteretic double-Q step on fresh copies of the same nets
    ref, _ = _bp_batch(cfg)
    for i in range(2):
        dec_update(batch, ref, cfg, i,
                   lambda q, i=i: dec_double_target(batch, ref, cfg, i, q_next=q[1:]))
        assert np.array_equal(nets.dec[i].flat(), ref.dec[i].flat())
    assert np.array_equal(nets.cen.flat(), cen_before)


def test_epsilon_greedy_modes():
    spec = TOY
    rng = np.random.default_rng(0)
    cen_q = np.array([1.0, 5.0, 3.0, 4.0])
    assert epsilon_greedy_select([0], [None, 0], 0.0, "centralized", rng, spec, cen_q=cen_q) == {0: 1}
    assert epsilon_greedy_select([0, 1], [None, None], 0.0, "centralized", rng, spec,
                                 cen_q=cen_q) == {0: 0, 1: 1}
    dec_q = [np.array([0.0, 1.0]), np.array([2.0, 1.0])]
    assert epsilon_greedy_select([0, 1], [None, None], 0.0, "decentralized", rng, spec,
                                 dec_q=dec_q) == {0: 1, 1: 0}
    counts = np.zeros(2)
    for _ in range(2000):
        counts[epsilon_greedy_select([1], [0, None], 1.0, "decentralized", rng, spec,
                                     dec_q=dec_q)[1]] += 1
    assert abs(counts[0] - 1000) < 150
    with pytest.raises(ValueError):
        epsilon_greedy_select([0], [None, None], 0.5, "sideways", rng, spec)
    with pytest.raises(ValueError):
        epsilon_greedy_select([0], [None, None], 1.5, "centralized", rng, spec)


def _small_cfg(**kw):
    base = dict(batch_size=4, warmup_episodes=2, dec_hidden=8, dec_lstm=8, cen_hidden=8,
                cen_lstm=8, target_update_steps=50)
    base.update(kw)
    return LearnerConfig(**base)


def test_parallel_buffers_feed_the_right_nets():
    cfg = _small_cfg(algorithm="parallel_macdec_maddrqn")
    spec = make_env("bp10").spec
    nets = build_nets(spec, cfg, np.random.default_rng(0))
    nets.trace = []
    parallel_train(lambda: make_env("bp10", horizon=30), cfg, 6, seed=0, nets=nets)
    assert nets.trace
    for name, sources, _ in nets.trace:
        assert sources == (("cen-env",) if name == "cen" else ("dec-env",))


def test_parallel_rejects_shared_env():
    cfg = _small_cfg(algorithm="parallel_macdec_maddrqn")
    env = make_env("bp10")
    with pytest.raises(ValueError):
        parallel_train(lambda: env, cfg, 1, seed=0)
    with pytest.raises(ValueError):
        parallel_train(lambda: make_env("bp10"), _small_cfg(), 1, seed=0)


@pytest.mark.parametrize("algo", ["macdec_maddrqn", "dec_hddrqn", "cen_ddrqn"])
def test_target_refresh_every_step_tracks_online(algo):
    cfg = _small_cfg(algorithm=algo, target_update_steps=1, train_interval=1)
    nets = train(lambda: make_env("bp10", horizon=20), cfg, 4, seed=1)
    if nets.cen is not None:
        assert np.array_equal(nets.cen.flat(), nets.cen_target.flat())
    for net, tgt in zip(nets.dec, nets.dec_target):
        assert np.array_equal(net.flat(), tgt.flat())
    assert nets.cen_updates > 0 or any(nets.dec_updates)


@pytest.mark.parametrize("algo", ["macdec_maddrqn", "parallel_macdec_maddrqn"])
def test_training_is_seed_deterministic(algo):
    cfg = _small_cfg(algorithm=algo)
    a = train(lambda: make_env("bp10", horizon=30), cfg, 5, seed=3)
    b = train(lambda: make_env("bp10", horizon=30), cfg, 5, seed=3)
    c = train(lambda: make_env("bp10", horizon=30), cfg, 5, seed=4)
    assert np.array_equal(a.cen.flat(), b.cen.flat())
    assert all(np.array_equal(x.flat(), y.flat()) for x, y in zip(a.dec, b.dec))
    assert not np.array_equal(a.cen.flat(), c.cen.flat())
