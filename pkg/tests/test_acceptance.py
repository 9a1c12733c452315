"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

The learning checks (5, 6, 7) train real agents and take well over an hour
on one CPU core.
"""

from __future__ import annotations

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from macdec.config import TrainConfig
from macdec.envs import make_env
from macdec.evaluation import evaluate_policy
from macdec.harness import load_nets, run_experiment, run_once, save_nets
from macdec.learners import cen_target, conditional_joint_argmax, macdec_target
from macdec.nn import RecurrentQNet
from macdec.scripted import rollout, wtd_script

import test_boxpushing
import test_core
import test_learners
import test_nn
import test_replay
import test_warehouse

FIXTURES = Path(__file__).parent / "fixtures"
GAMMA = 0.98
SEEDS = (0, 1, 2, 3)
BP_EPISODES = 4000
WTD_EPISODES = 10000
EVAL_INTERVAL = 50
FINAL_WINDOW = 10  # evaluation points averaged for the final smoothed return


@pytest.fixture
def report(capsys):
    def emit(number: int, passed: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
    return emit


def optimal_bp10() -> float:
    # closed form of the scripted big-box trajectory: 10 steps, +100 on the last
    return 100 * GAMMA ** 9 + sum(-0.1 * GAMMA ** t for t in range(10))


# -- 1 ---------------------------------------------------------------------------


def test_1_conditional_argmax_oracle(report):
    rng = np.random.default_rng(2024)
    mismatches, spent = 0, 0.0
    for _ in range(10_000):
        n_actions = tuple(int(k) for k in rng.integers(1, 5, size=rng.integers(1, 5)))
        q = rng.normal(size=int(np.prod(n_actions)))
        undone = [bool(u) for u in rng.random(len(n_actions)) < 0.5]
        running = [int(rng.integers(n)) if u else None for u, n in zip(undone, n_actions)]
        t0 = time.perf_counter()
        got = conditional_joint_argmax(q, undone, running, n_actions)
        spent += time.perf_counter() - t0
        best, best_q = None, -np.inf
        for k, joint in enumerate(itertools.product(*[range(n) for n in n_actions])):
            if all(joint[i] == running[i] for i, u in enumerate(undone) if u) and q[k] > best_q:
                best, best_q = joint, q[k]
        mismatches += got != best
    ok = mismatches == 0 and spent < 10.0
    report(1, ok, f"{mismatches} mismatches in 10000 tables, {spent:.2f}s in argmax")
    assert ok


# -- 2 ---------------------------------------------------------------------------


def test_2_gradient_check(report):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n_in, hidden, lstm, n_out = (int(v) for v in rng.integers(1, 9, size=4))
        T, B = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        net = RecurrentQNet(n_in, n_out, hidden, lstm, rng=rng)
        x = rng.normal(size=(T, B, n_in))
        w = rng.normal(size=(T, B, n_out))
        hold = rng.random((T, B)) < 0.3
        worst = max(worst, test_nn.numeric_gradient_error(net, x, w, hold, eps=1e-5))
    spent = time.perf_counter() - t0
    ok = worst <= 1e-4 and spent < 60.0
    report(2, ok, f"max relative error {worst:.2e} over 100 nets, {spent:.1f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------


def test_3_target_fixture(report):
    fixture = json.loads((FIXTURES / "target_fixture.json").read_text())
    failures = []
    for name, case in sorted(fixture["cases"].items()):
        cfg = test_learners.LearnerConfig(gamma=fixture["gamma"],
                                          plain_sum_gamma_power_1=case["plain_sum"],
                                          conditional=case.get("conditional", True))
        batch = test_learners._fixture_batch(case["terminal_last"])
        nets = test_learners._fixture_nets()
        if "cen" in case and cen_target(batch, nets, cfg)[:, 0].tolist() != case["cen"]:
            failures.append(f"{name}/cen")
        for i, want in enumerate(case["agent"]):
            if macdec_target(batch, nets, cfg, i)[:, 0].tolist() != want:
                failures.append(f"{name}/agent{i}")
    ok = not failures
    report(3, ok, f"{len(fixture['cases'])} fixture cases, mismatches: {failures or 'none'}")
    assert ok


# -- 4 ---------------------------------------------------------------------------


def test_4_wtd_scripted_trace(report):
    fixture = json.loads((FIXTURES / "wtd_scripted_trace.json").read_text())
    records, ex = rollout(make_env("wtd"), wtd_script(), gamma=1.0, seed=0)
    same_trace = len(records) == len(fixture["boundaries"])
    for rec, want in zip(records, fixture["boundaries"]):
        same_trace &= rec.boundary_time == want["t"]
        same_trace &= [i for i, t in enumerate(rec.terminated) if t] == want["terminated"]
        same_trace &= rec.joint_reward == want["joint_reward"]
        same_trace &= all(list(rec.next_obs[int(i)]) == o for i, o in want["next_obs"].items())
    ok = same_trace and ex.undiscounted_return == fixture["undiscounted_return"] and records[-1].terminal
    report(4, ok, f"{len(records)} boundaries, undiscounted return {ex.undiscounted_return} "
                  f"(oracle {fixture['undiscounted_return']})")
    assert ok


# -- 5 and 6 -----------------------------------------------------------------------


_CACHE: dict = {}


def _curve(env: str, algorithm: str, seed: int, episodes: int, **learner) -> list[float]:
    key = (env, algorithm, seed, episodes)
    if key not in _CACHE:
        cfg = TrainConfig.default(env, algorithm=algorithm, episodes=episodes,
                                  eval_interval=EVAL_INTERVAL, seed=seed, **learner)
        rows, nets = run_once(cfg, 0)
        _CACHE[key] = [r.return_mean for r in rows]
    return _CACHE[key]


def test_5_bp10_macdec_reaches_optimal(report):
    target = 0.9 * optimal_bp10()
    finals = [_curve("bp10", "macdec_maddrqn", s, BP_EPISODES, exploration_mode="centralized")[-1]
              for s in SEEDS]
    hits = sum(v >= target for v in finals)
    ok = hits >= 3
    report(5, ok, f"final greedy returns {[round(v, 2) for v in finals]}, "
                  f"{hits}/4 seeds >= {target:.2f} (90% of {optimal_bp10():.2f})")
    assert ok


def test_6_bp10_macdec_auc_beats_dec_hddrqn(report):
    wins, pairs = 0, []
    for s in SEEDS:
        ours = np.trapezoid(_curve("bp10", "macdec_maddrqn", s, BP_EPISODES,
                                   exploration_mode="centralized"), dx=EVAL_INTERVAL)
        base = np.trapezoid(_curve("bp10", "dec_hddrqn", s, BP_EPISODES), dx=EVAL_INTERVAL)
        wins += ours >= base
        pairs.append((round(float(ours)), round(float(base))))
    ok = wins >= 3
    report(6, ok, f"AUC (MacDec, Dec-HDDRQN) per seed {pairs}, MacDec >= on {wins}/4")
    assert ok


# -- 7 ---------------------------------------------------------------------------


def test_7_wtd_parallel_beats_regular_double_q(report):
    wins, pairs = 0, []
    for s in SEEDS:
        par = float(np.mean(_curve("wtd", "parallel_macdec_maddrqn", s, WTD_EPISODES)[-FINAL_WINDOW:]))
        reg = float(np.mean(_curve("wtd", "macdec_maddrqn_regular_double_q", s,
                                   WTD_EPISODES)[-FINAL_WINDOW:]))
        wins += par >= reg
        pairs.append((round(par, 1), round(reg, 1)))
    ok = wins >= 3
    report(7, ok, f"final smoothed (Parallel, Our-1-R) per seed {pairs}, Parallel >= on {wins}/4")
    assert ok


# -- 8 ---------------------------------------------------------------------------


def test_8_determinism(report, tmp_path):
    kw = dict(episodes=30, eval_interval=10, num_runs=2, env_horizon=40, warmup_episodes=4,
              batch_size=8, seed=5)
    a = run_experiment(TrainConfig.default("bp10", out_dir=str(tmp_path / "a"), **kw))
    b = run_experiment(TrainConfig.default("bp10", out_dir=str(tmp_path / "b"), **kw))
    names = ["run_0.csv", "run_1.csv", "aggregate.csv"]
    same_csv = all((a["out_dir"] / n).read_bytes() == (b["out_dir"] / n).read_bytes() for n in names)

    cfg = TrainConfig.default("wtd", episodes=20, warmup_episodes=4, batch_size=4, seed=9)
    _, nets = run_once(cfg, 0)
    env = make_env("wtd")
    before = evaluate_policy(nets, env, GAMMA, episodes=2, seed=3)
    (tmp_path / "ckpt").mkdir()
    save_nets(nets, tmp_path / "ckpt", 0, {})
    after = evaluate_policy(load_nets(tmp_path / "ckpt", 0, env), env, GAMMA, episodes=2, seed=3)
    ok = same_csv and before == after
    report(8, ok, f"metrics CSVs byte-identical: {same_csv}; checkpoint eval {before!r} -> {after!r}")
    assert ok


# -- 9 ---------------------------------------------------------------------------


INVARIANT_SUITES = [
    ("executor replay is bit-identical", test_core.test_replaying_choices_is_bit_identical),
    ("executor reward/duration/boundary invariants", test_core.test_executor_invariants),
    ("box pushing random play", test_boxpushing.test_random_play_invariants),
    ("box pushing optimal beats small box", test_boxpushing.test_optimal_beats_small_box_script),
    ("warehouse random play", test_warehouse.test_random_play_invariants),
    ("warehouse scripted oracle", test_warehouse.test_scripted_trace_matches_hand_simulation),
    ("gradient check property", test_nn.test_gradient_check_property),
    ("forward/backward determinism", test_nn.test_forward_backward_deterministic),
    ("leaky slope", test_nn.test_leaky_slope_is_fixed),
    ("replay sampling properties", test_replay.test_sampling_properties),
    ("conditional argmax brute force and scaling", test_learners.test_conditional_argmax_brute_force),
    ("single-agent double DQN", test_learners.test_single_agent_reduces_to_double_dqn),
    ("hysteresis identity", test_learners.test_hysteresis_beta_one_gives_identical_parameter_updates),
    ("joint net updated first", test_learners.test_macdec_updates_joint_net_before_agents),
]


def test_9_invariant_suites(report):
    failed = []
    for name, fn in INVARIANT_SUITES:
        try:
            if name == "joint net updated first":
                with pytest.MonkeyPatch.context() as mp:
                    fn(mp)
            else:
                fn()
        except Exception as e:  # noqa: BLE001
            failed.append(f"{name}: {type(e).__name__}")
    ok = not failed
    report(9, ok, f"{len(INVARIANT_SUITES) - len(failed)}/{len(INVARIANT_SUITES)} suites pass"
                  + (f"; failed {failed}" if failed else ""))
    assert ok
