"""Seeded experiments: training runs, evaluation curves, CSV metrics and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .core import MacroEnv
from .envs import make_env
from .evaluation import evaluate_policy
from .learners import AgentNets, train
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

RUN_FIELDS = ("run", "episode", "return_mean", "epsilon", "seconds")
AGG_FIELDS = RUN_FIELDS + ("return_se", "return_smoothed", "return_se_smoothed")


class HarnessError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    run: int
    episode: int
    return_mean: float
    epsilon: float
    seconds: float

    def __post_init__(self):
        if not np.isfinite(self.return_mean):
            raise ValueError(f"non-finite return at episode {self.episode}")


def env_factory(cfg: TrainConfig):
    return lambda: make_env(cfg.env, cfg.env_horizon)


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Centered moving average; edges average over the neighbours that exist."""
    x = np.asarray(values, dtype=float)
    if window <= 1 or x.size == 0:
        return x.copy()
    lo = window // 2
    hi = window - lo
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(x.size)
    start = np.maximum(idx - lo, 0)
    stop = np.minimum(idx + hi, x.size)
    return (csum[stop] - csum[start]) / (stop - start)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields])


def prepare_out_dir(path: str | Path) -> Path:
    """Create ``path`` and make sure files can be written there."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise HarnessError(f"output directory {out} is not writable: {e}") from e
    return out


def run_once(cfg: TrainConfig, run: int) -> tuple[list[MetricsRow], AgentNets]:
    """One seeded training run with periodic greedy evaluation."""
    seed = cfg.seed + run
    rows: list[MetricsRow] = []
    t0 = time.perf_counter()
    eval_env = make_env(cfg.env, cfg.env_horizon)

    def on_episode(ep: int, nets: AgentNets, eps: float) -> None:
        if (ep + 1) % cfg.eval_interval:
            return
        value = evaluate_policy(nets, eval_env, cfg.learner.gamma, cfg.eval_episodes, seed)
        seconds = round(time.perf_counter() - t0, 3) if cfg.record_wall_clock else 0.0
        rows.append(MetricsRow(run, ep + 1, value, eps, seconds))
        log.debug("run %d episode %d return %.3f eps %.3f", run, ep + 1, value, eps)

    nets = train(env_factory(cfg), cfg.learner, cfg.episodes, seed, on_episode)
    return rows, nets


def aggregate(runs: Sequence[Sequence[MetricsRow]], window: int) -> list[dict]:
    """Mean and standard error across runs, raw and smoothed."""
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        raise ValueError("runs have different numbers of evaluation points")
    values = np.array([[row.return_mean for row in r] for r in runs])
    n = values.shape[0]
    mean = values.mean(0)
    se = values.std(0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    mean_s, se_s = smooth(mean, window), smooth(se, window)
    out = []
    for k, row in enumerate(runs[0]):
        out.append({
            "run": "all",
            "episode": row.episode,
            "return_mean": mean[k],
            "epsilon": row.epsilon,
            "seconds": float(np.mean([r[k].seconds for r in runs])),
            "return_se": se[k],
            "return_smoothed": mean_s[k],
            "return_se_smoothed": se_s[k],
        })
    return out


def save_nets(nets: AgentNets, directory: Path, run: int, meta: dict) -> list[Path]:
    paths = []
    if nets.cen is not None:
        paths.append(save_checkpoint(nets.cen, directory / f"run_{run}_cen.mdrq",
                                     {**meta, "role": "cen"}))
    for i, net in enumerate(nets.dec):
        paths.append(save_checkpoint(net, directory / f"run_{run}_dec{i}.mdrq",
                                     {**meta, "role": f"dec{i}"}))
    return paths


def load_nets(directory: str | Path, run: int, env: MacroEnv) -> AgentNets:
    directory = Path(directory)
    nets = AgentNets(env.spec)
    cen = directory / f"run_{run}_cen.mdrq"
    if cen.exists():
        nets.cen = load_checkpoint(cen)
    for i in range(env.spec.n_agents):
        p = directory / f"run_{run}_dec{i}.mdrq"
        if p.exists():
            nets.dec.append(load_checkpoint(p))
    if nets.cen is None and not nets.dec:
        raise HarnessError(f"no checkpoints for run {run} in {directory}")
    if nets.dec and len(nets.dec) != env.spec.n_agents:
        raise HarnessError(f"incomplete per-agent checkpoints for run {run} in {directory}")
    return nets


def run_experiment(cfg: TrainConfig) -> dict:
    """All runs of ``cfg``; writes per-run and aggregate CSVs, config and checkpoints."""
    out = prepare_out_dir(cfg.out_dir)
    cfg.save(out / "config.json")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    all_rows = []
    timings = {}
    for run in range(cfg.num_runs):
        t0 = time.perf_counter()
        rows, nets = run_once(cfg, run)
        timings[f"run_{run}"] = round(time.perf_counter() - t0, 3)
        write_csv(out / f"run_{run}.csv", RUN_FIELDS, [vars(r) for r in rows])
        save_nets(nets, ckpt_dir, run, {"env": cfg.env, "algorithm": cfg.learner.algorithm,
                                         "seed": cfg.seed + run})
        all_rows.append(rows)
        log.info("run %d done: final return %.3f", run, rows[-1].return_mean if rows else float("nan"))
    agg = aggregate(all_rows, cfg.smoothing_window) if all_rows[0] else []
    write_csv(out / "aggregate.csv", AGG_FIELDS, agg)
    (out / "timing.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return {"runs": all_rows, "aggregate": agg, "out_dir": out}


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a metrics CSV into columns; malformed rows raise with their line number."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty metrics file") from None
        missing = {"episode", "return_mean"} - set(header)
        if missing:
            raise ValueError(f"{path}:1: missing columns {sorted(missing)}")
        cols: dict[str, list] = {h: [] for h in header}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            for h, v in zip(header, row):
                if h == "run":
                    cols[h].append(v)
                    continue
                try:
                    cols[h].append(float(v))
                except ValueError:
                    raise ValueError(f"{path}:{line}: bad value {v!r} in column {h!r}") from None
    return {h: np.array(v) if h != "run" else v for h, v in cols.items()}


def trace_episode(env: MacroEnv, policy, gamma: float = 0.98, seed: int = 0,
                  epsilon: float = 0.0) -> tuple[list[dict], float]:
    """Play one episode and describe every boundary as a JSON-serializable dict."""
    from .core import MacroExecutor

    rng = np.random.default_rng(seed)
    ex = MacroExecutor(env, gamma)
    policy.reset(ex.reset(seed))
    names = env.spec.action_names
    lines = []
    while True:
        actions = policy.select(ex.pending, ex.running, epsilon, rng)
        record, done = ex.run_until_any_termination(actions)
        entry = {
            "boundary_time": record.boundary_time,
            "actions": [names[i][a] if names else a for i, a in enumerate(record.actions)],
            "terminated": list(record.terminated),
            "rewards": list(record.rewards),
            "joint_reward": record.joint_reward,
            "next_obs": [list(o) for o in record.next_obs],
            "terminal": record.terminal,
            "truncated": record.truncated,
        }
        if hasattr(env, "snapshot"):
            entry["state"] = env.snapshot()
        else:
            entry["state"] = env.render()
        lines.append(entry)
        if done:
            return lines, ex.discounted_return
        policy.observe(record)


def write_trace(lines: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for entry in lines:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return path
