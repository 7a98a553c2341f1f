"""Rollout evaluation, Wilson score intervals, ablations and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import sim
from .errors import InvalidArgument, PerceptionError
from .percept import OracleBackend
from .policy import VARIANTS, PolicyConfig, WindowBuilder, fit

log = logging.getLogger(__name__)

CSV_COLUMNS = ("task", "instance", "variant", "n", "successes", "rate", "ci_low", "ci_high")


def wilson_ci(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, clipped to [0, 1]."""
    if n < 1:
        raise InvalidArgument("Wilson interval needs n >= 1")
    if not 0 <= successes <= n:
        raise InvalidArgument(f"successes must lie in [0, {n}], got {successes}")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    # keep the point estimate inside despite rounding at p = 0 or 1
    return max(0.0, min(center - half, p)), min(1.0, max(center + half, p))


def format_cell(rate: float, low: float, high: float) -> str:
    return f"{rate:.2f} [{low:.2f}, {high:.2f}]"


@dataclass
class EvalResult:
    task: str
    instance: str
    variant: str
    n_trials: int
    successes: int
    success_rate: float
    ci_low: float
    ci_high: float
    trials: list[dict] = field(default_factory=list)

    @classmethod
    def from_trials(cls, task: str, instance: str, variant: str, trials: list[dict]) -> "EvalResult":
        n = len(trials)
        wins = sum(1 for t in trials if t["success"])
        lo, hi = wilson_ci(wins, n)
        return cls(task, instance, variant, n, wins, wins / n, lo, hi, trials)

    def cell(self) -> str:
        return format_cell(self.success_rate, self.ci_low, self.ci_high)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(**d)

    def overlaps(self, other: "EvalResult") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


# -- rollouts ----------------------------------------------------------------


class ScriptedPolicy:
    """Wraps the environment's scripted expert behind the policy interface."""

    variant = "expert"
    n_obs = 1
    act_horizon = 1

    def plan(self, envs, windows, rngs):
        return [env.expert_action(None)[None] for env in envs]


class ZeroPolicy:
    variant = "zero"
    n_obs = 1
    act_horizon = 8

    def __init__(self, action_dim: int):
        self.action_dim = action_dim

    def plan(self, envs, windows, rngs):
        return [np.zeros((self.act_horizon, self.action_dim)) for _ in envs]


def run_trial(policy, task: str, inst: sim.InstanceSpec, seed: int, backend_factory=None, prompt: str | None = None, step_limit: int | None = None) -> dict:
    env = sim.make_env(task, inst, step_limit)
    backend = backend_factory(env) if backend_factory is not None else OracleBackend(env)
    builder = WindowBuilder(policy.variant, policy.n_obs, backend, prompt or inst.prompt)
    rng = np.random.default_rng([seed, 7919])
    obs = env.reset(seed)
    queue: list[np.ndarray] = []
    done, error = False, None
    try:
        while not done:
            builder.push(obs.rgb, obs.q)
            if not queue:
                queue = list(policy.plan([env], [builder.window()], [rng])[0])
            obs, done, _ = env.step(queue.pop(0))
    except PerceptionError as exc:
        error = str(exc)
        log.warning("trial seed %d: perception failed, counted as failure: %s", seed, exc)
    return {
        "seed": seed,
        "steps": env.state.step,
        "metric": env.metric(),
        "success": bool(error is None and env.success()),
        "error": error,
    }


def run_rollouts(
    policy,
    task: str,
    inst: sim.InstanceSpec,
    n_trials: int = 20,
    seed_base: int = 1000,
    backend_factory: Callable | None = None,
    prompt: str | None = None,
    step_limit: int | None = None,
) -> EvalResult:
    """Evaluate ``policy`` on ``n_trials`` environments seeded ``seed_base + i``."""
    if n_trials < 1:
        raise InvalidArgument("n_trials must be >= 1")
    trials = [run_trial(policy, task, inst, seed_base + i, backend_factory, prompt, step_limit) for i in range(n_trials)]
    return EvalResult.from_trials(task, inst.render_style, policy.variant, trials)


# -- ablation ----------------------------------------------------------------


def ablation_run(
    dataset,
    instances: Iterable[sim.InstanceSpec],
    variants: Iterable[str] = VARIANTS,
    config: PolicyConfig | None = None,
    n_trials: int = 20,
    seed_base: int = 1000,
    out_dir: str | Path | None = None,
) -> dict[str, dict[str, EvalResult]]:
    """Train every variant on ``dataset`` and evaluate it on every instance.

    Returns ``{variant: {render_style: EvalResult}}``.
    """
    config = PolicyConfig.desk() if config is None else config
    instances = list(instances)
    matrix: dict[str, dict[str, EvalResult]] = {}
    for variant in variants:
        cfg = PolicyConfig.from_dict({**config.to_dict(), "variant": variant})
        run_dir = None if out_dir is None else Path(out_dir) / variant
        policy = fit(dataset, cfg, log_path=None if run_dir is None else _mkdir(run_dir) / "train_log.jsonl")
        if run_dir is not None:
            policy.save(run_dir)
        matrix[variant] = {}
        for inst in instances:
            res = run_rollouts(policy, dataset.task, inst, n_trials, seed_base)
            log.info("%s on %s: %s", variant, inst.render_style, res.cell())
            matrix[variant][inst.render_style] = res
    return matrix


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def flatten(matrix: dict[str, dict[str, EvalResult]]) -> list[EvalResult]:
    return [r for row in matrix.values() for r in row.values()]


# -- reporting ---------------------------------------------------------------


def emit_report(results: list[EvalResult], out_dir: str | Path) -> dict[str, Path]:
    """Write results.csv, results.txt and one bar chart per task."""
    if not results:
        raise InvalidArgument("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "txt": out / "results.txt"}

    with open(paths["csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow([r.task, r.instance, r.variant, r.n_trials, r.successes, f"{r.success_rate:.2f}", f"{r.ci_low:.2f}", f"{r.ci_high:.2f}"])

    by_task: dict[str, list[EvalResult]] = defaultdict(list)
    for r in results:
        by_task[r.task].append(r)
    lines = []
    for task, rows in by_task.items():
        instances = list(dict.fromkeys(r.instance for r in rows))
        variants = list(dict.fromkeys(r.variant for r in rows))
        cells = {(r.variant, r.instance): r.cell() for r in rows}
        header = ["variant"] + instances
        table = [[v] + [cells.get((v, i), "-") for i in instances] for v in variants]
        widths = [max(len(str(row[c])) for row in [header] + table) for c in range(len(header))]
        fmt = lambda row: "  ".join(str(x).ljust(wd) for x, wd in zip(row, widths)).rstrip()  # noqa: E731
        lines += [f"task: {task}", fmt(header), fmt(["-" * wd for wd in widths])]
        lines += [fmt(row) for row in table]
        lines.append("")
        paths[f"png:{task}"] = _bar_chart(task, rows, instances, variants, out / f"{task}.png")
    paths["txt"].write_text("\n".join(lines))
    return paths


def _bar_chart(task, rows, instances, variants, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lookup = {(r.variant, r.instance): r for r in rows}
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(instances), 3.2))
    width = 0.8 / max(len(variants), 1)
    for j, v in enumerate(variants):
        xs, ys, err = [], [], [[], []]
        for i, inst in enumerate(instances):
            r = lookup.get((v, inst))
            if r is None:
                continue
            xs.append(i + (j - (len(variants) - 1) / 2) * width)
            ys.append(r.success_rate)
            err[0].append(r.success_rate - r.ci_low)
            err[1].append(r.ci_high - r.success_rate)
        ax.bar(xs, ys, width, yerr=err, capsize=3, label=v)
    ax.set_xticks(range(len(instances)), instances)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate (95% Wilson CI)")
    ax.set_title(task)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def save_results(results: list[EvalResult], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in results], indent=2))


def load_results(path: str | Path) -> list[EvalResult]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [EvalResult.from_dict(d) for d in data]
