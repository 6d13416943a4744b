"""Inference loop with tick-budget accounting and online evaluation.

The frame bytes handed to the policy here come from the same
`resize_frame` symbol the training loader uses; that single-resampler
rule is load-bearing (a second implementation is how train/inference
distribution shift crept into pixel pipelines historically).
"""
from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import env as E
from .data import resize_frame
from .policy import PolicyNet, act, fresh_cache, inference_threads


@dataclass
class TickBudget:
    """Fixed-rate tick accounting: 20 Hz -> 50 ms per tick by default."""

    tick_rate: float = 20.0
    latencies: list[float] = field(default_factory=list)
    overruns: int = 0

    @property
    def budget(self) -> float:
        return 1.0 / self.tick_rate

    def record(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("latency must be non-negative")
        self.latencies.append(seconds)
        if seconds > self.budget:
            self.overruns += 1

    def report(self) -> dict:
        if not self.latencies:
            return {"ticks": 0, "overruns": 0}
        xs = sorted(self.latencies)
        q = lambda p: xs[min(int(p * len(xs)), len(xs) - 1)]
        return {
            "ticks": len(xs),
            "mean_ms": 1e3 * statistics.fmean(xs),
            "p50_ms": 1e3 * q(0.50),
            "p99_ms": 1e3 * q(0.99),
            "max_ms": 1e3 * xs[-1],
            "budget_ms": 1e3 * self.budget,
            "overruns": self.overruns,
        }


@dataclass
class AgentEvalReport:
    scores: list[int]
    mean_score: float
    median_score: float
    latency: dict

    def __str__(self) -> str:
        lat = self.latency
        return (f"episodes={len(self.scores)} mean_score={self.mean_score:.3f} "
                f"median={self.median_score:.1f} "
                f"p99_latency={lat.get('p99_ms', float('nan')):.1f}ms "
                f"overruns={lat.get('overruns', 0)}")


def run_agent(env_cfg: E.EnvConfig, net: PolicyNet, episodes: int,
              tick_rate: float = 20.0, seed0: int = 0,
              temperature: float = 0.0,
              obs_transform: Callable[[np.ndarray], np.ndarray] | None = None
              ) -> AgentEvalReport:
    """Headless online evaluation over seeded episodes.

    Runs render -> resize -> act -> step as fast as the machine allows
    while still measuring per-tick inference latency against the tick
    budget. Sampling is argmax by default for determinism.
    """
    size = net.config.frame_size
    budget = TickBudget(tick_rate=tick_rate)
    scores: list[int] = []
    with inference_threads(1):
        for ep in range(episodes):
            cfg = dataclasses.replace(env_cfg, seed=seed0 + ep)
            state, frame = E.reset(cfg)
            cache = fresh_cache(net)
            rng = np.random.default_rng(seed0 + ep)
            done = state.done
            while not done:
                t0 = time.perf_counter()
                obs = resize_frame(frame, size, size)
                if obs_transform is not None:
                    obs = obs_transform(obs)
                action, cache, _ = act(net, cache, obs, rng, temperature)
                budget.record(time.perf_counter() - t0)
                state, frame, _, done = E.step(state, action)
            scores.append(state.score)
    return AgentEvalReport(scores=scores,
                           mean_score=float(np.mean(scores)),
                           median_score=float(np.median(scores)),
                           latency=budget.report())


def run_policy_baseline(env_cfg: E.EnvConfig, policy: E.PolicyFn, episodes: int,
                        seed0: int = 0) -> AgentEvalReport:
    """Score a scripted policy (expert/random) under the same seeding."""
    scores = []
    for ep in range(episodes):
        cfg = dataclasses.replace(env_cfg, seed=seed0 + ep)
        traj = E.generate_episode(cfg, policy, np.random.default_rng(seed0 + ep))
        scores.append(traj.score)
    return AgentEvalReport(scores=scores, mean_score=float(np.mean(scores)),
                           median_score=float(np.median(scores)), latency={})
