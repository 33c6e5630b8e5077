"""
GRPO training loop for the tabular softmax policy.

Per iteration: freeze θ_old, sample a batch of scripts, roll out G episodes
per script against the deterministic simulator under θ_old, score them, and
take one gradient-ascent step per script group. π_ref is the initial policy
and is never refreshed.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import artifacts
import config
import task_profiles
from grpo_core import (
    GroupBatch,
    GroupSample,
    PolicyParams,
    grpo_gradient,
    kl_to_reference,
    make_group_batch,
    policy_entropy,
)
from providers.softmax_policy import DEFAULT_TEMPLATES, SoftmaxPolicy, initial_params
from reward_model import RewardBreakdown, total_reward
from script_model import SemanticScript
from workers.episode_engine import Trajectory, run_episode
from workers.simulator import SimulatorEnvironment

logger = logging.getLogger("CVR.Trainer")

HISTORY_FIELDS = ("iteration", "mean_r_total", "mean_r_ans", "mean_r_fmt", "entropy", "kl_to_ref")
TRAILING_WINDOW = 5


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    mean_r_total: float
    mean_r_ans: float
    mean_r_fmt: float
    entropy: float
    kl_to_ref: float


@dataclass
class TrainingResult:
    params: PolicyParams
    reference: PolicyParams
    history: List[IterationStats] = field(default_factory=list)
    stopped_early: bool = False

    def trailing_mean(self, window: int = TRAILING_WINDOW) -> float:
        tail = self.history[-window:]
        return float(np.mean([h.mean_r_total for h in tail])) if tail else float("nan")

    def window_means(self, window: int = TRAILING_WINDOW) -> List[float]:
        """Mean R_total per consecutive window, aligned so the last window is the trailing one."""
        rewards = [h.mean_r_total for h in self.history]
        start = len(rewards) % window
        return [float(np.mean(rewards[i:i + window])) for i in range(start, len(rewards), window)]


@dataclass(frozen=True)
class Rollout:
    script_id: str
    trajectory: Trajectory
    sample: GroupSample
    reward: RewardBreakdown


def _rollout(
    script: SemanticScript,
    theta_old: PolicyParams,
    rng: np.random.Generator,
    episode_config: config.EpisodeConfig,
    reward_config: config.RewardConfig,
    obs_buckets: int,
    system_prompt: str,
) -> Rollout:
    policy = SoftmaxPolicy(theta_old, script, obs_buckets=obs_buckets)
    traj = run_episode(
        policy, SimulatorEnvironment(script), script, episode_config,
        system_prompt=system_prompt, rng=rng,
    )
    reward = total_reward(traj, script.gold, reward_config)
    return Rollout(script.script_id, traj, GroupSample(tuple(policy.steps), reward.r_total), reward)


def train(
    corpus: Sequence[SemanticScript],
    grpo_config: Optional[config.GrpoConfig] = None,
    episode_config: Optional[config.EpisodeConfig] = None,
    *,
    reward_config: Optional[config.RewardConfig] = None,
    templates: Sequence[str] = DEFAULT_TEMPLATES,
    params: Optional[PolicyParams] = None,
    on_iteration: Optional[Callable[[IterationStats, List[Rollout]], None]] = None,
) -> TrainingResult:
    cfg = grpo_config or config.GrpoConfig()
    episode_config = episode_config or config.EpisodeConfig()
    reward_config = reward_config or config.RewardConfig()
    if not corpus:
        raise ValueError("Training needs a non-empty corpus")
    free_form = [s.script_id for s in corpus if s.task_type == "free_form"]
    if free_form:
        raise ValueError(f"free_form scripts have no automatic reward: {free_form[:5]}")

    if params is not None and params.obs_buckets != cfg.obs_buckets:
        raise ValueError(f"params use {params.obs_buckets} obs buckets, config asks for {cfg.obs_buckets}")
    theta = params.copy() if params is not None else initial_params(templates, obs_buckets=cfg.obs_buckets)
    theta_ref = theta.copy()
    result = TrainingResult(params=theta, reference=theta_ref)

    seeds = np.random.SeedSequence(cfg.seed)
    order_rng = np.random.default_rng(seeds.spawn(1)[0])
    prompts: Dict[str, str] = {
        s.script_id: task_profiles.get_system_instruction(
            s.task_type, s.task_tag, video_count=s.video_count, episode_config=episode_config,
        )
        for s in corpus
    }
    batch_size = min(cfg.batch_size, len(corpus))
    logger.info(
        "🚀 GRPO training: %d scripts, batch %d, G=%d, %d iterations, lr=%s",
        len(corpus), batch_size, cfg.group_size, cfg.iterations, cfg.learning_rate,
    )

    executor = ThreadPoolExecutor(max_workers=cfg.rollout_workers) if cfg.rollout_workers > 1 else None
    try:
        for iteration in tqdm(range(1, cfg.iterations + 1), disable=not cfg.show_progress, desc="GRPO"):
            theta_old = theta.copy()
            picked = [corpus[int(i)] for i in order_rng.permutation(len(corpus))[:batch_size]]
            jobs: List[Tuple[SemanticScript, np.random.Generator]] = [
                (script, np.random.default_rng(child))
                for script in picked
                for child in seeds.spawn(cfg.group_size)
            ]

            def _run(job):
                script, rng = job
                return _rollout(
                    script, theta_old, rng, episode_config, reward_config,
                    cfg.obs_buckets, prompts[script.script_id],
                )

            rollouts = list(executor.map(_run, jobs)) if executor else [_run(j) for j in jobs]

            rewards = np.array([r.reward.r_total for r in rollouts])
            mean_total = float(rewards.mean())
            if math.isnan(mean_total):
                raise TrainingDivergedError(f"Mean reward is NaN at iteration {iteration}")

            visited = []
            for start in range(0, len(rollouts), cfg.group_size):
                group = rollouts[start:start + cfg.group_size]
                batch: GroupBatch = make_group_batch(group[0].script_id, [r.sample for r in group], cfg.sigma_floor)
                grad = grpo_gradient(theta, theta_old, theta_ref, batch, cfg)
                theta.apply_gradient(grad, cfg.learning_rate)
                visited.extend(batch.visited())
            if not theta.is_finite():
                raise TrainingDivergedError(f"Non-finite logits after iteration {iteration}")

            stats = IterationStats(
                iteration=iteration,
                mean_r_total=mean_total,
                mean_r_ans=float(np.mean([r.reward.r_ans for r in rollouts])),
                mean_r_fmt=float(np.mean([r.reward.r_fmt for r in rollouts])),
                entropy=policy_entropy(theta_old, visited),
                kl_to_ref=kl_to_reference(theta, theta_ref, visited),
            )
            result.history.append(stats)
            if on_iteration is not None:
                on_iteration(stats, rollouts)
            logger.debug(
                "Iteration %d: R=%.3f ans=%.3f fmt=%.3f H=%.3f KL=%.4f",
                iteration, stats.mean_r_total, stats.mean_r_ans, stats.mean_r_fmt, stats.entropy, stats.kl_to_ref,
            )
            if iteration % 10 == 0:
                logger.info("Iteration %d: mean R_total %.3f, entropy %.3f", iteration, stats.mean_r_total, stats.entropy)

            if (
                cfg.early_stop_reward is not None
                and len(result.history) >= TRAILING_WINDOW
                and result.trailing_mean() >= cfg.early_stop_reward
            ):
                logger.info("✅ Early stop at iteration %d (trailing mean %.3f)", iteration, result.trailing_mean())
                result.stopped_early = True
                break
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    return result


def write_history_csv(path: Path, history: Sequence[IterationStats]) -> None:
    artifacts.write_csv(Path(path), HISTORY_FIELDS, (asdict(h) for h in history))
