"""
Group-relative policy optimization for a tabular softmax policy.

The policy keeps one logit row per discrete StateKey over a fixed, named
template set. Everything here is pure: objective, gradient, KL and entropy
are functions of parameter tables and recorded rollouts.

    J(θ) = (1/G) Σ_i min(r_i A_i, clip(r_i, 1-ε, 1+ε) A_i) - β · KL(π_θ || π_ref)
    r_i  = exp(log π_θ(H_i) - log π_θ_old(H_i))

KL is the exact categorical KL averaged over the multiset of visited keys.
"""

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import artifacts
import config

logger = logging.getLogger("CVR.GRPO")

LAST_ACTION_KINDS = ("none", "observe", "get_caption")


class StateKey(NamedTuple):
    turn_index: int
    last_action_kind: str
    last_obs_bucket: int


def make_state_key(turn_index: int, last_action_kind: str, last_obs_text: str, obs_buckets: int) -> StateKey:
    if last_action_kind not in LAST_ACTION_KINDS:
        raise ValueError(f"Unknown last_action_kind {last_action_kind!r}")
    if last_action_kind == "none":
        return StateKey(int(turn_index), "none", 0)
    bucket = zlib.crc32(last_obs_text.encode("utf-8")) % obs_buckets
    return StateKey(int(turn_index), last_action_kind, bucket)


def enumerate_state_keys(turn_limit: int, obs_buckets: int) -> List[StateKey]:
    keys = []
    for t in range(turn_limit):
        keys.append(StateKey(t, "none", 0))
        for kind in LAST_ACTION_KINDS[1:]:
            keys.extend(StateKey(t, kind, b) for b in range(obs_buckets))
    return keys


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


class PolicyParams:
    """
    Logit table keyed by StateKey. Rows that were never written read as
    zeros (the uniform policy), so θ, θ_old and θ_ref stay comparable.
    """

    def __init__(
        self,
        templates: Sequence[str],
        logits: Optional[Dict[StateKey, np.ndarray]] = None,
        obs_buckets: int = config.OBS_BUCKETS,
    ):
        if not templates:
            raise ValueError("PolicyParams needs at least one template")
        if isinstance(obs_buckets, bool) or not isinstance(obs_buckets, int) or obs_buckets <= 0:
            raise ValueError(f"obs_buckets must be a positive integer, got {obs_buckets!r}")
        self.templates: Tuple[str, ...] = tuple(templates)
        self.obs_buckets = obs_buckets
        self.logits: Dict[StateKey, np.ndarray] = {}
        for key, row in (logits or {}).items():
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (self.k,):
                raise ValueError(f"Row for {key} has shape {row.shape}, expected ({self.k},)")
            self.logits[StateKey(*key)] = row.copy()

    @property
    def k(self) -> int:
        return len(self.templates)

    def row(self, key: StateKey) -> np.ndarray:
        row = self.logits.get(key)
        return row.copy() if row is not None else np.zeros(self.k)

    def ensure(self, key: StateKey) -> np.ndarray:
        if key not in self.logits:
            self.logits[key] = np.zeros(self.k)
        return self.logits[key]

    def probs(self, key: StateKey) -> np.ndarray:
        return softmax(self.row(key))

    def log_probs(self, key: StateKey) -> np.ndarray:
        return log_softmax(self.row(key))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.templates, self.logits, self.obs_buckets)

    def apply_gradient(self, grad: Dict[StateKey, np.ndarray], step_size: float) -> None:
        """In-place ascent step θ ← θ + step_size · grad."""
        for key, g in grad.items():
            row = self.ensure(key)
            row += step_size * g

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(row)) for row in self.logits.values())

    # --- persistence ---

    def to_document(self) -> dict:
        return {
            "templates": list(self.templates),
            "obs_buckets": self.obs_buckets,
            "rows": [
                {"key": [key.turn_index, key.last_action_kind, key.last_obs_bucket], "logits": row.tolist()}
                for key, row in sorted(self.logits.items())
            ],
        }

    @classmethod
    def from_document(cls, doc: dict) -> "PolicyParams":
        try:
            rows = {StateKey(int(r["key"][0]), str(r["key"][1]), int(r["key"][2])): r["logits"] for r in doc["rows"]}
            return cls(doc["templates"], rows, doc.get("obs_buckets", config.OBS_BUCKETS))
        except (KeyError, IndexError, TypeError, AttributeError) as exc:
            raise ValueError(f"Malformed params document: {exc!r}") from exc

    def save(self, path: Path) -> None:
        artifacts.atomic_write_json(Path(path), self.to_document())

    @classmethod
    def load(cls, path: Path) -> "PolicyParams":
        return cls.from_document(artifacts.read_json(Path(path)))


class PolicyStep(NamedTuple):
    key: StateKey
    choice: int
    log_prob: float


@dataclass(frozen=True)
class GroupSample:
    """One rollout of a group: its decisions and its episodic reward."""
    steps: Tuple[PolicyStep, ...]
    reward: float


@dataclass(frozen=True)
class GroupBatch:
    script_id: str
    samples: Tuple[GroupSample, ...]
    advantages: Tuple[float, ...] = field(default=())

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.samples], dtype=np.float64)

    @property
    def group_size(self) -> int:
        return len(self.samples)

    def visited(self) -> List[StateKey]:
        return [step.key for s in self.samples for step in s.steps]


def make_group_batch(script_id: str, samples: Sequence[GroupSample], sigma_floor: float = 1e-8) -> GroupBatch:
    adv = group_advantages([s.reward for s in samples], sigma_floor)
    return GroupBatch(script_id, tuple(samples), tuple(float(a) for a in adv))


# --- PRIMITIVES ---

def group_advantages(rewards: Sequence[float], sigma_floor: float = 1e-8) -> np.ndarray:
    """(R_i - mean) / population std; all zeros when std < sigma_floor."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"A group needs at least 2 rewards, got {r.size}")
    sigma = r.std()
    if not sigma >= sigma_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def trajectory_log_prob(params: PolicyParams, steps: Iterable[PolicyStep]) -> float:
    return float(sum(params.log_probs(step.key)[step.choice] for step in steps))


def clipped_surrogate(ratio: float, advantage: float, clip_eps: float) -> float:
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def _categorical_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    log_p = log_softmax(p_logits)
    log_q = log_softmax(q_logits)
    return float(np.sum(np.exp(log_p) * (log_p - log_q)))


def kl_to_reference(params: PolicyParams, ref: PolicyParams, visited: Sequence[StateKey]) -> float:
    """Mean categorical KL(π_params || π_ref) over a multiset of keys; 0 when empty."""
    if params.templates != ref.templates:
        raise ValueError("KL needs both parameter sets to share one template set")
    visited = list(visited)
    if not visited:
        return 0.0
    total = sum(_categorical_kl(params.row(k), ref.row(k)) for k in visited)
    return max(0.0, total / len(visited))


def policy_entropy(params: PolicyParams, visited: Sequence[StateKey]) -> float:
    visited = list(visited)
    if not visited:
        return 0.0
    total = 0.0
    for key in visited:
        log_p = params.log_probs(key)
        total -= float(np.sum(np.exp(log_p) * log_p))
    return total / len(visited)


# --- OBJECTIVE AND GRADIENT ---

def _ratios(theta: PolicyParams, theta_old: PolicyParams, batch: GroupBatch) -> np.ndarray:
    return np.array([
        np.exp(trajectory_log_prob(theta, s.steps) - trajectory_log_prob(theta_old, s.steps))
        for s in batch.samples
    ])


def _check_batch(batch: GroupBatch) -> None:
    if len(batch.advantages) != batch.group_size:
        raise ValueError("Batch advantages missing; build batches with make_group_batch()")
    if batch.group_size < 2:
        raise ValueError("A group needs at least 2 samples")


def grpo_objective(
    theta: PolicyParams,
    theta_old: PolicyParams,
    theta_ref: PolicyParams,
    batch: GroupBatch,
    grpo_config: Optional[config.GrpoConfig] = None,
) -> float:
    cfg = grpo_config or config.GrpoConfig()
    _check_batch(batch)
    ratios = _ratios(theta, theta_old, batch)
    surrogate = np.mean([
        clipped_surrogate(r, a, cfg.clip_eps) for r, a in zip(ratios, batch.advantages)
    ])
    return float(surrogate - cfg.kl_beta * kl_to_reference(theta, theta_ref, batch.visited()))


def grpo_gradient(
    theta: PolicyParams,
    theta_old: PolicyParams,
    theta_ref: PolicyParams,
    batch: GroupBatch,
    grpo_config: Optional[config.GrpoConfig] = None,
) -> Dict[StateKey, np.ndarray]:
    """
    Exact gradient of grpo_objective with respect to every logit of every
    visited key. Where min() selects the clipped constant the surrogate
    contributes nothing; ties go to the unclipped branch.
    """
    cfg = grpo_config or config.GrpoConfig()
    _check_batch(batch)
    grad: Dict[StateKey, np.ndarray] = {}

    def _acc(key: StateKey, g: np.ndarray) -> None:
        if key in grad:
            grad[key] += g
        else:
            grad[key] = g.copy()

    g_size = batch.group_size
    ratios = _ratios(theta, theta_old, batch)
    for sample, ratio, adv in zip(batch.samples, ratios, batch.advantages):
        clipped = min(max(ratio, 1.0 - cfg.clip_eps), 1.0 + cfg.clip_eps)
        if ratio * adv > clipped * adv or adv == 0.0:
            continue
        scale = adv * ratio / g_size
        for step in sample.steps:
            # ∇_z log softmax(z)[c] = onehot(c) - p
            g = -theta.probs(step.key)
            g[step.choice] += 1.0
            _acc(step.key, scale * g)

    visited = batch.visited()
    if cfg.kl_beta > 0 and visited:
        weight = -cfg.kl_beta / len(visited)
        for key in visited:
            log_p = theta.log_probs(key)
            log_q = theta_ref.log_probs(key)
            p = np.exp(log_p)
            kl = float(np.sum(p * (log_p - log_q)))
            _acc(key, weight * p * ((log_p - log_q) - kl))

    for key in set(visited):
        grad.setdefault(key, np.zeros(theta.k))
    return grad
