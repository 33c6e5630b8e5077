"""
GRPO core tests
Run: pytest tests/test_grpo_core.py -v
"""
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import config
from grpo_core import (
    GroupBatch,
    GroupSample,
    PolicyParams,
    PolicyStep,
    StateKey,
    clipped_surrogate,
    enumerate_state_keys,
    group_advantages,
    grpo_gradient,
    grpo_objective,
    kl_to_reference,
    make_group_batch,
    make_state_key,
    policy_entropy,
    trajectory_log_prob,
)

TEMPLATES = ("a", "b", "c", "d")
KEYS = [StateKey(0, "none", 0), StateKey(1, "observe", 3), StateKey(1, "get_caption", 5), StateKey(2, "observe", 0)]


def _random_params(rng, scale=1.0):
    return PolicyParams(TEMPLATES, {k: rng.normal(0, scale, size=len(TEMPLATES)) for k in KEYS})


def _random_batch(rng, group_size=4):
    samples = []
    for _ in range(group_size):
        n = int(rng.integers(1, 5))
        steps = tuple(
            PolicyStep(KEYS[int(rng.integers(len(KEYS)))], int(rng.integers(len(TEMPLATES))), 0.0)
            for _ in range(n)
        )
        samples.append(GroupSample(steps, float(rng.choice([0.0, 0.1, 1.0, 1.1]))))
    return make_group_batch("s", samples)


def _numeric_gradient(theta, old, ref, batch, cfg, h=1e-5):
    out = {}
    for key in set(batch.visited()):
        g = np.zeros(theta.k)
        for j in range(theta.k):
            plus, minus = theta.copy(), theta.copy()
            plus.ensure(key)[j] += h
            minus.ensure(key)[j] -= h
            g[j] = (grpo_objective(plus, old, ref, batch, cfg) - grpo_objective(minus, old, ref, batch, cfg)) / (2 * h)
        out[key] = g
    return out


def _near_kink(theta, old, batch, eps, margin=1e-3):
    for sample, adv in zip(batch.samples, batch.advantages):
        if adv == 0.0:
            continue
        ratio = math.exp(trajectory_log_prob(theta, sample.steps) - trajectory_log_prob(old, sample.steps))
        if abs(ratio - (1 - eps)) < margin or abs(ratio - (1 + eps)) < margin:
            return True
    return False


class TestAdvantages:
    """Group-normalized advantages."""

    def test_two_rewards(self):
        """[1.1, 0.1] normalizes to [1, -1]."""
        np.testing.assert_allclose(group_advantages([1.1, 0.1]), [1.0, -1.0])

    def test_zero_variance(self):
        """Identical rewards give zero advantages, not NaN."""
        assert group_advantages([1.1] * 8).tolist() == [0.0] * 8

    def test_group_of_one_rejected(self):
        """A single reward is not a group."""
        with pytest.raises(ValueError):
            group_advantages([1.0])

    def test_thousand_random_groups(self):
        """Advantages have zero mean and unit population std, or are all zero."""
        rng = np.random.default_rng(3)
        for _ in range(1000):
            rewards = rng.choice([0.0, 0.1, 1.0, 1.1], size=int(rng.integers(2, 17)))
            adv = group_advantages(rewards)
            assert abs(adv.mean()) < 1e-9
            if np.ptp(rewards) == 0:
                assert not adv.any()
            else:
                assert adv.std() == pytest.approx(1.0)
            assert np.all(np.isfinite(adv))

    @given(st.lists(st.sampled_from([0.0, 0.1, 1.0, 1.1]), min_size=2, max_size=16))
    def test_normalized_property(self, rewards):
        """Advantages sum to zero for every reward group."""
        assert abs(group_advantages(rewards).sum()) < 1e-9


class TestPrimitives:
    """Log-probs, surrogate, KL and entropy."""

    def test_uniform_log_prob(self):
        """Each decision of a uniform 4-way policy costs log(1/4)."""
        params = PolicyParams(TEMPLATES)
        steps = [PolicyStep(KEYS[0], 1, 0.0), PolicyStep(KEYS[1], 3, 0.0)]
        assert trajectory_log_prob(params, steps[:1]) == pytest.approx(math.log(0.25))
        assert trajectory_log_prob(params, steps) == pytest.approx(2 * math.log(0.25))

    @pytest.mark.parametrize("ratio,adv,expected", [
        (1.5, 1.0, 1.2),
        (0.5, -1.0, -0.8),
        (0.5, 1.0, 0.5),
        (1.5, -1.0, -1.5),
        (1.0, 2.0, 2.0),
    ])
    def test_clipped_surrogate(self, ratio, adv, expected):
        """min(r·A, clip(r)·A) on both sides of the clip range."""
        assert clipped_surrogate(ratio, adv, 0.2) == pytest.approx(expected)

    def test_kl_closed_form(self):
        """Two-way KL matches the textbook formula."""
        p = PolicyParams(("x", "y"), {KEYS[0]: np.log([0.9, 0.1])})
        q = PolicyParams(("x", "y"))
        expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
        assert kl_to_reference(p, q, [KEYS[0]]) == pytest.approx(expected)
        assert kl_to_reference(q, q, [KEYS[0]]) == 0.0
        assert kl_to_reference(p, q, []) == 0.0

    def test_kl_mismatched_templates(self):
        """KL needs one template set."""
        with pytest.raises(ValueError):
            kl_to_reference(PolicyParams(("x",)), PolicyParams(("y",)), [KEYS[0]])

    def test_entropy(self):
        """Uniform rows have entropy log K."""
        assert policy_entropy(PolicyParams(TEMPLATES), KEYS) == pytest.approx(math.log(4))
        peaked = PolicyParams(TEMPLATES, {KEYS[0]: np.array([20.0, 0, 0, 0])})
        assert policy_entropy(peaked, [KEYS[0]]) < 1e-6


class TestObjectiveAndGradient:
    """grpo_objective and its exact gradient."""

    def test_on_policy_identity(self):
        """At θ = θ_old with β = 0 the gradient is the mean advantage-weighted score."""
        rng = np.random.default_rng(5)
        cfg = config.GrpoConfig(kl_beta=0.0)
        theta = _random_params(rng)
        batch = _random_batch(rng)
        grad = grpo_gradient(theta, theta.copy(), theta.copy(), batch, cfg)
        expected = {k: np.zeros(4) for k in set(batch.visited())}
        for sample, adv in zip(batch.samples, batch.advantages):
            for step in sample.steps:
                g = -theta.probs(step.key)
                g[step.choice] += 1.0
                expected[step.key] += adv / batch.group_size * g
        for key in expected:
            np.testing.assert_allclose(grad[key], expected[key], atol=1e-12)
        assert grpo_objective(theta, theta.copy(), theta.copy(), batch, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_equal_rewards_at_reference_give_zero_gradient(self):
        """No advantage and no drift from π_ref means nothing to learn."""
        theta = PolicyParams(TEMPLATES)
        steps = (PolicyStep(KEYS[0], 0, 0.0), PolicyStep(KEYS[1], 2, 0.0))
        batch = make_group_batch("s", [GroupSample(steps, 1.1)] * 4)
        grad = grpo_gradient(theta, theta.copy(), theta.copy(), batch)
        assert set(grad) == {KEYS[0], KEYS[1]}
        assert all(not g.any() for g in grad.values())

    def test_beta_zero_is_pure_surrogate(self):
        """With β = 0 the objective is the mean clipped surrogate."""
        rng = np.random.default_rng(8)
        cfg = config.GrpoConfig(kl_beta=0.0)
        theta, old, ref = _random_params(rng), _random_params(rng), _random_params(rng)
        batch = _random_batch(rng)
        manual = np.mean([
            clipped_surrogate(
                math.exp(trajectory_log_prob(theta, s.steps) - trajectory_log_prob(old, s.steps)), a, cfg.clip_eps,
            )
            for s, a in zip(batch.samples, batch.advantages)
        ])
        assert grpo_objective(theta, old, ref, batch, cfg) == pytest.approx(manual)

    def test_finite_differences(self):
        """The analytic gradient matches central differences on 100 instances away from clip kinks."""
        rng = np.random.default_rng(42)
        cfg = config.GrpoConfig(kl_beta=0.05)
        checked = 0
        while checked < 100:
            old = _random_params(rng)
            theta = old.copy()
            for key in KEYS:
                theta.ensure(key)[:] += rng.normal(0, 0.15, size=4)
            ref = _random_params(rng, 0.5)
            batch = _random_batch(rng, group_size=int(rng.integers(2, 6)))
            if _near_kink(theta, old, batch, cfg.clip_eps):
                continue
            analytic = grpo_gradient(theta, old, ref, batch, cfg)
            numeric = _numeric_gradient(theta, old, ref, batch, cfg)
            for key, g in numeric.items():
                np.testing.assert_allclose(analytic[key], g, rtol=1e-4, atol=1e-6)
            checked += 1

    def test_ascent_step_improves_objective(self):
        """A small step along the gradient does not lower the objective."""
        rng = np.random.default_rng(9)
        theta = _random_params(rng)
        batch = _random_batch(rng)
        old, ref = theta.copy(), theta.copy()
        before = grpo_objective(theta, old, ref, batch)
        theta.apply_gradient(grpo_gradient(theta, old, ref, batch), 1e-4)
        assert grpo_objective(theta, old, ref, batch) >= before - 1e-12

    def test_batch_without_advantages(self):
        """Batches must come from make_group_batch."""
        batch = GroupBatch("s", (GroupSample((), 1.0), GroupSample((), 0.0)))
        theta = PolicyParams(TEMPLATES)
        with pytest.raises(ValueError):
            grpo_objective(theta, theta, theta, batch)


class TestStateKeys:
    """Discrete state keys."""

    def test_none_has_bucket_zero(self):
        """Before any tool call the bucket is always 0."""
        assert make_state_key(0, "none", "anything", 16) == StateKey(0, "none", 0)

    def test_bucket_is_stable(self):
        """The same observation always maps to the same bucket."""
        a = make_state_key(3, "observe", "Video 1 [0s-60s]: x", 16)
        b = make_state_key(3, "observe", "Video 1 [0s-60s]: x", 16)
        assert a == b
        assert 0 <= a.last_obs_bucket < 16

    def test_unknown_kind(self):
        """Only known action kinds form keys."""
        with pytest.raises(ValueError):
            make_state_key(0, "answer", "", 16)

    def test_enumerate(self):
        """Every turn has one none key plus a bucket per tool kind."""
        keys = enumerate_state_keys(30, 16)
        assert len(keys) == 30 * (1 + 2 * 16)
        assert len(set(keys)) == len(keys)


class TestPolicyParams:
    """Parameter tables."""

    def test_save_load(self, tmp_path):
        """Saved params load back identical."""
        params = _random_params(np.random.default_rng(1))
        path = tmp_path / "params.json"
        params.save(path)
        loaded = PolicyParams.load(path)
        assert loaded.templates == TEMPLATES
        assert set(loaded.logits) == set(KEYS)
        for key in KEYS:
            np.testing.assert_array_equal(loaded.row(key), params.row(key))

    def test_unwritten_rows_are_uniform(self):
        """Missing rows read as zeros."""
        assert PolicyParams(TEMPLATES).probs(KEYS[2]).tolist() == [0.25] * 4

    def test_bad_row_shape(self):
        """Rows must match the template count."""
        with pytest.raises(ValueError):
            PolicyParams(TEMPLATES, {KEYS[0]: np.zeros(3)})

    def test_obs_buckets_persist(self, tmp_path):
        """The bucket count is saved with the table and survives copy."""
        path = tmp_path / "params.json"
        PolicyParams(TEMPLATES, obs_buckets=4).save(path)
        loaded = PolicyParams.load(path)
        assert loaded.obs_buckets == 4
        assert loaded.copy().obs_buckets == 4

    def test_documents_without_buckets_use_default(self):
        """Older documents fall back to the default bucket count."""
        assert PolicyParams.from_document({"templates": ["a"], "rows": []}).obs_buckets == 16

    @pytest.mark.parametrize("buckets", [0, -1, 2.0, True])
    def test_bad_obs_buckets(self, buckets):
        """The bucket count must be a positive integer."""
        with pytest.raises(ValueError):
            PolicyParams(TEMPLATES, obs_buckets=buckets)

    def test_malformed_document(self):
        """A document without rows is rejected."""
        with pytest.raises(ValueError):
            PolicyParams.from_document({"templates": ["a"]})

    def test_copy_is_independent(self):
        """Writing to a copy leaves the original alone."""
        params = PolicyParams(TEMPLATES)
        other = params.copy()
        other.ensure(KEYS[0])[0] = 5.0
        assert params.row(KEYS[0])[0] == 0.0
