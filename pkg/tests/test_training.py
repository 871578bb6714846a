import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from leaderpomo import autodiff as ad
from leaderpomo.errors import ConfigError, ParameterError, TrainingDiverged
from leaderpomo.policy import SAMPLING, rollout_batch
from leaderpomo.problems import TSP, sample_instance
from leaderpomo.training import (
    TrainConfig,
    TrainState,
    compute_advantage_eq1,
    compute_advantage_final,
    compute_advantage_main,
    compute_advantage_pomo,
    entropy,
    entropy_gradient,
    entropy_probe,
    surrogate_loss,
    train_final,
    train_main,
)

reward_rows = arrays(
    np.float64, st.tuples(st.integers(1, 6), st.integers(2, 9)),
    elements=st.floats(-50, 0, allow_nan=False, allow_infinity=False),
)


# ------------------------------------------------------------------ advantages


def test_main_phase_hand_example():
    adv = compute_advantage_main([[-3.0, -5.0, -4.0]], 2.0)
    assert adv.values.tolist() == [[1.0, -0.5, 0.0]]
    assert adv.leader_index.tolist() == [0]


def test_final_phase_hand_example():
    adv = compute_advantage_final([[-3.0, -5.0, -4.0]])
    assert adv.values.tolist() == [[1.0, 0.0, 0.0]]


def test_equal_rewards_give_exact_zeros():
    for adv in (compute_advantage_main([[-2.7] * 5], 3.0), compute_advantage_final([[-2.7] * 5])):
        assert np.all(adv.values == 0.0) and adv.leader_index[0] == 0


def test_ties_go_to_lowest_index():
    assert compute_advantage_main([[-4.0, -1.0, -1.0, -3.0]], 2.0).leader_index[0] == 1


def test_alpha_must_exceed_one():
    for bad in (1.0, 0.5, math.inf, math.nan):
        with pytest.raises(ParameterError, match="α>1"):
            compute_advantage_main([[-1.0, -2.0]], bad)


def test_single_rollout_rejected():
    with pytest.raises(ParameterError):
        compute_advantage_main([[-1.0], [-2.0]], 2.0)


@settings(max_examples=100, deadline=None)
@given(reward_rows, st.floats(1.01, 100))
def test_main_phase_contract(r, alpha):
    adv = compute_advantage_main(r, alpha)
    c = r - r.mean(axis=1, keepdims=True)
    rows = np.arange(len(r))
    lead_r = r[rows, adv.leader_index]
    assert np.all(lead_r >= r.max(axis=1) - 1e-9)
    # lowest index among tied maxima
    assert all(np.all(r[i, : adv.leader_index[i]] < lead_r[i]) for i in rows)
    np.testing.assert_allclose(c.sum(axis=1), 0, atol=1e-5)
    expect = c / alpha
    expect[rows, adv.leader_index] = c[rows, adv.leader_index]
    np.testing.assert_allclose(adv.values, expect, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(reward_rows, st.floats(1.01, 100))
def test_eq1_form_is_alpha_times_main_form(r, alpha):
    a, b = compute_advantage_main(r, alpha), compute_advantage_eq1(r, alpha)
    assert np.array_equal(a.leader_index, b.leader_index)
    np.testing.assert_allclose(b.values, alpha * a.values, rtol=1e-12, atol=1e-12)
    assert np.array_equal(np.sign(a.values), np.sign(b.values))


@settings(max_examples=100, deadline=None)
@given(reward_rows)
def test_final_phase_only_leader_nonnegative(r):
    adv = compute_advantage_final(r)
    rows = np.arange(len(r))
    assert np.all(adv.values >= 0)
    off = adv.values.copy()
    off[rows, adv.leader_index] = 0
    assert np.all(off == 0)


@settings(max_examples=50, deadline=None)
@given(reward_rows)
def test_large_alpha_limit_is_final_phase(r):
    np.testing.assert_allclose(compute_advantage_main(r, 1e12).values, compute_advantage_final(r).values, atol=1e-9)


def test_pomo_advantage_is_centered():
    adv = compute_advantage_pomo([[-3.0, -5.0, -4.0]])
    assert adv.values.tolist() == [[1.0, -1.0, 0.0]]


# ------------------------------------------------------------------ entropy / leader logit


def test_uniform_distribution_is_stationary():
    z = np.zeros(5)
    before, _ = entropy_probe(z, 2)
    assert before == pytest.approx(math.log(5))
    assert abs(entropy_gradient(z, 2)) < 1e-15


def test_low_leader_probability_raises_entropy():
    z = np.log([0.1, 0.45, 0.45])
    before, after = entropy_probe(z, 0, 1e-4)
    assert after > before
    assert entropy_gradient(z, 0) > 0


def test_dominant_leader_lowers_entropy():
    z = np.log([0.8, 0.1, 0.1])
    before, after = entropy_probe(z, 0, 1e-4)
    assert after < before
    assert entropy_gradient(z, 0) < 0


def test_closed_form_matches_finite_difference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(size=6) * 2
        k = int(rng.integers(6))
        h = 1e-6
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        fd = (entropy_probe(zp, k, 0.0)[0] - entropy_probe(zm, k, 0.0)[0]) / (2 * h)
        assert entropy_gradient(z, k) == pytest.approx(fd, abs=1e-7)


def test_entropy_of_point_mass_is_zero():
    assert entropy([0.0, 1.0, 0.0]) == 0.0


# ------------------------------------------------------------------ surrogate loss


def _batch(policy, seed=0, n=6):
    rng = np.random.default_rng(seed)
    insts = [sample_instance(TSP, n, rng) for _ in range(3)]
    return insts, rng


def test_zero_advantages_give_zero_loss_and_gradients(tsp_policy_f64):
    insts, rng = _batch(tsp_policy_f64)
    with ad.Tape():
        batch = rollout_batch(tsp_policy_f64, insts, 6, SAMPLING, rng)
        adv = compute_advantage_final(np.zeros_like(batch.rewards))
        loss = surrogate_loss(batch, adv)
        grads = ad.backward(loss, tsp_policy_f64.params)
    assert loss.item() == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_doubling_advantages_doubles_gradients(tsp_policy_f64):
    out = []
    for scale in (1.0, 2.0):
        insts, rng = _batch(tsp_policy_f64, seed=4)
        with ad.Tape():
            batch = rollout_batch(tsp_policy_f64, insts, 6, SAMPLING, rng)
            adv = compute_advantage_main(batch.rewards, 3.0)
            adv.values = adv.values * scale
            out.append(ad.backward(surrogate_loss(batch, adv), tsp_policy_f64.params))
    for k in out[0]:
        np.testing.assert_allclose(out[1][k], 2 * out[0][k], rtol=1e-12, atol=1e-14)


def test_surrogate_sign_is_gradient_ascent(tsp_policy_f64):
    """A descent step on the loss raises the log-probability of positive-advantage rollouts."""
    insts, rng = _batch(tsp_policy_f64, seed=7)
    with ad.Tape():
        batch = rollout_batch(tsp_policy_f64, insts, 6, SAMPLING, rng)
        adv = compute_advantage_final(batch.rewards)
        grads = ad.backward(surrogate_loss(batch, adv), tsp_policy_f64.params)
    from leaderpomo.policy import trajectory_log_prob

    before = trajectory_log_prob(tsp_policy_f64, insts, batch.actions).data
    moved = tsp_policy_f64.copy()
    for k, g in grads.items():
        moved.params[k].data -= 1e-3 * g
    after = trajectory_log_prob(moved, insts, batch.actions).data
    leaders = adv.values > 0
    assert (after[leaders] - before[leaders]).sum() > 0


# ------------------------------------------------------------------ loops


def tiny(**kw):
    base = dict(size=5, num_starts=5, batch_size=4, steps_main=6, alpha=4.0, seed=2, report_interval=3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_rejects_alpha_one():
    with pytest.raises(ConfigError, match="α>1"):
        tiny(alpha=1.0).validate("main")


def test_training_is_deterministic():
    a = train_main(tiny(), oracle=True)
    b = train_main(tiny(), oracle=True)
    assert [r.to_dict() for r in a[1]] == [r.to_dict() for r in b[1]]
    assert a[0].to_bytes() == b[0].to_bytes()


def test_reports_and_step_numbering():
    ckpt, reps = train_main(tiny(), oracle=True)
    assert [r.step for r in reps] == [3, 6] and ckpt.step == 6
    assert all(r.best_of_N_gap >= -1e-12 for r in reps)
    assert all(0 <= r.leader_below_max_frac <= 1 for r in reps)


def test_resume_matches_uninterrupted_run():
    full, _ = train_main(tiny(steps_main=6))
    half, _ = train_main(tiny(steps_main=3))
    resumed, reps = train_main(tiny(steps_main=6), TrainState.from_checkpoint(half), until=6)
    assert resumed.step == 6 and [r.step for r in reps] == [6]
    assert resumed.to_bytes() == full.to_bytes()


def test_final_phase_schedule_and_phase_marker():
    ckpt, _ = train_main(tiny())
    cfg = tiny(steps_final=2, steps_tail=1, lr_final=5.5e-5, lr_tail=5.5e-6, report_interval=1)
    out, reps = train_final(cfg, TrainState.from_checkpoint(ckpt, cfg))
    assert out.phase == "final" and out.step == ckpt.step + 3
    assert [r.lr for r in reps] == [5.5e-5, 5.5e-5, 5.5e-6]
    assert all(r.phase == "final" for r in reps)


def test_zero_step_final_phase_keeps_parameters():
    ckpt, _ = train_main(tiny())
    cfg = tiny(steps_final=0, steps_tail=0)
    out, _ = train_final(cfg, TrainState.from_checkpoint(ckpt, cfg))
    assert out.phase == "final"
    assert all(np.array_equal(out.params[k], ckpt.params[k]) for k in ckpt.params)


def test_nan_aborts_with_last_good_checkpoint():
    ckpt, _ = train_main(tiny(steps_main=2))
    state = TrainState.from_checkpoint(ckpt)
    for t in state.policy.params.values():
        t.data[:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_main(tiny(steps_main=2), state)
    assert info.value.checkpoint is not None and info.value.checkpoint.step == 2


def test_plain_pomo_runs():
    ckpt, reps = train_main(tiny(alpha=None))
    assert ckpt.train_config["alpha"] is None and len(reps) == 2
