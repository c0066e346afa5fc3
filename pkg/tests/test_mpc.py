import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from reoi import distractor, mpc, sim

TASK = sim.TaskSpec("t", sim.TRAINING_PALETTE[0], (40, 40, 56, 56))


def _frame_with_target(center, grip=(-100.0, -100.0)):
    obj = sim.ObjectSpec(1, "rect", sim.TRAINING_PALETTE[0], center, 8.0, 1, "training", "target")
    return sim.render(sim.SceneState((obj,), grip)).frame


def _col_mask(col):
    m = np.zeros((sim.H, sim.W), bool)
    m[28:36, col:col + 3] = True
    return m


# ---------------------------------------------------------------- reward

def test_reward_cases(gray):
    assert mpc.reward([_frame_with_target((48.0, 48.0))], TASK) == 1.0
    assert mpc.reward([_frame_with_target((10.0, 10.0))], TASK) == 0.0
    # rows 36..43 straddle the goal's top edge at row 40
    assert mpc.reward([_frame_with_target((40.0, 48.0))], TASK) == 0.5
    assert mpc.reward([gray], TASK) == 0.0
    with pytest.raises(ValueError):
        mpc.reward([], TASK)


def test_reward_reads_only_the_last_frame():
    inside, outside = _frame_with_target((48.0, 48.0)), _frame_with_target((10.0, 10.0))
    assert mpc.reward([outside, inside], TASK) == 1.0
    assert mpc.reward([inside, outside], TASK) == 0.0


# ---------------------------------------------------------------- verify

def test_verify_rejects_contact_within_one_pixel():
    frames = [sim.render(sim.SceneState((), (32.0, 32.0))).frame]  # gripper cols 28..35
    assert mpc.verify(frames, TASK, [_col_mask(36)]) == mpc.RejectUnsafe(0, "collision")
    assert isinstance(mpc.verify(frames, TASK, [_col_mask(37)]), mpc.Accept)


def test_verify_reports_first_offending_frame():
    frames = [sim.render(sim.SceneState((), (32.0, c))).frame for c in (10.0, 20.0, 32.0, 40.0)]
    assert mpc.verify(frames, TASK, [_col_mask(37)]) == mpc.RejectUnsafe(3, "collision")


def test_verify_without_masks_accepts_with_reward():
    frames = [_frame_with_target((48.0, 48.0), grip=(48.0, 48.0))]
    v = mpc.verify(frames, TASK, [])
    assert isinstance(v, mpc.Accept) and v.reward == mpc.reward(frames, TASK)


@given(st.integers(0, 10_000))
def test_more_masks_never_turn_a_reject_into_accept(seed):
    rng = np.random.default_rng(seed)
    pos = [tuple(rng.uniform(4, 60, size=2)) for _ in range(3)]
    frames = [sim.render(sim.SceneState((), p)).frame for p in pos]
    masks = []
    for _ in range(3):
        r, c = rng.integers(0, 56, size=2)
        m = np.zeros((sim.H, sim.W), bool)
        m[r:r + 8, c:c + 8] = True
        masks.append(m)
    grip = [ndimage.binary_dilation(sim.gripper_mask(p), structure=mpc._FOUR) for p in pos]
    for k in range(4):
        v = mpc.verify(frames, TASK, masks[:k])
        hit = [i for i, g in enumerate(grip) if any((g & m).any() for m in masks[:k])]
        if hit:
            assert v == mpc.RejectUnsafe(hit[0], "collision")
        else:
            assert isinstance(v, mpc.Accept)


def test_accept_requires_finite_reward():
    with pytest.raises(ValueError):
        mpc.Accept(float("nan"))


# ---------------------------------------------------------------- select

_CHOICES = (mpc.Accept(0.0), mpc.Accept(0.5), mpc.Accept(1.0), mpc.RejectUnsafe(0))


def _select_oracle(verdicts):
    rewards = [v.reward if isinstance(v, mpc.Accept) else None for v in verdicts]
    ok = [r for r in rewards if r is not None]
    if not ok:
        return "needs_human"
    return rewards.index(max(ok))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_select_matches_enumerated_tables(n):
    for table in itertools.product(_CHOICES, repeat=n):
        got = mpc.select(table)
        want = _select_oracle(table)
        if want == "needs_human":
            assert isinstance(got, mpc.NeedsHuman)
        else:
            assert got == want


def test_select_fixed_cases():
    A, R = mpc.Accept, mpc.RejectUnsafe(2)
    assert mpc.select([A(0.3), A(0.7), A(0.7)]) == 1
    assert mpc.select([R, A(0.0)]) == 1
    assert isinstance(mpc.select([R, R, R]), mpc.NeedsHuman)
    with pytest.raises(ValueError):
        mpc.select([])


@given(st.lists(st.one_of(st.none(), st.floats(0, 1)), min_size=1, max_size=8),
       st.floats(0.01, 100))
def test_select_is_scale_invariant(rewards, scale):
    def table(s):
        return [mpc.RejectUnsafe(0) if r is None else mpc.Accept(r * s) for r in rewards]

    a, b = mpc.select(table(1.0)), mpc.select(table(scale))
    if isinstance(a, mpc.NeedsHuman):
        assert isinstance(b, mpc.NeedsHuman)
    else:
        # scaling can merge two nearly equal rewards, never reorder them
        assert rewards[b] * scale == max(r * scale for r in rewards if r is not None)


# ---------------------------------------------------------------- planners

def test_sample_candidates_is_seeded():
    s = sim.init_scene(sim.SceneConfig(), 4)
    t = sim.TaskSpec.from_state(s)
    a = mpc.sample_candidates(s, t, 3, 9)
    b = mpc.sample_candidates(s, t, 3, 9)
    assert [p.as_array().tolist() for p in a] == [p.as_array().tolist() for p in b]
    with pytest.raises(ValueError):
        mpc.sample_candidates(s, t, 0)


def test_baseline_single_noiseless_candidate_on_empty_table(model):
    s = sim.init_scene(sim.SceneConfig(n_training=0), 6)
    t = sim.TaskSpec.from_state(s)
    plan = sim.scripted_policy(s, t, 0.0, 0)
    res = mpc.plan_baseline(model, sim.render(s).frame, t, candidates=[plan])
    assert res.chosen == 0 and res.plan == plan
    assert mpc.execute(s, res, t)["success"]


def test_needs_human_executes_nothing():
    s = sim.init_scene(sim.SceneConfig(), 0)
    res = mpc.PlanResult(None, [mpc.RejectUnsafe(0)], [], "baseline")
    assert mpc.execute(s, res) == {"success": False, "collision": False, "needs_human": True}


def _blocking(seed):
    s = sim.init_scene(sim.SceneConfig(n_training=1, n_novel=1, layout="blocking"), seed)
    t = sim.TaskSpec.from_state(s)
    return s, t, mpc.sample_candidates(s, t, rng=seed)


def test_planners_are_deterministic(model):
    s, t, c = _blocking(3)
    f = sim.render(s).frame
    for fn in (mpc.plan_baseline, mpc.plan_reoi):
        a, b = fn(model, f, t, candidates=c), fn(model, f, t, candidates=c)
        assert a.to_dict() == b.to_dict()
        assert all(np.array_equal(x, y) for x, y in zip(a.rollouts, b.rollouts))


def test_reoi_matches_baseline_when_nothing_is_flagged(model):
    s, t, c = _blocking(8)
    f = sim.render(s).frame
    base = mpc.plan_baseline(model, f, t, candidates=c)
    reoi = mpc.plan_reoi(model, f, t, candidates=c, tau=0.0)
    assert reoi.identification.flagged == []
    assert [v.to_dict() for v in reoi.verdicts] == [v.to_dict() for v in base.verdicts]
    assert reoi.chosen == base.chosen


def test_reoi_never_chooses_a_rollout_through_a_flagged_segment(model):
    for seed in range(10):
        s, t, c = _blocking(100 + seed)
        res = mpc.plan_reoi(model, sim.render(s).frame, t, candidates=c)
        if res.chosen is None:
            continue
        flagged = res.identification.flagged_mask()
        for frame in res.rollouts[res.chosen]:
            grip = ndimage.binary_dilation(distractor.gripper_mask(frame), structure=mpc._FOUR)
            assert not (grip & flagged).any()


def test_baseline_accepts_colliding_plans(model):
    accepted_collision = 0
    for seed in range(20):
        s, t, c = _blocking(200 + seed)
        res = mpc.plan_baseline(model, sim.render(s).frame, t, candidates=c)
        accepted_collision += any(
            isinstance(v, mpc.Accept) and sim.check_outcome(sim.rollout(s, p), t)["collision"]
            for v, p in zip(res.verdicts, c))
    assert accepted_collision >= 10
