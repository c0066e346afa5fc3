import numpy as np
import pytest
from hypothesis import given, strategies as st

from reoi import mpc, sim, trustregion as tr, wm


def _region(centers, r=0.1, lip=0.0, err=0.0, idx=None):
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    d = c.shape[1]
    idx = np.arange(len(c)) if idx is None else np.asarray(idx)
    return tr.TrustRegion(c, r, lip, err, r, np.zeros(d), np.ones(d), idx)


def _brute_lipschitz(x, e):
    best = 0.0
    for i in range(len(x)):
        for j in range(i + 1, len(x)):
            d = np.linalg.norm(x[i] - x[j])
            if d >= 1e-6:
                best = max(best, abs(e[i] - e[j]) / d)
    return best


# ---------------------------------------------------------------- lipschitz estimate

def test_constant_errors_give_zero():
    x = np.random.default_rng(0).normal(size=(20, 4))
    assert tr.estimate_lipschitz(x, np.full(20, 3.0)) == 0.0


def test_single_pair_slope():
    assert tr.estimate_lipschitz([[0.0, 0.0], [1.0, 0.0]], [0.0, 0.5]) == 0.5


def test_collinear_norm_has_unit_slope():
    t = np.linspace(0.5, 3.0, 12)
    x = np.outer(t, [0.6, 0.8])
    assert tr.estimate_lipschitz(x, np.linalg.norm(x, axis=1)) == pytest.approx(1.0, abs=1e-12)


def test_exhaustive_matches_pair_loop():
    rng = np.random.default_rng(1)
    x, e = rng.normal(size=(40, 5)), rng.random(40)
    assert tr.estimate_lipschitz(x, e) == pytest.approx(_brute_lipschitz(x, e), rel=1e-10)


def test_sampled_never_exceeds_exhaustive():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x, e = rng.normal(size=(100, 6)), rng.random(100)
        full = tr.estimate_lipschitz(x, e)
        assert tr.estimate_lipschitz(x, e, max_pairs=500, rng=seed) <= full


@given(st.integers(0, 10_000))
def test_sampled_pairs_use_exhaustive_arithmetic(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 40)) * rng.uniform(0.1, 100)
    e = rng.random(30)
    assert tr.estimate_lipschitz(x, e, max_pairs=50, rng=seed) <= tr.estimate_lipschitz(x, e)


def test_pairwise_matches_direct_norms():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(9, 5))
    ref = np.array([[np.sqrt(((p - q) ** 2).sum()) for q in b] for p in a])
    assert np.array_equal(tr._pairwise(a, b), ref)


@given(st.integers(0, 10_000), st.integers(2, 15))
def test_more_points_never_lower_the_estimate(seed, k):
    rng = np.random.default_rng(seed)
    x, e = rng.normal(size=(16, 3)), rng.random(16)
    assert tr.estimate_lipschitz(x[:k], e[:k]) <= tr.estimate_lipschitz(x, e)


def test_degenerate_pairs_are_an_error():
    with pytest.raises(ValueError):
        tr.estimate_lipschitz(np.zeros((4, 2)), [0.0, 1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        tr.estimate_lipschitz([[0.0]], [1.0])


# ---------------------------------------------------------------- build

def test_equal_errors_give_zero_slope_and_bound_e():
    x = np.random.default_rng(2).normal(size=(10, 3))
    reg = tr.build(x, np.full(10, 0.4))
    assert reg.lipschitz == 0.0 and len(reg.centers) == 10
    assert reg.bound == 0.4


def test_build_keeps_points_up_to_threshold():
    rng = np.random.default_rng(3)
    x, e = rng.normal(size=(40, 3)), rng.random(40)
    reg = tr.build(x, e)
    thr = np.percentile(e, 75)
    assert set(reg.indices) == set(np.flatnonzero(e <= thr))
    assert reg.max_train_error == e[e <= thr].max()
    assert reg.radius == reg.dispersion == tr.R0
    assert np.allclose(reg.centers, ((x - x.mean(0)) / x.std(0))[reg.indices])


def test_build_without_points_below_threshold_is_an_error():
    x = np.random.default_rng(4).normal(size=(5, 2))
    with pytest.raises(ValueError):
        tr.build(x, np.ones(5), err_threshold=0.5)
    with pytest.raises(ValueError):
        tr.build(x[:1], [0.0])


def test_bound_formula_cases():
    assert tr.query(_region([[0.0]], r=0.5, lip=2.0, err=0.1), [0.0]) == tr.Inside(2.0 * 0.5 + 0.1)
    assert tr.query(_region([[0.0]], r=0.5, lip=2.0, err=0.1), [0.0]).bound == pytest.approx(1.1)
    e = 0.37
    assert _region([[0.0]], r=0.1, lip=0.84, err=e).bound == pytest.approx(0.084 + e)


# ---------------------------------------------------------------- expand

def test_expand_with_flat_errors_reaches_r_max():
    x = np.random.default_rng(5).normal(size=(30, 2))
    reg = tr.expand(tr.build(x, np.full(30, 1.0)), x, np.full(30, 1.0))
    assert reg.radius == pytest.approx(tr.R_MAX)
    assert reg.dispersion == reg.radius and reg.lipschitz == 0.0


def test_expand_halts_before_a_steep_pair():
    x = np.array([[0.0, 0.0], [0.3, 0.0], [5.0, 5.0]])
    e = np.array([0.0, 1.0, 0.0])  # slope 3.3 at distance 0.3
    reg = tr.expand(_region(x[:1], r=0.1, idx=[0]), x, e)
    assert reg.radius == pytest.approx(0.25)
    assert list(reg.indices) == [0] and reg.lipschitz == 0.0
    assert reg.meta["steps"] == 3


def test_expand_admits_nearby_points():
    x = np.array([[0.0], [0.2], [0.4]])
    e = np.array([0.0, 0.1, 0.2])  # slope 0.5
    reg = tr.expand(_region(x[:1], r=0.1, idx=[0]), x, e)
    assert list(reg.indices) == [0, 1, 2]
    assert reg.lipschitz == pytest.approx(0.5) and reg.max_train_error == 0.2
    assert reg.meta["final_bound"] == pytest.approx(reg.bound)


# ---------------------------------------------------------------- query

def test_query_boundary():
    reg = _region([[1.0, 2.0]], r=0.5)
    assert isinstance(tr.query(reg, [1.0, 2.0]), tr.Inside)
    assert isinstance(tr.query(reg, [1.5, 2.0]), tr.Inside)
    out = tr.query(reg, [1.0, 2.5 + 1e-6])
    assert isinstance(out, tr.Outside) and out.nearest_distance == pytest.approx(0.5 + 1e-6)


@given(st.integers(0, 10_000))
def test_query_partition_follows_distance_rule(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(6, 3))
    reg = _region(c, r=float(rng.uniform(0.2, 1.5)))
    x = rng.normal(size=3) * 1.5
    d = np.linalg.norm(c - x, axis=1).min()
    q = tr.query(reg, x)
    assert isinstance(q, tr.Inside) == (d <= reg.radius)
    if isinstance(q, tr.Outside):
        assert q.nearest_distance == pytest.approx(d)


def test_region_invariants():
    with pytest.raises(ValueError):
        _region(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        _region([[0.0]], r=0.0)


# ---------------------------------------------------------------- fitted region and planner

def test_fitted_region_metadata(region):
    assert region.radius == region.dispersion > 0 and region.lipschitz < tr.L_MAX
    assert region.meta["expanded"] and region.meta["reference"] == tr.REFERENCE
    assert region.centers.shape[1] == wm.D + wm.ACTION_DIM * sim.PLAN_LENGTH


def test_training_input_inside_behaves_as_baseline(model, region, trained):
    t = trained["data"][int(region.indices[0])]
    s = sim.state_from_dict(t.metadata)
    task = sim.TaskSpec.from_state(s)
    obs = sim.render(s).frame
    plan = sim.ActionPlan.from_array(t.actions)
    res = tr.plan_trustregion(model, region, obs, task, candidates=[plan])
    base = mpc.plan_baseline(model, obs, task, candidates=[plan])
    assert isinstance(res.queries[0], tr.Inside)
    assert res.verdicts == base.verdicts and res.chosen == base.chosen


def test_novel_scenes_fall_outside(model, region):
    all_out = 0
    for seed in range(20):
        s = sim.init_scene(sim.SceneConfig(n_training=1, n_novel=1, layout="blocking"), 900 + seed)
        task = sim.TaskSpec.from_state(s)
        res = tr.plan_trustregion(model, region, sim.render(s).frame, task, state=s, rng=seed)
        all_out += all(isinstance(q, tr.Outside) for q in res.queries)
        assert all(v.reason == "out_of_region" for v, q in zip(res.verdicts, res.queries)
                   if isinstance(q, tr.Outside))
    assert all_out >= 16
