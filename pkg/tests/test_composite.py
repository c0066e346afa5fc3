import numpy as np
import pytest
from hypothesis import given, strategies as st

from reoi import composite, distractor, sim


def _rect(r0, c0, r1, c1):
    m = np.zeros((sim.H, sim.W), bool)
    m[r0:r1, c0:c1] = True
    return m


def _solid(color):
    px = np.empty((sim.H, sim.W, 3))
    px[:] = color
    return px


# ---------------------------------------------------------------- depth keys

def test_depth_key_is_bottom_row_over_height():
    assert composite.assign_depth(_rect(40, 10, 49, 20)) == 48 / 64 == 0.75
    assert composite.assign_depth(_rect(0, 0, 1, 1)) == 0.0


def test_depth_rank_only_breaks_ties():
    m = _rect(10, 10, 20, 20)
    depth = np.zeros((sim.H, sim.W), int)
    depth[m] = 5
    hi = composite.assign_depth(m, "initial_obs", depth)
    depth[m] = 2
    lo = composite.assign_depth(m, "initial_obs", depth)
    assert 19 / 64 < lo < hi < 20 / 64


def test_depth_errors():
    with pytest.raises(ValueError):
        composite.assign_depth(np.zeros((sim.H, sim.W), bool))
    with pytest.raises(ValueError):
        composite.assign_depth(_rect(0, 0, 4, 4), "initial_obs")
    with pytest.raises(ValueError):
        composite.assign_depth(_rect(0, 0, 4, 4), "lidar")


@given(st.integers(0, 62), st.integers(0, 62), st.integers(0, 10), st.integers(0, 10))
def test_lower_segments_are_closer(r, c, dr, dc):
    a = _rect(r, c, r + 1, c + 1)
    b = _rect(min(r + dr, 63), c, min(r + dr, 63) + 1, min(c + dc, 63) + 1)
    assert composite.assign_depth(b) >= composite.assign_depth(a)


# ---------------------------------------------------------------- decomposition

def test_decompose_empty_scene(gray):
    stack = composite.decompose(gray)
    assert stack.layers == [] and np.array_equal(stack.background, gray)
    assert np.array_equal(composite.composite(stack), gray)


def test_decompose_layers_cover_the_foreground():
    s = sim.init_scene(sim.SceneConfig(n_training=1, n_novel=1), 5)
    out = sim.render(s)
    stack = composite.decompose(out.frame)
    labels = [layer.label for layer in stack.layers]
    assert labels.count("gripper") == 1 and len(labels) == 5
    union = np.logical_or.reduce([layer.mask for layer in stack.layers])
    assert np.array_equal(union, (out.label_map > 0) | out.gripper_mask)
    assert np.array_equal(composite.composite(stack), out.frame)


def test_empty_layer_is_an_error():
    with pytest.raises(ValueError):
        composite.Layer(np.zeros((sim.H, sim.W), bool), _solid((1, 0, 0)), 0.0)


# ---------------------------------------------------------------- compositing

def test_composite_with_no_layers_is_background(gray):
    assert np.array_equal(composite.composite(composite.LayerStack([], gray)), gray)


def test_ground_truth_layers_reproduce_render():
    for seed in range(20):
        s = sim.init_scene(sim.SceneConfig(n_training=2, n_novel=2), 700 + seed)
        gt = composite.composite(composite.ground_truth_stack(s))
        assert np.array_equal(gt, sim.render(s).frame)


@given(st.permutations(range(4)))
def test_composite_ignores_layer_order(perm):
    keys = (0.1, 0.3, 0.3, 0.9)
    colors = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0))
    boxes = ((5, 5, 30, 30), (20, 20, 40, 40), (25, 10, 45, 35), (0, 30, 10, 60))
    layers = [composite.Layer(_rect(*b), _solid(c), k, str(i))
              for i, (b, c, k) in enumerate(zip(boxes, colors, keys))]
    bg = _solid(sim.BACKGROUND)
    ref = composite.composite(composite.LayerStack(layers, bg))
    # equal keys resolve by position, so only permute the distinct-key layers
    order = list(perm)
    i1, i2 = order.index(1), order.index(2)
    if i1 > i2:
        order[i1], order[i2] = order[i2], order[i1]
    shuffled = [layers[i] for i in order]
    assert np.array_equal(composite.composite(composite.LayerStack(shuffled, bg)), ref)


# ---------------------------------------------------------------- reinsertion

def test_reinsert_on_empty_frames_pastes_pixels(gray):
    m = _rect(10, 10, 22, 22)
    layer = composite.Layer(m, _solid((0.9, 0.2, 0.6)), 0.5)
    out = composite.reinsert([gray, gray], [layer])
    for f in out:
        ref = gray.copy()
        ref[m] = (0.9, 0.2, 0.6)
        assert np.array_equal(f, ref)


def test_reinsert_with_no_layers_is_identity():
    f = sim.render(sim.init_scene(sim.SceneConfig(), 1)).frame
    out = composite.reinsert([f], [])
    assert np.array_equal(out[0], f) and out[0] is not f


def test_gripper_occludes_layers_behind_it():
    frame = sim.render(sim.SceneState((), (32.0, 32.0))).frame  # gripper rows 28..35
    grip = distractor.gripper_mask(frame)
    behind = _rect(20, 26, 30, 38)  # bottom row 29
    front = _rect(30, 26, 45, 38)  # bottom row 44
    color = (0.9, 0.2, 0.6)
    out = composite.reinsert([frame], composite.distractor_layers(
        _solid(color), [distractor.Segment(1, behind, (20, 26, 30, 38), color, 120)]))[0]
    assert np.array_equal(out[grip], frame[grip])
    out = composite.reinsert([frame], composite.distractor_layers(
        _solid(color), [distractor.Segment(1, front, (30, 26, 45, 38), color, 180)]))[0]
    assert np.all(out[grip & front] == color)


@given(st.integers(0, 10_000))
def test_reinsert_only_touches_layer_pixels(seed):
    rng = np.random.default_rng(seed)
    s = sim.init_scene(sim.SceneConfig(n_training=1), seed)
    frame = sim.render(s).frame
    r, c = rng.integers(0, 50, size=2)
    m = _rect(r, c, r + rng.integers(1, 14), c + rng.integers(1, 14))
    layer = composite.Layer(m, rng.random((sim.H, sim.W, 3)), float(rng.random()))
    out = composite.reinsert([frame], [layer])[0]
    assert np.array_equal(out[~m], frame[~m])


def test_reinsert_shape_mismatch(gray):
    layer = composite.Layer(np.ones((32, 32), bool), np.zeros((32, 32, 3)), 0.0)
    with pytest.raises(ValueError):
        composite.reinsert([gray], [layer])
