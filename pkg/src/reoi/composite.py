"""Layer decomposition and depth-ordered compositing of frames."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import distractor, sim


@dataclass
class Layer:
    mask: np.ndarray
    pixels: np.ndarray  # (H, W, 3), only read under ``mask``
    depth_key: float  # larger = closer to the camera
    label: str = ""

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if not self.mask.any():
            raise ValueError("layer mask is empty")
        if not np.all(np.isfinite(self.pixels[self.mask])):
            raise ValueError("layer pixels must be finite")


@dataclass
class LayerStack:
    layers: list
    background: np.ndarray
    meta: dict = field(default_factory=dict)


def assign_depth(segment, source: str = "predicted_frame", depth_map=None) -> float:
    """Depth key from the bottom row of the segment's mask (lower = closer).

    With ``source="initial_obs"`` and a simulator ``depth_map``, the median
    depth rank under the mask adds a tie-break smaller than one row step,
    so row order always dominates.
    """
    mask = segment.mask if hasattr(segment, "mask") else np.asarray(segment, dtype=bool)
    rows = np.flatnonzero(mask.any(1))
    if rows.size == 0:
        raise ValueError("empty mask")
    h = mask.shape[0]
    key = rows[-1] / h
    if source == "initial_obs":
        if depth_map is None:
            raise ValueError("initial_obs depth needs the simulator depth map")
        depth_map = np.asarray(depth_map)
        rank = float(np.median(depth_map[mask]))
        key += 0.5 / h * rank / (float(depth_map.max()) + 1.0)
    elif source != "predicted_frame":
        raise ValueError(f"unknown depth source {source!r}")
    return float(key)


def _frame_layers(frame) -> list:
    """Segment layers plus the gripper layer, keyed from the frame itself."""
    frame = np.asarray(frame, dtype=np.float64)
    layers = [Layer(s.mask, frame, assign_depth(s), f"segment{s.id}")
              for s in distractor.segment(frame)]
    grip = distractor.gripper_mask(frame)
    if grip.any():
        layers.append(Layer(grip, frame, assign_depth(grip), "gripper"))
    return layers


def decompose(frame) -> LayerStack:
    """Split a frame into object layers, a gripper layer and an inpainted background."""
    frame = np.asarray(frame, dtype=np.float64)
    layers = _frame_layers(frame)
    union = np.zeros(frame.shape[:2], dtype=bool)
    for layer in layers:
        union |= layer.mask
    background = distractor.inpaint(frame, union) if union.any() else frame.copy()
    return LayerStack(layers, background)


def composite(stack: LayerStack) -> np.ndarray:
    """Paint layers over the background in ascending depth key (stable on ties)."""
    out = np.array(stack.background, dtype=np.float64, copy=True)
    for i in sorted(range(len(stack.layers)), key=lambda i: (stack.layers[i].depth_key, i)):
        layer = stack.layers[i]
        out[layer.mask] = layer.pixels[layer.mask]
    return out


def reinsert(predicted, distractor_layers) -> list:
    """Paste static distractor layers back into every predicted frame.

    Each frame is decomposed and recomposited with the extra layers.  Frame
    layers repaint exactly the pixels they cover and everything else is
    kept, so the frame itself serves as the background: inpainting it first
    would be overwritten everywhere it acts.
    """
    out = []
    for frame in predicted:
        frame = np.asarray(frame, dtype=np.float64)
        for layer in distractor_layers:
            if layer.mask.shape != frame.shape[:2] or layer.pixels.shape != frame.shape:
                raise ValueError("layer and frame shapes differ")
        if not distractor_layers:
            out.append(frame.copy())
            continue
        stack = LayerStack(_frame_layers(frame) + list(distractor_layers), frame)
        out.append(composite(stack))
    return out


def distractor_layers(frame0, segments, depth_map=None) -> list:
    """Frozen layers for segments cut from the initial observation."""
    frame0 = np.asarray(frame0, dtype=np.float64)
    src = "initial_obs" if depth_map is not None else "predicted_frame"
    return [Layer(s.mask, frame0.copy(), assign_depth(s, src, depth_map), f"distractor{s.id}")
            for s in segments]


def ground_truth_stack(state: sim.SceneState) -> LayerStack:
    """Simulator layers: every object at its depth rank, gripper on top."""
    bg = np.empty((sim.H, sim.W, 3))
    bg[:] = sim.BACKGROUND
    layers = []
    top = 0
    for obj in state.objects:
        px = np.empty((sim.H, sim.W, 3))
        px[:] = obj.color
        layers.append(Layer(sim.object_mask(obj), px, float(obj.depth_rank), f"object{obj.id}"))
        top = max(top, obj.depth_rank)
    gp = np.empty((sim.H, sim.W, 3))
    gp[:] = sim.GRIPPER_COLOR
    layers.append(Layer(sim.gripper_mask(state.gripper), gp, float(top + 1), "gripper"))
    return LayerStack(layers, bg)
