"""Find novel distractors by how they degrade in world-model rollouts, and
remove them from an observation by harmonic inpainting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import sim, wm

LEVELS = 12
MIN_AREA = 12
CHECK_FRAME = 5
TAU = 0.6
SAFETY_STEPS = 6
COLOR_TOL = 0.15
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass
class Segment:
    id: int
    mask: np.ndarray
    bbox: tuple  # (r0, c0, r1, c1), half-open
    mean_color: tuple
    area: int

    def to_dict(self) -> dict:
        return {"id": self.id, "bbox": [int(v) for v in self.bbox],
                "mean_color": [round(float(v), 6) for v in self.mean_color], "area": self.area}


@dataclass
class IdentificationReport:
    segments: list
    scores: list
    flagged: list
    check_frame_index: int = CHECK_FRAME
    exempt: list = field(default_factory=list)

    def flagged_segments(self) -> list:
        return [s for s in self.segments if s.id in self.flagged]

    def flagged_mask(self, shape=(sim.H, sim.W)) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        for s in self.flagged_segments():
            m |= s.mask
        return m

    def to_dict(self) -> dict:
        return {
            "check_frame_index": self.check_frame_index,
            "segments": [s.to_dict() for s in self.segments],
            "scores": [round(float(v), 6) for v in self.scores],
            "flagged": list(self.flagged),
            "exempt": list(self.exempt),
        }


def quantize(frame) -> np.ndarray:
    """Integer colour level per channel, ``LEVELS`` levels over [0, 1]."""
    return np.rint(np.clip(np.asarray(frame, dtype=np.float64), 0, 1) * (LEVELS - 1)).astype(np.int64)


def _qkey(q) -> np.ndarray:
    return (q[..., 0] * LEVELS + q[..., 1]) * LEVELS + q[..., 2]


_BG_KEY = int(_qkey(quantize(np.array(sim.BACKGROUND))))
_GRIP_KEY = int(_qkey(quantize(np.array(sim.GRIPPER_COLOR))))


def segment(frame, min_area: int = MIN_AREA) -> list:
    """4-connected components of equal quantised colour, ignoring background
    and gripper colours; components smaller than ``min_area`` are dropped."""
    frame = np.asarray(frame, dtype=np.float64)
    keys = _qkey(quantize(frame))
    segs = []
    for k in np.unique(keys):
        if k in (_BG_KEY, _GRIP_KEY):
            continue
        lab, n = ndimage.label(keys == k, structure=_FOUR)
        for i in range(1, n + 1):
            m = lab == i
            area = int(m.sum())
            if area < min_area:
                continue
            rows = np.flatnonzero(m.any(1))
            cols = np.flatnonzero(m.any(0))
            segs.append((rows[0], cols[0], m, area))
    # stable reading order: top-left corner first
    segs.sort(key=lambda s: (s[0], s[1]))
    out = []
    for i, (r0, c0, m, area) in enumerate(segs, start=1):
        rows = np.flatnonzero(m.any(1))
        cols = np.flatnonzero(m.any(0))
        out.append(Segment(i, m, (int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1),
                           tuple(frame[m].mean(0)), area))
    return out


def gripper_mask(frame, tol: float = COLOR_TOL) -> np.ndarray:
    """Pixels within ``tol`` of the reserved gripper colour."""
    d = np.linalg.norm(np.asarray(frame, dtype=np.float64) - np.array(sim.GRIPPER_COLOR), axis=-1)
    return d < tol


def safety_check_plan(task=None, steps: int = SAFETY_STEPS) -> sim.ActionPlan:
    """Hold still with the gripper open: the commonest action in exploration data."""
    return sim.ActionPlan(tuple(sim.Action(0.0, 0.0, 0) for _ in range(steps)))


def persistence_score(segment: Segment, frame0, frame_k, pad: int = 2) -> float:
    """Masked SSIM over the segment's bbox grown by ``pad`` px, clipped to [0, 1]."""
    from . import metrics  # metrics builds on this module

    return float(np.clip(metrics.masked_ssim(frame0, frame_k, segment.mask, pad=pad), 0.0, 1.0))


def _color_match(seg: Segment, color, tol: float = COLOR_TOL) -> bool:
    return float(np.linalg.norm(np.array(seg.mean_color) - np.array(color))) < tol


def container_segment(segments, goal_region):
    """Segment covering the goal rectangle's centre, if any."""
    r0, c0, r1, c1 = goal_region
    rc, cc = int((r0 + r1) // 2), int((c0 + c1) // 2)
    for s in segments:
        if s.mask[min(rc, sim.H - 1), min(cc, sim.W - 1)]:
            return s
    return None


def task_exempt(segments, frame, task) -> list:
    """Ids of segments tied to the task: touching the gripper, target-coloured,
    or the goal container."""
    grip = ndimage.binary_dilation(gripper_mask(frame), structure=_FOUR)
    box = container_segment(segments, task.goal_region)
    out = []
    for s in segments:
        if (s.mask & grip).any() or _color_match(s, task.target_color) or s is box:
            out.append(s.id)
    return out


def identify(model, frame0, task, tau: float = TAU, check_frame: int = CHECK_FRAME,
             plan=None) -> IdentificationReport:
    """Flag segments that fail to persist through a safety-check rollout."""
    plan = plan if plan is not None else safety_check_plan(task)
    if len(plan) < check_frame:
        raise ValueError(f"rollout of {len(plan)} steps is shorter than check frame {check_frame}")
    frame0 = np.asarray(frame0, dtype=np.float64)
    predicted = wm.rollout(model, frame0, plan)
    frame_k = predicted[check_frame - 1]
    segs = segment(frame0)
    exempt = task_exempt(segs, frame0, task)
    scores = [persistence_score(s, frame0, frame_k) for s in segs]
    flagged = [s.id for s, sc in zip(segs, scores) if sc < tau and s.id not in exempt]
    return IdentificationReport(segs, scores, flagged, check_frame, exempt)


def inpaint(frame, mask, tol: float = 1e-4, max_iter: int = 500) -> np.ndarray:
    """Harmonic (Jacobi) fill of ``mask`` from its surroundings.

    Masked pixels start at the mean of the mask's 1-px outer boundary and are
    repeatedly replaced by the mean of their in-image 4-neighbours.  Pixels
    outside the mask are returned untouched.
    """
    frame = np.asarray(frame, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    out = frame.copy()
    if not mask.any():
        return out
    if mask.all():
        raise ValueError("cannot inpaint a full mask: no boundary")
    boundary = ndimage.binary_dilation(mask, structure=_FOUR) & ~mask
    # work inside the mask bbox grown by one pixel
    rows = np.flatnonzero(mask.any(1))
    cols = np.flatnonzero(mask.any(0))
    r0, r1 = max(rows[0] - 1, 0), min(rows[-1] + 2, frame.shape[0])
    c0, c1 = max(cols[0] - 1, 0), min(cols[-1] + 2, frame.shape[1])
    sub = out[r0:r1, c0:c1]
    m = mask[r0:r1, c0:c1]
    sub[m] = frame[boundary].mean(0)
    # neighbour counts that respect the image border
    inside = np.zeros(frame.shape[:2], dtype=np.float64)
    inside[:] = 1.0
    cnt = np.zeros(m.shape)
    pad_in = np.pad(inside, 1)[r0:r1 + 2, c0:c1 + 2]
    cnt = pad_in[:-2, 1:-1] + pad_in[2:, 1:-1] + pad_in[1:-1, :-2] + pad_in[1:-1, 2:]
    full = np.pad(out, ((1, 1), (1, 1), (0, 0)))
    for _ in range(max_iter):
        win = full[r0:r1 + 2, c0:c1 + 2]
        nb = (win[:-2, 1:-1] + win[2:, 1:-1] + win[1:-1, :-2] + win[1:-1, 2:]) / cnt[..., None]
        change = np.abs(nb[m] - win[1:-1, 1:-1][m]).max()
        win[1:-1, 1:-1][m] = nb[m]
        if change < tol:
            break
    return full[1:-1, 1:-1].copy()
