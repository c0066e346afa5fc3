"""Sampling-based visual MPC: roll out candidate plans, verify, select."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import composite, distractor, sim, wm

N_CANDIDATES = 8
NOISE = 4.0
COLOR_TOL = 0.15
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class Accept:
    reward: float

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")

    def to_dict(self):
        return {"verdict": "accept", "reward": round(float(self.reward), 6)}


@dataclass(frozen=True)
class RejectUnsafe:
    frame_index: int
    reason: str = "collision"

    def to_dict(self):
        return {"verdict": "reject", "frame_index": self.frame_index, "reason": self.reason}


@dataclass(frozen=True)
class NeedsHuman:
    def to_dict(self):
        return {"verdict": "needs_human"}


Verdict = Union[Accept, RejectUnsafe, NeedsHuman]


@dataclass
class PlanResult:
    chosen: Optional[int]
    verdicts: list
    rollouts: list
    mode: str
    candidates: list = field(default_factory=list)
    identification: Optional[distractor.IdentificationReport] = None
    queries: list = field(default_factory=list)

    @property
    def needs_human(self) -> bool:
        return self.chosen is None

    @property
    def plan(self) -> Optional[sim.ActionPlan]:
        return None if self.chosen is None else self.candidates[self.chosen]

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "chosen": self.chosen,
            "needs_human": self.needs_human,
            "verdicts": [v.to_dict() for v in self.verdicts],
        }
        if self.identification is not None:
            d["identification"] = self.identification.to_dict()
        if self.queries:
            d["queries"] = [
                {"inside": True, "bound": round(q.bound, 6)} if hasattr(q, "bound")
                else {"inside": False, "nearest_distance": round(q.nearest_distance, 6)}
                for q in self.queries
            ]
        return d


def target_pixels(frame, color, tol: float = COLOR_TOL) -> np.ndarray:
    d = np.linalg.norm(np.asarray(frame, dtype=np.float64) - np.asarray(color), axis=-1)
    return d < tol


def reward(frames: Sequence, task: sim.TaskSpec) -> float:
    """Fraction of target-coloured pixels inside the goal rectangle in the last frame."""
    if len(frames) == 0:
        raise ValueError("no frames")
    m = target_pixels(frames[-1], task.target_color)
    total = int(m.sum())
    if total == 0:
        return 0.0
    r0, c0, r1, c1 = (int(v) for v in task.goal_region)
    return float(m[r0:r1, c0:c1].sum()) / total


def verify(frames: Sequence, task: sim.TaskSpec, distractor_masks: Sequence) -> Verdict:
    """Reject if the 1-px-dilated gripper touches a distractor mask in any frame."""
    masks = [np.asarray(m, dtype=bool) for m in distractor_masks]
    if masks:
        union = np.logical_or.reduce(masks)
        for k, frame in enumerate(frames):
            grip = ndimage.binary_dilation(distractor.gripper_mask(frame), structure=_FOUR)
            if (grip & union).any():
                return RejectUnsafe(k, "collision")
    return Accept(reward(frames, task))


def select(verdicts: Sequence) -> Union[int, NeedsHuman]:
    """Index of the highest-reward Accept (lowest index on ties), else NeedsHuman."""
    if len(verdicts) == 0:
        raise ValueError("no verdicts")
    best, best_r = None, -np.inf
    for i, v in enumerate(verdicts):
        if isinstance(v, Accept) and v.reward > best_r:
            best, best_r = i, v.reward
    return NeedsHuman() if best is None else best


def sample_candidates(state: sim.SceneState, task: sim.TaskSpec, n: int = N_CANDIDATES,
                      rng=None, noise: float = NOISE) -> list:
    """``n`` scripted-policy plans drawn from one generator in order."""
    if n < 1:
        raise ValueError("need at least one candidate")
    rng = np.random.default_rng(rng)
    return [sim.scripted_policy(state, task, noise, rng) for _ in range(n)]


def _exempt_colors(frame0, task) -> list:
    colors = [tuple(task.target_color)]
    segs = distractor.segment(frame0)
    box = distractor.container_segment(segs, task.goal_region)
    if box is not None:
        colors.append(box.mean_color)
    return colors


def perceived_obstacles(frames, task, exempt_colors, tol: float = COLOR_TOL) -> list:
    """Static obstacles as the model shows them.

    A segment counts when, in its frame, it stands apart from the gripper,
    is not task-coloured and is not centred in the goal rectangle.  Whatever
    the gripper carries is drawn attached to it (often in a blended colour),
    so it never enters the map, while a static obstacle is seen apart from
    the gripper in the frames before any contact.
    """
    r0, c0, r1, c1 = task.goal_region
    out = []
    for frame in frames:
        grip = ndimage.binary_dilation(distractor.gripper_mask(frame), structure=_FOUR)
        for s in distractor.segment(frame):
            if (s.mask & grip).any():
                continue
            if any(np.linalg.norm(np.array(s.mean_color) - np.array(c)) < tol for c in exempt_colors):
                continue
            rc, cc = np.argwhere(s.mask).mean(0)
            if r0 <= rc < r1 and c0 <= cc < c1:
                continue
            out.append(s.mask)
    return out


def _candidates(state, task, n_candidates, rng, candidates):
    if candidates is not None:
        return [c if isinstance(c, sim.ActionPlan) else sim.ActionPlan.from_array(c)
                for c in candidates]
    if state is None:
        raise ValueError("either candidates or the scene state (for the policy) is required")
    return sample_candidates(state, task, n_candidates, rng)


def _finish(mode, rollouts, verdicts, cands, ident=None) -> PlanResult:
    choice = select(verdicts)
    chosen = None if isinstance(choice, NeedsHuman) else choice
    return PlanResult(chosen, verdicts, rollouts, mode, cands, ident)


def plan_baseline(model, obs, task, n_candidates: int = N_CANDIDATES, rng=None, *,
                  state=None, candidates=None) -> PlanResult:
    """Roll out candidates on the raw observation and verify what the model shows."""
    obs = np.asarray(obs, dtype=np.float64)
    cands = _candidates(state, task, n_candidates, rng, candidates)
    rollouts = list(wm.rollout_many(model, obs, cands))
    exempt = _exempt_colors(obs, task)
    verdicts = [verify(r, task, perceived_obstacles(r, task, exempt)) for r in rollouts]
    return _finish("baseline", rollouts, verdicts, cands)


def plan_reoi(model, obs, task, n_candidates: int = N_CANDIDATES, rng=None, *,
              state=None, candidates=None, tau: float = distractor.TAU,
              depth_map=None) -> PlanResult:
    """Identify and inpaint distractors, reimagine, reinsert them, verify, select."""
    obs = np.asarray(obs, dtype=np.float64)
    cands = _candidates(state, task, n_candidates, rng, candidates)
    report = distractor.identify(model, obs, task, tau=tau)
    flagged = report.flagged_segments()
    mask = report.flagged_mask(obs.shape[:2])
    clean = distractor.inpaint(obs, mask) if mask.any() else obs
    layers = composite.distractor_layers(obs, flagged, depth_map)
    imagined = list(wm.rollout_many(model, clean, cands))
    exempt = _exempt_colors(obs, task)
    flagged_masks = [s.mask for s in flagged]
    rollouts, verdicts = [], []
    for frames in imagined:
        out = composite.reinsert(frames, layers)
        rollouts.append(np.stack(out))
        verdicts.append(verify(out, task, flagged_masks + perceived_obstacles(frames, task, exempt)))
    return _finish("reoi", rollouts, verdicts, cands, report)


def execute(state: sim.SceneState, result: PlanResult, task=None) -> dict:
    """Run the chosen plan in the simulator; NeedsHuman executes nothing."""
    if result.chosen is None:
        return {"success": False, "collision": False, "needs_human": True}
    out = sim.check_outcome(sim.rollout(state, result.plan), task)
    return {**out, "needs_human": False}
