"""Lipschitz trust region over (initial latent, plan) inputs.

Training inputs with low rollout error become ball centres.  Inside the
union of radius-``r`` balls the rollout error is bounded by
``L * b + e`` where ``L`` is an empirical Lipschitz constant of the error
over the centres, ``b`` the dispersion (equal to ``r`` for a union of balls)
and ``e`` the largest error among the centres.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import mpc, sim, wm

PERCENTILE = 75.0
R0 = 0.1
L_MAX = 1.0
R_STEP = 0.05
R_MAX = 2.0
MIN_DIST = 1e-6

# Values reported for the original large-scale model; kept as documentation,
# never used as defaults because they depend on that model's latent scale.
REFERENCE = {
    "error_threshold": 750.0,
    "r0": 0.1,
    "lipschitz_initial": 0.84,
    "lipschitz_final": 0.93,
    "error_bound_final": 1160.0,
}


@dataclass
class TrustRegion:
    centers: np.ndarray  # standardized, (M, d)
    radius: float
    lipschitz: float
    max_train_error: float
    dispersion: float
    mean: np.ndarray
    std: np.ndarray
    indices: np.ndarray  # rows of the training set used as centres
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.centers) == 0:
            raise ValueError("trust region needs at least one centre")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def bound(self) -> float:
        return self.lipschitz * self.dispersion + self.max_train_error

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class Inside:
    bound: float


@dataclass(frozen=True)
class Outside:
    nearest_distance: float


QueryResult = Union[Inside, Outside]


def input_vector(z0, plan) -> np.ndarray:
    """Region input: initial latent followed by the flattened action plan."""
    return np.concatenate([np.asarray(z0, dtype=np.float64).ravel(), wm._plan_array(plan).ravel()])


def _dist(diff) -> np.ndarray:
    # one formula for every distance, so exhaustive and sampled estimates agree bit for bit
    return np.sqrt((diff * diff).sum(-1))


def _pairwise(a, b) -> np.ndarray:
    """All distances between rows of ``a`` and ``b``, from direct differences in blocks."""
    out = np.empty((len(a), len(b)))
    step = max(1, 4_000_000 // max(1, b.size))
    for s in range(0, len(a), step):
        out[s:s + step] = _dist(a[s:s + step, None, :] - b[None, :, :])
    return out


def estimate_lipschitz(points, errors, max_pairs: int = 100_000, rng=None) -> float:
    """Largest ``|e_i - e_j| / ||x_i - x_j||`` over point pairs.

    Exhaustive when there are at most ``max_pairs`` pairs, otherwise over
    ``max_pairs`` pairs drawn from ``rng``.  Pairs closer than 1e-6 are skipped.
    """
    x = np.asarray(points, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    n = len(x)
    if n < 2 or len(e) != n:
        raise ValueError("need at least two points with one error each")
    if n * (n - 1) // 2 <= max_pairs:
        best = -1.0
        block = max(1, 4_000_000 // max(x.size, 1))
        for s in range(0, n, block):
            d = _pairwise(x[s:s + block], x)
            de = np.abs(e[s:s + block, None] - e[None, :])
            rows = np.arange(s, min(s + block, n))[:, None]
            valid = (np.arange(n)[None, :] > rows) & (d >= MIN_DIST)
            if valid.any():
                best = max(best, float((de[valid] / d[valid]).max()))
    else:
        rng = np.random.default_rng(rng)
        i = rng.integers(0, n, size=max_pairs)
        j = (i + rng.integers(1, n, size=max_pairs)) % n  # never equal to i
        d = _dist(x[i] - x[j])
        valid = d >= MIN_DIST
        best = float((np.abs(e[i] - e[j])[valid] / d[valid]).max()) if valid.any() else -1.0
    if best < 0:
        raise ValueError("all point pairs are degenerate")
    return best


def _lipschitz_or_zero(x, e, rng) -> float:
    if len(x) < 2:
        return 0.0
    try:
        return estimate_lipschitz(x, e, rng=rng)
    except ValueError:
        return 0.0


def build(points, errors, err_threshold: Optional[float] = None, r0: float = R0,
          percentile: float = PERCENTILE, rng=0) -> TrustRegion:
    """Region of ``r0``-balls around training inputs with error at most the threshold.

    The default threshold is the ``percentile``-th percentile of ``errors``.
    """
    x = np.asarray(points, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(e) or len(x) < 2:
        raise ValueError("need at least two points, one error each")
    if r0 <= 0:
        raise ValueError("r0 must be positive")
    mean = x.mean(0)
    std = x.std(0)
    std = np.where(std > 1e-12, std, 1.0)
    xs = (x - mean) / std
    thr = float(np.percentile(e, percentile)) if err_threshold is None else float(err_threshold)
    keep = np.flatnonzero(e <= thr)
    if keep.size == 0:
        raise ValueError(f"no training point has error <= {thr}")
    lip = _lipschitz_or_zero(xs[keep], e[keep], rng)
    meta = {"err_threshold": thr, "percentile": percentile if err_threshold is None else None,
            "r0": r0, "n_points": int(len(x)), "reference": REFERENCE}
    return TrustRegion(xs[keep], float(r0), float(lip), float(e[keep].max()), float(r0),
                       mean, std, keep, meta)


def expand(region: TrustRegion, points, errors, L_max: float = L_MAX, r_step: float = R_STEP,
           r_max: float = R_MAX, rng=0) -> TrustRegion:
    """Grow the radius step by step, admitting training points inside the union.

    Stops before the step that would push the Lipschitz estimate to
    ``L_max`` or beyond, or the radius past ``r_max``.
    """
    xs = region.standardize(points)
    e = np.asarray(errors, dtype=np.float64)
    idx = np.asarray(region.indices)
    r0, lip = region.radius, region.lipschitz
    r = r0
    steps = 0
    while True:
        r_new = r0 + (steps + 1) * r_step
        if r_new > r_max + 1e-12:
            break
        near = _pairwise(xs, xs[idx]).min(1) <= r_new
        cand = np.union1d(idx, np.flatnonzero(near))
        lip_new = _lipschitz_or_zero(xs[cand], e[cand], rng)
        if lip_new >= L_max:
            break
        idx, lip, r = cand, lip_new, r_new
        steps += 1
    meta = {**region.meta, "expanded": True, "L_max": L_max, "r_step": r_step, "r_max": r_max,
            "steps": steps, "final_lipschitz": lip, "final_bound": lip * r + float(e[idx].max())}
    return replace(region, centers=xs[idx], radius=float(r), lipschitz=float(lip),
                   max_train_error=float(e[idx].max()), dispersion=float(r), indices=idx, meta=meta)


def query(region: TrustRegion, x) -> QueryResult:
    """Inside with the error bound iff ``x`` lies within ``r`` of some centre."""
    xs = region.standardize(x).reshape(1, -1)
    d = float(_dist(region.centers - xs).min())
    if d <= region.radius:
        return Inside(region.bound)
    return Outside(d)


def training_inputs(model, dataset: Sequence[wm.Trajectory]):
    """Region inputs and rollout latent errors for every training trajectory."""
    pts = np.stack([input_vector(wm.encode(t.frames[0]), t.actions) for t in dataset])
    errs = np.array([wm.latent_error(model, t) for t in dataset])
    return pts, errs


def fit(model, dataset, **kw) -> TrustRegion:
    """Build from training errors, then expand."""
    pts, errs = training_inputs(model, dataset)
    region = build(pts, errs)
    return expand(region, pts, errs, **kw)


def plan_trustregion(model, region: TrustRegion, obs, task, n_candidates: int = mpc.N_CANDIDATES,
                     rng=None, *, state=None, candidates=None) -> mpc.PlanResult:
    """Baseline planning that first rejects candidates outside the region."""
    obs = np.asarray(obs, dtype=np.float64)
    cands = mpc._candidates(state, task, n_candidates, rng, candidates)
    z0 = wm.encode(obs)
    rollouts = list(wm.rollout_many(model, obs, cands))
    exempt = mpc._exempt_colors(obs, task)
    verdicts, queries = [], []
    for plan, frames in zip(cands, rollouts):
        q = query(region, input_vector(z0, plan))
        queries.append(q)
        if isinstance(q, Outside):
            verdicts.append(mpc.RejectUnsafe(0, "out_of_region"))
        else:
            verdicts.append(mpc.verify(frames, task, mpc.perceived_obstacles(frames, task, exempt)))
    result = mpc._finish("trustregion", rollouts, verdicts, cands)
    result.queries = queries
    return result
