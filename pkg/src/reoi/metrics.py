"""Image similarity metrics, prediction-quality protocols and the planning benchmark."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import composite, distractor, mpc, sim, wm

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
# radius 5 -> 11x11 support
_TRUNCATE = (WINDOW // 2) / SIGMA


def _blur(x):
    return gaussian_filter(x, sigma=(SIGMA, SIGMA, 0), truncate=_TRUNCATE, mode="reflect")


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel SSIM map (H, W, C) for unit-range images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    mu_a, mu_b = _blur(a), _blur(b)
    saa = _blur(a * a) - mu_a * mu_a
    sbb = _blur(b * b) - mu_b * mu_b
    sab = _blur(a * b) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + C1) / (mu_a ** 2 + mu_b ** 2 + C1)
    cs = (2 * sab + C2) / (saa + sbb + C2)
    return lum * cs


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all windows and channels (Gaussian 11x11, sigma 1.5)."""
    return float(ssim_map(a, b).mean())


def mask_bbox(mask: np.ndarray, pad: int = 0) -> tuple:
    """Half-open ``(r0, c0, r1, c1)`` bbox of ``mask`` grown by ``pad``, clipped."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask")
    h, w = mask.shape
    return (max(0, rows[0] - pad), max(0, cols[0] - pad),
            min(h, rows[-1] + 1 + pad), min(w, cols[-1] + 1 + pad))


def masked_ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray, pad: int = 2) -> float:
    """SSIM averaged over windows centred inside the mask's bbox grown by ``pad`` px.

    Window statistics still use the full images, so this equals :func:`ssim`
    for a full mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    r0, c0, r1, c1 = mask_bbox(mask, pad)
    return float(ssim_map(a, b)[r0:r1, c0:c1].mean())


# ---------------------------------------------------------------- feature proxy

def proxy_perceptual(a: np.ndarray, b: np.ndarray) -> float:
    """Patch-feature distance ``||encode(a) - encode(b)|| / sqrt(D)``; lower is closer.

    A cheap stand-in for a learned perceptual metric, not a replacement for one.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(wm.encode(a) - wm.encode(b)) / np.sqrt(wm.D))


def _threads() -> int:
    n = os.environ.get("REOI_THREADS")
    return max(1, int(n)) if n else (os.cpu_count() or 1)


def _map(fn, items) -> list:
    """Ordered map, threaded when REOI_THREADS allows; results never depend on it."""
    items = list(items)
    workers = min(_threads(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def _stat(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std())}


# ---------------------------------------------------------------- scenes

@dataclass
class EvalScene:
    """Initial state, executed plan and the ground-truth frames it produced."""

    state: sim.SceneState
    plan: sim.ActionPlan
    frames: np.ndarray  # (T + 1, H, W, 3)
    labels: np.ndarray  # label map of the first frame

    @property
    def task(self) -> sim.TaskSpec:
        return sim.TaskSpec.from_state(self.state)


def make_scenes(seed: int, n: int, n_novel: int = 1, layout: str = "blocking",
                n_training=(0, 3), noise: float = mpc.NOISE, purpose: str = "eval") -> list:
    """``n`` seeded scenes, each with a scripted plan executed in the simulator.

    ``n_training`` is the half-open range the obstacle count is drawn from.
    """
    out = []
    for e in range(n):
        rng = sim.episode_rng(seed, e, purpose)
        cfg = sim.SceneConfig(n_training=int(rng.integers(*n_training)), n_novel=n_novel,
                              layout=layout if n_novel else "random")
        state = sim.init_scene(cfg, int(rng.integers(2 ** 31)))
        plan = sim.scripted_policy(state, sim.TaskSpec.from_state(state), noise,
                                   sim.episode_rng(seed, e, purpose + "-plan"))
        states = sim.rollout(state, plan)
        frames = np.stack([sim.render(s).frame for s in states])
        out.append(EvalScene(state, plan, frames, sim.render(state).label_map))
    return out


def segment_object(segment, label_map, state: sim.SceneState) -> sim.ObjectSpec:
    """Simulator object covering most of a segment."""
    ids = label_map[segment.mask]
    return state.object(int(np.bincount(ids).argmax()))


# ---------------------------------------------------------------- identification studies

@dataclass
class PersistenceStudy:
    novel: list
    training: list

    @property
    def novel_median(self) -> float:
        return float(np.median(self.novel))

    @property
    def training_median(self) -> float:
        return float(np.median(self.training))

    @property
    def gap(self) -> float:
        return self.training_median - self.novel_median

    def to_dict(self) -> dict:
        return {"novel_median": self.novel_median, "training_median": self.training_median,
                "gap": self.gap, "n_novel": len(self.novel), "n_training": len(self.training)}


def persistence_study(model, scenes) -> PersistenceStudy:
    """Check-frame persistence of novel segments against training obstacle segments."""
    novel, training = [], []
    for sc in scenes:
        rep = distractor.identify(model, sc.frames[0], sc.task)
        for seg, score in zip(rep.segments, rep.scores):
            if seg.id in rep.exempt:
                continue
            obj = segment_object(seg, sc.labels, sc.state)
            (novel if obj.category == "novel" else training).append(score)
    return PersistenceStudy(novel, training)


def identification_quality(model, scenes, tau: float = distractor.TAU) -> dict:
    """Precision and recall of flagged segments against simulator categories."""
    tp = fp = fn = 0
    for sc in scenes:
        rep = distractor.identify(model, sc.frames[0], sc.task, tau=tau)
        for seg in rep.segments:
            novel = segment_object(seg, sc.labels, sc.state).category == "novel"
            flagged = seg.id in rep.flagged
            tp += flagged and novel
            fp += flagged and not novel
            fn += novel and not flagged
    return {"precision": tp / (tp + fp) if tp + fp else 1.0,
            "recall": tp / (tp + fn) if tp + fn else 1.0,
            "true_positive": tp, "false_positive": fp, "false_negative": fn}


# ---------------------------------------------------------------- prediction quality

@dataclass
class PredReport:
    mode: str
    ssim_full: dict
    proxy_perceptual_full: dict
    ssim_indist: dict
    proxy_perceptual_indist: dict
    n_scenes: int
    per_scene: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def predict(model, obs, plan, task, mode: str, report=None) -> list:
    """Predicted frames for ``plan``: raw rollout or the intervene-reimagine-reinsert pipeline."""
    if mode == "baseline":
        return wm.rollout(model, obs, plan)
    if mode != "reoi":
        raise ValueError(f"unknown mode {mode!r}")
    report = report or distractor.identify(model, obs, task)
    mask = report.flagged_mask(np.shape(obs)[:2])
    clean = distractor.inpaint(obs, mask) if mask.any() else obs
    layers = composite.distractor_layers(obs, report.flagged_segments())
    return composite.reinsert(wm.rollout(model, clean, plan), layers)


def _score_scene(model, sc: EvalScene, mode: str) -> dict:
    obs = sc.frames[0]
    report = distractor.identify(model, obs, sc.task)
    pred = predict(model, obs, sc.plan, sc.task, mode, report)
    gt = sc.frames[1:]
    mask = report.flagged_mask(obs.shape[:2])
    full_s = [ssim(p, g) for p, g in zip(pred, gt)]
    full_p = [proxy_perceptual(p, g) for p, g in zip(pred, gt)]
    if mask.any():
        pred_in = [distractor.inpaint(p, mask) for p in pred]
        gt_in = [distractor.inpaint(g, mask) for g in gt]
    else:
        pred_in, gt_in = pred, gt
    in_s = [ssim(p, g) for p, g in zip(pred_in, gt_in)]
    in_p = [proxy_perceptual(p, g) for p, g in zip(pred_in, gt_in)]
    return {"ssim_full": float(np.mean(full_s)), "proxy_full": float(np.mean(full_p)),
            "ssim_indist": float(np.mean(in_s)), "proxy_indist": float(np.mean(in_p)),
            "flagged": len(report.flagged)}


def eval_pred(model, scenes, mode: str) -> PredReport:
    """Mean per-frame similarity of predicted to executed frames, whole frame and
    with the identified distractors inpainted in both."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes")
    rows = _map(lambda sc: _score_scene(model, sc, mode), scenes)
    return PredReport(
        mode,
        _stat([r["ssim_full"] for r in rows]),
        _stat([r["proxy_full"] for r in rows]),
        _stat([r["ssim_indist"] for r in rows]),
        _stat([r["proxy_indist"] for r in rows]),
        len(rows),
        rows,
    )


# ---------------------------------------------------------------- planning benchmark

MODES = ("baseline", "reoi", "trustregion")


@dataclass
class BenchConfig:
    episodes: int = 20
    seed: int = 0
    modes: tuple = MODES
    n_candidates: int = mpc.N_CANDIDATES
    noise: float = mpc.NOISE
    n_novel: int = 1
    layout: str = "blocking"
    n_training: tuple = (0, 3)  # half-open range of obstacle counts

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class BenchReport:
    modes: dict
    episodes: list
    config: dict

    def to_dict(self) -> dict:
        return {"modes": self.modes, "episodes": self.episodes, "config": self.config}


def bench_scene(config: BenchConfig, episode: int):
    rng = sim.episode_rng(config.seed, episode, "bench")
    cfg = sim.SceneConfig(n_training=int(rng.integers(*config.n_training)),
                          n_novel=config.n_novel, layout=config.layout)
    state = sim.init_scene(cfg, int(rng.integers(2 ** 31)))
    task = sim.TaskSpec.from_state(state)
    cands = mpc.sample_candidates(state, task, config.n_candidates,
                                  sim.episode_rng(config.seed, episode, "candidates"), config.noise)
    return state, task, cands


def run_mode(mode: str, model, region, obs, task, cands):
    if mode == "baseline":
        return mpc.plan_baseline(model, obs, task, candidates=cands)
    if mode == "reoi":
        return mpc.plan_reoi(model, obs, task, candidates=cands)
    if mode == "trustregion":
        from .trustregion import plan_trustregion

        if region is None:
            raise ValueError("trustregion mode needs a region")
        return plan_trustregion(model, region, obs, task, candidates=cands)
    raise ValueError(f"unknown mode {mode!r}")


def _bench_episode(model, region, config: BenchConfig, e: int) -> dict:
    state, task, cands = bench_scene(config, e)
    obs = sim.render(state).frame
    row = {"episode": e}
    for mode in config.modes:
        res = run_mode(mode, model, region, obs, task, cands)
        out = mpc.execute(state, res, task)
        row[mode] = {"chosen": res.chosen, "success": bool(out["success"] and not out["collision"]),
                     "collision": bool(out["collision"]), "needs_human": bool(out["needs_human"])}
    return row


def bench_planning(model, region, config: BenchConfig = None) -> BenchReport:
    """Plan and execute each mode on the same seeded scenes and candidate sets.

    Success requires the target placed without any collision; NeedsHuman
    executes nothing and counts as neither success nor collision.
    """
    config = config or BenchConfig()
    for m in config.modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    rows = _map(lambda e: _bench_episode(model, region, config, e), range(config.episodes))
    modes = {}
    n = len(rows)
    for m in config.modes:
        modes[m] = {
            "success_rate": sum(r[m]["success"] for r in rows) / n,
            "collision_rate": sum(r[m]["collision"] for r in rows) / n,
            "needs_human_rate": sum(r[m]["needs_human"] for r in rows) / n,
            "n_episodes": n,
        }
    return BenchReport(modes, rows, config.to_dict())
