"""Latent world model: fixed patch-mean encoder, learned dynamics and decoder.

Two model kinds share one interface (``decode``, ``predict_next``,
``rollout_latents``):

``conv`` (default)
    Residual convolutional dynamics on the 8x8 patch grid, whose output is
    projected onto the per-patch colour subspace spanned by the training
    latents, and a convolutional decoder that classifies every pixel into the
    colour codebook observed in training.
``linear``
    Ridge-regression dynamics and decoder solved in closed form.

The linear model is kept because it is the simplest member of the family
and is exactly solvable, but on this environment it cannot reconstruct
frames well enough to drive identification or planning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import linalg
from torch import nn

from . import sim

PATCH = 8
GRID = sim.H // PATCH
C = 3
D = GRID * GRID * C
HISTORY = 3
ACTION_DIM = 3
OFFSET = 0.7  # latents are centred on the background grey inside the conv model
MAX_CODES = 32


class ModelError(RuntimeError):
    """Model is unusable for the requested operation."""


class NumericalError(ModelError):
    """Normal equations are singular and no regularisation was requested."""


@dataclass
class Trajectory:
    """Executed episode: ``T + 1`` frames, ``T`` actions and metadata."""

    frames: np.ndarray
    actions: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.actions = np.asarray(self.actions).reshape(-1, ACTION_DIM)
        if len(self.frames) != len(self.actions) + 1:
            raise ValueError(f"{len(self.frames)} frames for {len(self.actions)} actions")


def generate_dataset(global_seed: int, episodes: int, policy: str = "mixed", n_novel: int = 0,
                     horizon: int = sim.PLAN_LENGTH) -> list:
    """Simulator episodes as trajectories; metadata holds the initial state."""
    out = []
    for e in range(episodes):
        pol = policy
        if pol == "mixed":
            pol = "scripted" if sim.is_scripted_episode(e) else "random"
        cfg, states, plan = sim.generate_episode(global_seed, e, pol, n_novel, horizon=horizon)
        frames = np.stack([sim.render(s).frame for s in states]).astype(np.float32)
        meta = {**sim.state_to_dict(states[0]), "episode": e, "seed": int(global_seed),
                "policy": pol, "scene_config": cfg.to_dict()}
        out.append(Trajectory(frames, plan.as_array().astype(np.float32), meta))
    return out


# ---------------------------------------------------------------- encoder

def encode(frame) -> np.ndarray:
    """Mean RGB of each 8x8 patch, patches in row-major order: shape ``(192,)``."""
    f = np.asarray(frame, dtype=np.float64)
    if f.shape != (sim.H, sim.W, C):
        raise ValueError(f"expected a {(sim.H, sim.W, C)} frame, got {f.shape}")
    return f.reshape(GRID, PATCH, GRID, PATCH, C).mean(axis=(1, 3)).reshape(D)


def encode_batch(frames) -> np.ndarray:
    f = np.asarray(frames, dtype=np.float64)
    n = f.shape[0]
    return f.reshape(n, GRID, PATCH, GRID, PATCH, C).mean(axis=(2, 4)).reshape(n, D)


def _pad_history(latents: Sequence[np.ndarray]) -> list:
    """Repeat the earliest latent until ``HISTORY`` are available."""
    latents = list(latents)
    if not latents:
        raise ValueError("need at least one latent")
    while len(latents) < HISTORY:
        latents.insert(0, latents[0])
    return latents[-HISTORY:]


# ---------------------------------------------------------------- models

class WorldModel:
    kind = "base"
    manifest: dict

    def decode(self, z) -> np.ndarray:
        return self.decode_batch(np.asarray(z, dtype=np.float64)[None])[0]

    def decode_batch(self, z) -> np.ndarray:
        raise NotImplementedError

    def predict_next(self, history, action) -> np.ndarray:
        hist = np.stack(_pad_history(history))[None]
        return self.step_batch(hist, np.asarray(action, dtype=np.float64)[None])[0]

    def step_batch(self, hist, actions) -> np.ndarray:
        """``hist`` (N, 3, D), ``actions`` (N, 3) -> next latents (N, D)."""
        raise NotImplementedError

    def rollout_latents(self, z_hist, plans) -> np.ndarray:
        """Autoregressive latents for a batch of plans sharing one start.

        ``z_hist`` is the (padded) history ending at the current latent;
        ``plans`` has shape (N, T, 3).  Returns (N, T, D).
        """
        plans = np.asarray(plans, dtype=np.float64)
        if plans.ndim == 2:
            plans = plans[None]
        n, t = plans.shape[:2]
        if t == 0:
            raise ValueError("empty plan")
        hist = np.repeat(np.stack(_pad_history(z_hist))[None], n, axis=0)
        out = np.empty((n, t, D))
        for k in range(t):
            z = self.step_batch(hist, plans[:, k])
            out[:, k] = z
            hist = np.concatenate([hist[:, 1:], z[:, None]], axis=1)
        return out

    def reconstruct(self, frame) -> np.ndarray:
        return self.decode(encode(frame))


@dataclass
class LinearWorldModel(WorldModel):
    dyn_W: np.ndarray  # (D, HISTORY * D + ACTION_DIM)
    dec_W: np.ndarray  # (H * W * C, D)
    ridge_lambda: float
    residual_mean: float = 0.0
    residual_max: float = 0.0
    manifest: dict = field(default_factory=dict)
    kind = "linear"

    def __post_init__(self):
        if self.dyn_W.shape != (D, HISTORY * D + ACTION_DIM):
            raise ModelError(f"bad dyn_W shape {self.dyn_W.shape}")
        if self.dec_W.shape != (sim.H * sim.W * C, D):
            raise ModelError(f"bad dec_W shape {self.dec_W.shape}")

    def decode_batch(self, z):
        z = np.asarray(z, dtype=np.float64).reshape(-1, D)
        return np.clip(z @ self.dec_W.T, 0.0, 1.0).reshape(-1, sim.H, sim.W, C)

    def step_batch(self, hist, actions):
        x = np.concatenate([np.asarray(hist).reshape(len(hist), -1), actions], axis=1)
        return x @ self.dyn_W.T


class _Dynamics(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(HISTORY * C + ACTION_DIM, hidden, 3, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, C, 1),
        )
        self.register_buffer("proj", torch.eye(C))

    def forward(self, hist, action):
        # hist (N, HISTORY*C, 8, 8) centred latents; action (N, 3)
        a = action[:, :, None, None].expand(-1, -1, GRID, GRID)
        out = hist[:, -C:] + self.net(torch.cat([hist, a], 1))
        return torch.einsum("ij,njhw->nihw", self.proj, out)


class _Decoder(nn.Module):
    def __init__(self, hidden: int, n_codes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(C, hidden, 3, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, n_codes * PATCH * PATCH, 1),
            nn.PixelShuffle(PATCH),
        )

    def forward(self, grid):
        return self.net(grid)  # (N, n_codes, H, W) logits


def _to_grid(z) -> torch.Tensor:
    z = np.asarray(z, dtype=np.float32).reshape(-1, GRID, GRID, C) - np.float32(OFFSET)
    return torch.from_numpy(np.ascontiguousarray(z.transpose(0, 3, 1, 2)))


def _from_grid(g: torch.Tensor) -> np.ndarray:
    return g.permute(0, 2, 3, 1).reshape(len(g), D).double().numpy() + OFFSET


class ConvWorldModel(WorldModel):
    kind = "conv"

    def __init__(self, params: dict, codebook, hidden: int, residual_mean: float = 0.0,
                 residual_max: float = 0.0, manifest: Optional[dict] = None):
        self.codebook = np.asarray(codebook, dtype=np.float64)
        self.hidden = int(hidden)
        self.residual_mean = float(residual_mean)
        self.residual_max = float(residual_max)
        self.manifest = dict(manifest or {})
        self.dyn = _Dynamics(self.hidden)
        self.dec = _Decoder(self.hidden, len(self.codebook))
        self._load(params)

    def _load(self, params):
        for prefix, mod in (("dyn.", self.dyn), ("dec.", self.dec)):
            sd = {k[len(prefix):]: torch.from_numpy(np.asarray(v, dtype=np.float32).copy())
                  for k, v in params.items() if k.startswith(prefix)}
            missing, unexpected = mod.load_state_dict(sd, strict=False)
            if missing or unexpected:
                raise ModelError(f"parameter mismatch: missing {missing}, unexpected {unexpected}")
            mod.eval()

    @property
    def params(self) -> dict:
        out = {}
        for prefix, mod in (("dyn.", self.dyn), ("dec.", self.dec)):
            for k, v in mod.state_dict().items():
                out[prefix + k] = v.detach().numpy().astype(np.float32)
        return out

    @property
    def projection(self) -> np.ndarray:
        return self.dyn.proj.numpy().astype(np.float64)

    def decode_batch(self, z):
        with torch.no_grad():
            idx = self.dec(_to_grid(z)).argmax(1).numpy()
        return self.codebook[idx]

    def step_batch(self, hist, actions):
        hist = np.asarray(hist)
        n = len(hist)
        g = _to_grid(hist.reshape(n * HISTORY, D)).reshape(n, HISTORY * C, GRID, GRID)
        a = torch.from_numpy(np.asarray(actions, dtype=np.float32).reshape(n, ACTION_DIM))
        with torch.no_grad():
            out = self.dyn(g, a).clamp(-OFFSET, 1.0 - OFFSET)
        return _from_grid(out)


# ---------------------------------------------------------------- api

def _require(model):
    if model is None or not isinstance(model, WorldModel):
        raise ModelError("untrained model")
    return model


def decode(model: WorldModel, z) -> np.ndarray:
    return _require(model).decode(z)


def predict_next(model: WorldModel, history, action) -> np.ndarray:
    if isinstance(action, sim.Action):
        action = action.as_array()
    return _require(model).predict_next(history, action)


def rollout(model: WorldModel, frame0, plan, warmup: Optional[Sequence] = None) -> list:
    """Predicted frames ``o_1 .. o_T`` for ``plan`` starting at ``frame0``.

    ``warmup`` holds up to two frames preceding ``frame0``; missing history
    is padded by repeating the earliest available frame.
    """
    model = _require(model)
    plan = _plan_array(plan)
    if len(plan) == 0:
        raise ValueError("empty plan")
    zs = [encode(f) for f in (warmup or [])] + [encode(frame0)]
    lat = model.rollout_latents(zs, plan[None])[0]
    return list(model.decode_batch(lat))


def rollout_many(model: WorldModel, frame0, plans) -> np.ndarray:
    """Predicted frames for several plans from one observation: (N, T, H, W, C)."""
    model = _require(model)
    arr = np.stack([_plan_array(p) for p in plans])
    lat = model.rollout_latents([encode(frame0)], arr)
    n, t = lat.shape[:2]
    return model.decode_batch(lat.reshape(n * t, D)).reshape(n, t, sim.H, sim.W, C)


def _plan_array(plan) -> np.ndarray:
    if isinstance(plan, sim.ActionPlan):
        return plan.as_array()
    return np.asarray(plan, dtype=np.float64).reshape(-1, ACTION_DIM)


def step_errors(model: WorldModel, traj: Trajectory) -> np.ndarray:
    """Per-step latent L2 errors of the rollout against the executed frames."""
    model = _require(model)
    lat = model.rollout_latents([encode(traj.frames[0])], traj.actions[None])[0]
    return np.linalg.norm(lat - encode_batch(traj.frames[1:]), axis=1)


def latent_error(model: WorldModel, traj: Trajectory) -> float:
    """Sum over the horizon of ``||z_hat_t - encode(frame_t)||_2``."""
    return float(step_errors(model, traj).sum())


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    kind: str = "conv"
    ridge_lambda: float = 1e-3
    seed: int = 0
    hidden: int = 64
    dec_epochs: int = 6
    dec_lr: float = 8e-3
    dec_batch: int = 64
    dyn_epochs: int = 75
    dyn_lr: float = 5e-3
    dyn_batch: int = 32
    unroll: int = 4
    change_weight: float = 20.0  # extra loss weight on patches that change

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _transitions(dataset):
    """Stacked ``(history, action, next)`` tuples in dataset order."""
    xs, acts, ys = [], [], []
    for traj in dataset:
        z = encode_batch(traj.frames)
        zp = np.concatenate([np.repeat(z[:1], HISTORY - 1, axis=0), z])
        for t in range(len(traj.actions)):
            xs.append(zp[t:t + HISTORY])
            acts.append(traj.actions[t])
            ys.append(z[t + 1])
    return np.stack(xs), np.stack(acts), np.stack(ys)


def ridge_solve(X, Y, lam: float) -> np.ndarray:
    """``W`` minimising ``||X W^T - Y||^2 + lam ||W||^2`` via Cholesky."""
    A = X.T @ X
    if lam > 0:
        A = A + lam * np.eye(A.shape[0])
    try:
        cf = linalg.cho_factor(A, lower=False, check_finite=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("normal matrix is not positive definite") from exc
    diag = np.abs(np.diag(cf[0]))
    if lam == 0 and (diag.min() / diag.max()) ** 2 < A.shape[0] * np.finfo(float).eps:
        raise NumericalError("normal matrix is singular; use lambda > 0")
    return linalg.cho_solve(cf, X.T @ Y).T


def _train_linear(dataset, cfg: TrainConfig) -> LinearWorldModel:
    hist, acts, ys = _transitions(dataset)
    X = np.concatenate([hist.reshape(len(hist), -1), acts], axis=1)
    dyn_W = ridge_solve(X, ys, cfg.ridge_lambda)
    # decoder normal equations accumulated frame-block by frame-block
    ZtZ = np.zeros((D, D))
    ZtY = np.zeros((D, sim.H * sim.W * C))
    for traj in dataset:
        z = encode_batch(traj.frames)
        ZtZ += z.T @ z
        ZtY += z.T @ traj.frames.reshape(len(z), -1)
    A = ZtZ + cfg.ridge_lambda * np.eye(D)
    try:
        cf = linalg.cho_factor(A)
    except linalg.LinAlgError as exc:
        raise NumericalError("decoder normal matrix is not positive definite") from exc
    dec_W = linalg.cho_solve(cf, ZtY).T
    res = np.linalg.norm(X @ dyn_W.T - ys, axis=1)
    return LinearWorldModel(dyn_W, dec_W, cfg.ridge_lambda, float(res.mean()), float(res.max()))


def _colour_keys(pixels) -> np.ndarray:
    """Exact int64 key per colour, rounded to 1e-6 per channel."""
    q = np.rint(np.asarray(pixels, dtype=np.float64).reshape(-1, C) * 1e6).astype(np.int64)
    return (q[:, 0] << 42) | (q[:, 1] << 21) | q[:, 2]


def _codebook(dataset) -> np.ndarray:
    """Distinct training colours, the ``MAX_CODES`` most frequent if there are more."""
    keys, counts = np.unique(np.concatenate([_colour_keys(t.frames) for t in dataset]),
                             return_counts=True)
    if len(keys) > MAX_CODES:
        keys = np.sort(keys[np.argsort(-counts, kind="stable")[:MAX_CODES]])
    mask = (1 << 21) - 1
    return np.stack([keys >> 42, (keys >> 21) & mask, keys & mask], axis=1) / 1e6


def colour_projection(latents: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
    """Orthogonal projector onto the span of the centred per-patch colours."""
    x = latents.reshape(-1, C) - OFFSET
    ev, vec = np.linalg.eigh(x.T @ x / len(x))
    basis = vec[:, ev > rel_tol * ev.max()]
    return basis @ basis.T


def _nearest_code(frames, codebook) -> np.ndarray:
    """Codebook index per pixel: exact key lookup, distance search for the rest."""
    keys = _colour_keys(frames)
    code_keys = _colour_keys(codebook)
    order = np.argsort(code_keys)
    pos = np.clip(np.searchsorted(code_keys[order], keys), 0, len(order) - 1)
    idx = order[pos]
    miss = code_keys[idx] != keys
    if miss.any():
        px = np.asarray(frames, dtype=np.float64).reshape(-1, C)[miss]
        idx[miss] = ((px[:, None, :] - codebook[None]) ** 2).sum(-1).argmin(1)
    return idx.astype(np.uint8).reshape(np.shape(frames)[:-1])


def _train_conv(dataset, cfg: TrainConfig, log=None) -> ConvWorldModel:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    prev_det = torch.are_deterministic_algorithms_enabled()
    prev_threads = torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    # gradient reductions split across intra-op threads change the bits
    torch.set_num_threads(1)
    try:
        codebook = _codebook(dataset)
        per_traj = [encode_batch(t.frames) for t in dataset]
        lat = np.concatenate(per_traj)
        dec = _Decoder(cfg.hidden, len(codebook))
        dyn = _Dynamics(cfg.hidden)
        dyn.proj.copy_(torch.from_numpy(colour_projection(lat).astype(np.float32)))

        # decoder: per-pixel classification into the codebook
        X = _to_grid(lat)
        Y = torch.from_numpy(np.concatenate([_nearest_code(np.asarray(t.frames), codebook)
                                             for t in dataset]))
        _fit(dec, lambda idx: nn.functional.cross_entropy(dec(X[idx]), Y[idx].long()),
             len(X), cfg.dec_epochs, cfg.dec_batch, cfg.dec_lr, gen)
        if log:
            log(f"decoder trained on {len(X)} frames, {len(codebook)} colours")

        # dynamics: short unrolled rollouts, change-weighted squared error
        lens = {len(t.actions) for t in dataset}
        T = min(lens)
        if T < cfg.unroll:
            raise ValueError(f"episodes shorter than unroll length {cfg.unroll}")
        Z = torch.stack([_to_grid(z[:T + 1]) for z in per_traj])
        Zp = torch.cat([Z[:, :1].expand(-1, HISTORY - 1, -1, -1, -1), Z], 1)
        A = torch.from_numpy(np.stack([t.actions[:T] for t in dataset]).astype(np.float32))

        def dyn_loss(idx):
            s0 = torch.randint(0, T - cfg.unroll + 1, (len(idx),), generator=gen)
            hist = [Zp[idx, s0 + j] for j in range(HISTORY)]
            loss = 0.0
            for k in range(cfg.unroll):
                a = A[idx, s0 + k]
                pred = dyn(torch.cat(hist[-HISTORY:], 1), a)
                tgt = Zp[idx, s0 + k + HISTORY]
                moved = ((tgt - hist[-1]).abs().sum(1, keepdim=True) > 0.01).float()
                loss = loss + ((1.0 + cfg.change_weight * moved) * (pred - tgt) ** 2).mean()
                hist.append(pred)
            return loss / cfg.unroll

        _fit(dyn, dyn_loss, len(Z), cfg.dyn_epochs, cfg.dyn_batch, cfg.dyn_lr, gen)
        if log:
            log(f"dynamics trained on {len(Z)} episodes")
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)

    params = {"dyn." + k: v.detach().numpy().astype(np.float32) for k, v in dyn.state_dict().items()}
    params.update({"dec." + k: v.detach().numpy().astype(np.float32) for k, v in dec.state_dict().items()})
    model = ConvWorldModel(params, codebook, cfg.hidden)
    hist, acts, ys = _transitions(dataset)
    res = np.concatenate([
        np.linalg.norm(model.step_batch(hist[i:i + 512], acts[i:i + 512]) - ys[i:i + 512], axis=1)
        for i in range(0, len(hist), 512)
    ])
    model.residual_mean, model.residual_max = float(res.mean()), float(res.max())
    return model


def _fit(module, loss_fn, n, epochs, batch, lr, gen):
    if epochs <= 0:
        return
    module.train()
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    steps = epochs * ((n + batch - 1) // batch)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.15)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch):
            loss = loss_fn(perm[i:i + batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    module.eval()


def train(dataset: Sequence[Trajectory], lam: Optional[float] = None,
          config: Optional[TrainConfig] = None, log=None) -> WorldModel:
    """Fit a world model on training-category trajectories.

    ``lam`` overrides ``config.ridge_lambda`` (used by the linear kind).
    """
    cfg = config or TrainConfig()
    if lam is not None:
        cfg = TrainConfig(**{**cfg.to_dict(), "ridge_lambda": float(lam)})
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    for traj in dataset:
        if _has_novel(traj.metadata):
            raise ValueError("dataset contains novel-category objects")
    if cfg.kind == "linear":
        model = _train_linear(dataset, cfg)
    elif cfg.kind == "conv":
        model = _train_conv(dataset, cfg, log)
    else:
        raise ValueError(f"unknown model kind {cfg.kind!r}")
    model.manifest = {"kind": cfg.kind, "train_config": cfg.to_dict(), "n_episodes": len(dataset)}
    return model


def _has_novel(meta: dict) -> bool:
    return any(o.get("category") == "novel" for o in meta.get("objects", []))
