"""Losses, Adam, plateau schedule and the epoch loop.

Any model exposing ``parameters()``, ``field_with_cache(coords, times,
p_idx, t_idx)``, ``backward(cache, g)``, ``to_model_time`` and a writable
``time_window`` can be trained here; both the neural modal model and the
neural-representation baseline do.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .formats import write_csv
from .model import grid_coords
from .observation import PixelObservations, VisibilityObservations, fourier_factors, pixel_area

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
PLATEAU_TOL = 1e-6


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    plateau_patience: int = 500
    lr_factor: float = 0.5
    epochs: int = 12000
    batch_size: int = 0  # 0: full batch; pixel mode counts samples, visibility mode counts frames
    seed: int = 0
    precision: int = 64
    loss_kind: str = "pixel"
    render_grid: tuple[int, int] = (64, 64)
    checkpoint_every: int = 1000
    chunks: int = 1
    workers: int = 1

    def __post_init__(self):
        self.render_grid = tuple(int(n) for n in self.render_grid)
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.loss_kind not in ("pixel", "visibility"):
            raise ValueError(f"loss_kind must be 'pixel' or 'visibility', got {self.loss_kind!r}")
        if self.batch_size < 0 or self.chunks < 1 or self.workers < 1:
            raise ValueError("batch_size must be >= 0; chunks and workers >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["render_grid"] = list(self.render_grid)
        return d


@dataclass
class TrainState:
    lr: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_loss: float = math.inf
    since_improvement: int = 0

    @classmethod
    def create(cls, params: dict[str, np.ndarray], lr: float) -> "TrainState":
        return cls(lr, {k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; carries the last good checkpoint path, if any."""

    def __init__(self, epoch: int, checkpoint=None):
        where = f"; last good checkpoint: {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at epoch {epoch}{where}")
        self.epoch = epoch
        self.checkpoint = checkpoint


# ---------------------------------------------------------------- losses


@dataclass
class PreparedPixels:
    """Pixel batch with coordinates and times deduplicated once."""

    coords: np.ndarray
    p_idx: np.ndarray
    times: np.ndarray
    t_idx: np.ndarray
    value: np.ndarray

    @classmethod
    def from_obs(cls, obs: PixelObservations) -> "PreparedPixels":
        if len(obs) == 0:
            raise ValueError("empty pixel batch")
        coords, p_idx = np.unique(obs.coords, axis=0, return_inverse=True)
        times, t_idx = np.unique(obs.t, return_inverse=True)
        return cls(coords, p_idx.ravel(), times, t_idx.ravel(), obs.value)

    def __len__(self):
        return len(self.value)


@dataclass
class PreparedVisibilities:
    """Visibility batch with its frame index and Fourier kernels for one render grid."""

    times: np.ndarray
    t_idx: np.ndarray
    Ey: np.ndarray
    Ex: np.ndarray
    vis: np.ndarray
    weight: np.ndarray
    grid: tuple[int, int]

    @classmethod
    def from_obs(cls, obs: VisibilityObservations, grid, dtype=np.float64) -> "PreparedVisibilities":
        if len(obs) == 0:
            raise ValueError("empty visibility batch")
        if np.any(obs.sigma <= 0):
            raise ValueError("visibility sigma must be positive")
        H, W = grid
        cdt = np.complex64 if dtype == np.float32 else np.complex128
        times, t_idx = np.unique(obs.t, return_inverse=True)
        Ey, Ex = fourier_factors(obs.u, obs.v, H, W, cdt)
        return cls(times, t_idx.ravel(), Ey, Ex, obs.vis.astype(cdt), 1.0 / obs.sigma**2, (H, W))

    def __len__(self):
        return len(self.vis)


def pixel_loss(model, batch, grads: bool = True):
    """Mean squared error at the observed (x, y, t); returns ``(loss, grads)``."""
    b = batch if isinstance(batch, PreparedPixels) else PreparedPixels.from_obs(batch)
    dt = model.dtype
    values, cache = model.field_with_cache(
        b.coords.astype(dt), model.to_model_time(b.times).astype(dt), b.p_idx, b.t_idx
    )
    r = values - b.value.astype(dt)
    loss = float(np.mean(r.astype(np.float64) ** 2))
    if not grads:
        return loss, None
    return loss, model.backward(cache, (2.0 / len(r)) * r)


def vis_chi2(model, batch, grid=(64, 64), grads: bool = True):
    """Normalized chi-square of the rendered frames' Fourier samples."""
    b = batch if isinstance(batch, PreparedVisibilities) else PreparedVisibilities.from_obs(batch, grid, model.dtype)
    H, W = b.grid
    dt = model.dtype
    n_t = len(b.times)
    frames, cache = model.field_with_cache(grid_coords(H, W).astype(dt), model.to_model_time(b.times).astype(dt))
    frames = frames.T.reshape(n_t, H, W)
    dA = pixel_area(H, W)
    groups = [np.flatnonzero(b.t_idx == j) for j in range(n_t)]
    pred = np.empty(len(b), dtype=b.Ey.dtype)
    for j, sel in enumerate(groups):
        pred[sel] = dA * np.sum((b.Ey[sel] @ frames[j]) * b.Ex[sel], axis=1)
    r = pred - b.vis
    N = len(b)
    loss = float(np.sum(np.abs(r.astype(np.complex128)) ** 2 * b.weight) / N)
    if not grads:
        return loss, None
    c = ((2.0 * dA / N) * np.conj(r) * b.weight).astype(b.Ey.dtype)
    g = np.empty((n_t, H, W), dtype=dt)
    for j, sel in enumerate(groups):
        g[j] = (b.Ey[sel].T @ (c[sel, None] * b.Ex[sel])).real
    return loss, model.backward(cache, g.reshape(n_t, H * W).T)


# ---------------------------------------------------------------- optimizer and schedule


def adam_step(state: TrainState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    """In-place bias-corrected Adam update of every parameter array."""
    if set(grads) != set(params):
        raise ValueError(f"gradient groups {sorted(set(grads) ^ set(params))} do not match the parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
    state.step += 1
    c1 = 1.0 - BETA1**state.step
    c2 = 1.0 - BETA2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        params[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(params[name].dtype)
    return params, state


def plateau_schedule(state: TrainState, epoch_loss: float, patience: int, factor: float = 0.5) -> float:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    The first epoch only sets the reference loss and counts toward the
    plateau, so ``patience`` identical losses trigger exactly one reduction.
    """
    if state.best_loss == math.inf:
        state.best_loss = epoch_loss
        state.since_improvement = 1
    elif epoch_loss < state.best_loss - PLATEAU_TOL * abs(state.best_loss):
        state.best_loss = epoch_loss
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    if state.since_improvement >= patience:
        state.lr *= factor
        state.since_improvement = 0
    return state.lr


# ---------------------------------------------------------------- batching


def _frame_groups(t: np.ndarray) -> list[np.ndarray]:
    order = np.argsort(t, kind="stable")
    _, starts = np.unique(t[order], return_index=True)
    return np.split(order, starts[1:])


def make_batches(obs, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Index arrays of the epoch's minibatches (visibility batches hold whole frames)."""
    if cfg.loss_kind == "pixel":
        n = len(obs)
        if cfg.batch_size == 0 or cfg.batch_size >= n:
            return [np.arange(n)]
        perm = rng.permutation(n)
        return [np.sort(perm[i : i + cfg.batch_size]) for i in range(0, n, cfg.batch_size)]
    groups = _frame_groups(obs.t)
    if cfg.batch_size == 0 or cfg.batch_size >= len(groups):
        return [np.concatenate(groups)]
    perm = rng.permutation(len(groups))
    return [np.concatenate([groups[j] for j in sorted(perm[i : i + cfg.batch_size])]) for i in range(0, len(groups), cfg.batch_size)]


def _split_chunks(obs, idx: np.ndarray, cfg: TrainConfig) -> list[np.ndarray]:
    if cfg.chunks == 1:
        return [idx]
    if cfg.loss_kind == "pixel":
        return [c for c in np.array_split(idx, cfg.chunks) if len(c)]
    groups = _frame_groups(obs.t[idx])
    parts = np.array_split(np.arange(len(groups)), min(cfg.chunks, len(groups)))
    return [idx[np.concatenate([groups[j] for j in p])] for p in parts if len(p)]


class Objective:
    """Loss and gradient over a batch, evaluated over a fixed chunk partition.

    Chunk results are combined in chunk order, so the value does not depend
    on the number of worker threads.
    """

    def __init__(self, obs, cfg: TrainConfig):
        self.obs = obs
        self.cfg = cfg
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        self._cache: dict = {}
        self.max_cached = 64

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def _prepared(self, idx, dtype):
        key = (idx.tobytes(), np.dtype(dtype).name)
        hit = self._cache.get(key)
        if hit is None:
            sub = self.obs.subset(idx)
            if self.cfg.loss_kind == "pixel":
                hit = PreparedPixels.from_obs(sub)
            else:
                hit = PreparedVisibilities.from_obs(sub, self.cfg.render_grid, dtype)
            if len(self._cache) >= self.max_cached:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = hit
        return hit

    def _one(self, model, idx, grads):
        prep = self._prepared(idx, model.dtype)
        if self.cfg.loss_kind == "pixel":
            return pixel_loss(model, prep, grads)
        return vis_chi2(model, prep, grads=grads)

    def __call__(self, model, idx, grads=True):
        chunks = _split_chunks(self.obs, idx, self.cfg)
        if len(chunks) == 1:
            return self._one(model, chunks[0], grads)
        if self._pool is None:
            results = [self._one(model, c, grads) for c in chunks]
        else:
            results = list(self._pool.map(lambda c: self._one(model, c, grads), chunks))
        n = len(idx)
        loss = sum(len(c) / n * r[0] for c, r in zip(chunks, results))
        if not grads:
            return loss, None
        total = {k: np.zeros_like(v) for k, v in results[0][1].items()}
        for c, (_, g) in zip(chunks, results):
            for k in total:
                total[k] += (len(c) / n) * g[k]
        return loss, total


# ---------------------------------------------------------------- epoch loop


@dataclass
class FitResult:
    model: object
    state: TrainState
    history: list[tuple[int, float, float]]
    best_model: object = None
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1][1] if self.history else math.nan


def _check_kind(obs, cfg):
    want = PixelObservations if cfg.loss_kind == "pixel" else VisibilityObservations
    if not isinstance(obs, want):
        raise ValueError(f"loss_kind {cfg.loss_kind!r} needs {want.__name__}, got {type(obs).__name__}")
    if len(obs) == 0:
        raise ValueError("no observations")


def fit(model, obs, cfg: TrainConfig, out_dir=None, state: TrainState | None = None, meta: dict | None = None) -> FitResult:
    """Jointly optimize every parameter group of ``model`` on ``obs``.

    The training window is taken from the observation timestamps unless the
    model already has one.  Each epoch draws its shuffle from
    ``default_rng([seed, epoch])`` so a run resumed from a checkpoint
    continues exactly like an unbroken one.  With ``out_dir`` the loss
    history goes to ``loss_history.csv`` and checkpoints to
    ``checkpoint_<epoch>.ndmd`` and ``checkpoint_best.ndmd``.
    """
    from .checkpoint import checkpoint_write

    _check_kind(obs, cfg)
    if model.dtype != cfg.dtype:
        model = model.astype(cfg.dtype)
    if model.time_window is None:
        t0, t1 = float(obs.t.min()), float(obs.t.max())
        model.time_window = (t0, t1 if t1 > t0 else t0 + 1.0)
    params = model.parameters()
    if state is None:
        state = TrainState.create(params, cfg.lr0)
    else:
        state.m = {k: v.astype(params[k].dtype) for k, v in state.m.items()}
        state.v = {k: v.astype(params[k].dtype) for k, v in state.v.items()}
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history: list[tuple[int, float, float]] = []
    checkpoints: list[Path] = []
    best_model = model.copy()
    best_loss = math.inf
    last_good = None
    objective = Objective(obs, cfg)
    try:
        for epoch in range(state.epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            total, count = 0.0, 0
            lr = state.lr
            for idx in make_batches(obs, cfg, rng):
                loss, grads = objective(model, idx)
                if not math.isfinite(loss):
                    raise TrainingDiverged(epoch, last_good)
                adam_step(state, params, grads, lr)
                total += loss * len(idx)
                count += len(idx)
            epoch_loss = total / count
            history.append((epoch, epoch_loss, lr))
            state.epoch = epoch + 1
            plateau_schedule(state, epoch_loss, cfg.plateau_patience, cfg.lr_factor)
            if epoch_loss < best_loss:
                best_loss = epoch_loss
                best_model = model.copy()
            if out_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                path = out_dir / f"checkpoint_{state.epoch}.ndmd"
                checkpoint_write(path, model, state, meta)
                checkpoints.append(path)
                last_good = path
                checkpoint_write(out_dir / "checkpoint_best.ndmd", best_model, None, meta)
            if epoch % 100 == 0 or epoch == cfg.epochs - 1:
                log.info("epoch %d loss %.6g lr %.3g", epoch, epoch_loss, lr)
    finally:
        objective.close()
        if out_dir is not None:
            write_csv(out_dir / "loss_history.csv", ["epoch", "loss", "lr"], history)
    if out_dir is not None and history:
        checkpoint_write(out_dir / "checkpoint_best.ndmd", best_model, None, meta)
        path = out_dir / "checkpoint_final.ndmd"
        checkpoint_write(path, model, state, meta)
        checkpoints.append(path)
    return FitResult(model, state, history, best_model, checkpoints)


def evaluate_loss(model, obs, loss_kind: str, render_grid=(64, 64)) -> float:
    if loss_kind == "pixel":
        return pixel_loss(model, obs, grads=False)[0]
    return vis_chi2(model, obs, render_grid, grads=False)[0]
