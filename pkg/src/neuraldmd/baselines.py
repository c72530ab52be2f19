"""Comparison methods: scalar-weight 3D-Var with persistence forecast, and a plain (x, y, t) network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .field_net import NetworkParams, PosEncConfig, backward, forward, init_params, posenc
from .model import grid_coords
from .observation import PixelObservations, pixel_indices
from .training import FitResult, TrainConfig, fit


# ---------------------------------------------------------------- 3D-Var


@dataclass
class AssimConfig:
    blend_weight: float = 0.8
    smooth_sigma: float = 2.0  # pixels; 0 disables smoothing
    grid: tuple[int, int] = (64, 64)

    def __post_init__(self):
        self.grid = tuple(int(n) for n in self.grid)
        if not 0 <= self.blend_weight <= 1:
            raise ValueError("blend_weight must lie in [0, 1]")
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be non-negative")


def innovation(background: np.ndarray, obs: PixelObservations) -> np.ndarray:
    """Observation minus background at observed cells (averaged on repeats), zero elsewhere."""
    H, W = background.shape
    d = np.zeros((H, W))
    if len(obs) == 0:
        return d
    rows, cols = pixel_indices(obs.x, obs.y, H, W)
    flat = rows * W + cols
    counts = np.bincount(flat, minlength=H * W)
    sums = np.bincount(flat, weights=obs.value - background[rows, cols], minlength=H * W)
    seen = counts > 0
    d.ravel()[seen] = sums[seen] / counts[seen]
    return d


def threedvar_step(background: np.ndarray, obs: PixelObservations, cfg: AssimConfig) -> np.ndarray:
    background = np.asarray(background, dtype=np.float64)
    d = innovation(background, obs)
    if cfg.smooth_sigma > 0:
        d = gaussian_filter(d, cfg.smooth_sigma, mode="reflect", truncate=4.0)
    return background + cfg.blend_weight * d


def threedvar_run(stream: list[tuple[float, PixelObservations]], background: np.ndarray, cfg: AssimConfig) -> np.ndarray:
    """Sequential analyses, each used unchanged as the next background."""
    if not stream:
        raise ValueError("empty observation stream")
    times = np.array([t for t, _ in stream], dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("observation times must be strictly increasing")
    out = np.empty((len(stream), *np.shape(background)))
    current = np.asarray(background, dtype=np.float64)
    for k, (_, obs) in enumerate(stream):
        current = threedvar_step(current, obs, cfg)
        out[k] = current
    return out


def group_by_time(obs: PixelObservations) -> list[tuple[float, PixelObservations]]:
    times, inv = np.unique(obs.t, return_inverse=True)
    inv = inv.ravel()
    return [(float(t), obs.subset(np.flatnonzero(inv == k))) for k, t in enumerate(times)]


def mean_first_frame(obs: PixelObservations, grid) -> np.ndarray:
    """Flat background at the mean of the earliest observations."""
    first = obs.t == obs.t.min()
    return np.full(tuple(grid), float(np.mean(obs.value[first])))


# ---------------------------------------------------------------- neural representation


@dataclass
class NeuralRepConfig:
    posenc_degree: int = 4
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    activation: str = "tanh"
    coord_scale: float = 0.5  # applied to (x, y, t') before encoding
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.coord_scale <= 1:
            raise ValueError("coord_scale must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class NeuralRepModel:
    """Direct network ``posenc(x, y, t') -> value`` with the training window mapped to ``t'`` in [-1, 1]."""

    net: NetworkParams
    posenc: PosEncConfig
    config: NeuralRepConfig
    time_window: tuple[float, float] | None = None

    @classmethod
    def create(cls, cfg: NeuralRepConfig | None = None, dtype=np.float64) -> "NeuralRepModel":
        cfg = cfg or NeuralRepConfig()
        pe = PosEncConfig(cfg.posenc_degree, 3)
        net = init_params([pe.encoded_dim, *cfg.hidden, 1], cfg.activation, cfg.seed, dtype)
        return cls(net, pe, cfg)

    @property
    def dtype(self):
        return self.net.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"net.{k}": v for k, v in self.net.arrays().items()}

    def astype(self, dtype) -> "NeuralRepModel":
        return NeuralRepModel(self.net.astype(dtype), self.posenc, self.config, self.time_window)

    def copy(self) -> "NeuralRepModel":
        return self.astype(self.dtype)

    def to_model_time(self, t):
        t = np.asarray(t, dtype=float)
        if self.time_window is None:
            return t
        t0, t1 = self.time_window
        return 2.0 * (t - t0) / (t1 - t0) - 1.0

    def _inputs(self, coords, times, p_idx=None, t_idx=None):
        coords = np.asarray(coords, dtype=self.dtype)
        times = np.asarray(times, dtype=self.dtype)
        if p_idx is None:
            P, n_t = len(coords), len(times)
            xy = np.repeat(coords, n_t, axis=0)
            tt = np.tile(times, P)
        else:
            xy, tt = coords[p_idx], times[t_idx]
        return posenc(np.column_stack([xy, tt]) * self.config.coord_scale, self.posenc)

    def field_with_cache(self, coords, times, p_idx=None, t_idx=None):
        out, tape = forward(self.net, self._inputs(coords, times, p_idx, t_idx))
        values = out[:, 0]
        if p_idx is None:
            values = values.reshape(len(coords), len(times))
        return values, {"tape": tape}

    def backward(self, cache, g) -> dict[str, np.ndarray]:
        g = np.asarray(g, dtype=self.dtype).reshape(-1, 1)
        grads, _ = backward(cache["tape"], g)
        return {f"net.{k}": v for k, v in grads.arrays().items()}

    def field(self, coords, tn) -> np.ndarray:
        """Values at ``coords`` for model time(s) ``tn``; shapes as the modal model's ``field``."""
        values, _ = self.field_with_cache(coords, np.atleast_1d(tn))
        return values[:, 0] if np.ndim(tn) == 0 else values

    def render(self, H: int, W: int, tn) -> np.ndarray:
        vals = self.field(grid_coords(H, W), np.atleast_1d(tn))
        frames = vals.T.reshape(-1, H, W)
        return frames[0] if np.ndim(tn) == 0 else frames


def neural_rep_fit(obs: PixelObservations, net_cfg: NeuralRepConfig, cfg: TrainConfig, out_dir=None) -> FitResult:
    if len(obs) == 0:
        raise ValueError("no observations")
    if cfg.loss_kind != "pixel":
        raise ValueError("the neural-representation baseline trains on pixel observations")
    return fit(NeuralRepModel.create(net_cfg, cfg.dtype), obs, cfg, out_dir)
