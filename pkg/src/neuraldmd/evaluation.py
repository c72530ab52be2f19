"""Reconstruction metrics, cylinder plots and spectrum tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .datagen import VideoGrid
from .formats import read_csv, write_csv
from .model import ModalDecomposition

DECAY_CUTOFF = -0.05


def normalized_l2(a, b) -> float:
    """``||a - b|| / ||b||`` with ``b`` the reference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(a - b) / nb)


@dataclass
class ErrorCurve:
    t: np.ndarray
    total_err: np.ndarray
    dynamics_err: np.ndarray
    window_end: float

    @property
    def extrapolating(self) -> np.ndarray:
        return self.t > self.window_end

    def rows(self):
        return zip(self.t, self.total_err, self.dynamics_err, self.extrapolating)

    def write_csv(self, path) -> None:
        write_csv(path, ["t", "total_err", "dynamics_err", "extrapolated"], self.rows())


def error_curve(recon: VideoGrid, truth: VideoGrid, window_end: float) -> ErrorCurve:
    if recon.frames.shape != truth.frames.shape:
        raise ValueError(f"video shapes differ: {recon.frames.shape} vs {truth.frames.shape}")
    if not np.allclose(recon.timestamps, truth.timestamps, rtol=0, atol=1e-9 * max(1.0, truth.dt)):
        raise ValueError("video timestamps are not aligned")
    r = recon.frames.astype(np.float64)
    g = truth.frames.astype(np.float64)
    total = np.array([normalized_l2(a, b) for a, b in zip(r, g)])
    rd = r - r.mean(axis=0)
    gd = g - g.mean(axis=0)
    dyn = np.array([normalized_l2(a, b) if np.any(b) else float(np.linalg.norm(a)) for a, b in zip(rd, gd)])
    return ErrorCurve(truth.timestamps, total, dyn, float(window_end))


def ring_points(radius: float, n_angles: int, H: int, W: int):
    """Fractional (row, col) indices of a ring of field radius ``radius``."""
    theta = 2 * np.pi * np.arange(n_angles) / n_angles
    x = radius * np.cos(theta)
    y = radius * np.sin(theta)
    return theta, (y + 1) * H / 2 - 0.5, (x + 1) * W / 2 - 0.5


def cylinder_plot(video: VideoGrid, radius: float, n_angles: int = 360) -> np.ndarray:
    """Ring samples over time; rows are angles (counter-clockwise from +x), columns frames."""
    if n_angles < 4:
        raise ValueError("n_angles must be at least 4")
    if not 0 < radius < 1:
        raise ValueError("radius must lie inside the field, 0 < radius < 1")
    T, H, W = video.frames.shape
    _, rows, cols = ring_points(radius, n_angles, H, W)
    out = np.empty((n_angles, T))
    for k in range(T):
        out[:, k] = map_coordinates(video.frames[k].astype(np.float64), [rows, cols], order=1, mode="nearest")
    return out


def ridge_angles(cyl: np.ndarray) -> np.ndarray:
    """Unwrapped angle of each column's maximum."""
    n = cyl.shape[0]
    theta = 2 * np.pi * np.argmax(cyl, axis=0) / n
    return np.unwrap(theta)


def angular_velocity(cyl: np.ndarray, times) -> float:
    """Least-squares slope of the unwrapped argmax ridge (radians per time unit)."""
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        raise ValueError("need at least two frames")
    return float(np.polyfit(times, ridge_angles(cyl), 1)[0])


def centroids(video: VideoGrid, threshold: float = 0.5) -> np.ndarray:
    """Intensity-weighted (x, y) per frame over pixels at or above ``threshold`` times the frame peak."""
    from .model import pixel_centers

    T, H, W = video.frames.shape
    ys, xs = pixel_centers(H, W)
    f = video.frames.astype(np.float64)
    peak = f.reshape(T, -1).max(axis=1)
    f = np.where(f >= threshold * peak[:, None, None], f, 0.0)
    f = np.clip(f, 0, None)
    tot = f.sum(axis=(1, 2))
    tot = np.where(tot > 0, tot, 1.0)
    cx = np.einsum("thw,w->t", f, xs) / tot
    cy = np.einsum("thw,h->t", f, ys) / tot
    return np.stack([cx, cy], axis=1)


@dataclass
class SpectrumRow:
    k: int
    alpha: float
    omega: float
    amplitude: float
    b_re: float
    b_im: float
    flagged: bool


def spectrum_report(decomp: ModalDecomposition, cutoff: float = DECAY_CUTOFF, continuous: bool = False) -> list[SpectrumRow]:
    """One row per mode sorted by decay rate, least decaying first.

    Rates are in the decomposition's own unit; ``continuous`` multiplies by
    its time scale.
    """
    om = np.asarray(decomp.omega, dtype=complex)
    if continuous:
        om = om * decomp.time_scale
    rows = [
        SpectrumRow(k, float(w.real), float(w.imag), float(abs(b)), float(b.real), float(b.imag), bool(w.real < cutoff))
        for k, (w, b) in enumerate(zip(om, decomp.b))
    ]
    rows.sort(key=lambda r: (-r.alpha, r.k))
    return rows


SPECTRUM_HEADER = ["k", "alpha", "omega", "amplitude", "b_re", "b_im", "flagged"]


def write_spectrum_csv(path, rows: list[SpectrumRow]) -> None:
    write_csv(path, SPECTRUM_HEADER, [(r.k, r.alpha, r.omega, r.amplitude, r.b_re, r.b_im, r.flagged) for r in rows])


def read_spectrum_csv(path) -> list[SpectrumRow]:
    header, body = read_csv(path)
    if header != SPECTRUM_HEADER:
        raise ValueError(f"{path}: unexpected spectrum header {header}")
    return [
        SpectrumRow(int(k), float(a), float(w), float(m), float(br), float(bi), bool(int(f)))
        for k, a, w, m, br, bi, f in body
    ]


def mode_stack(decomp: ModalDecomposition) -> np.ndarray:
    """Real image stack of the modes: Re w_0, then Re/Im of every further mode."""
    planes = [decomp.modes[0].real]
    if not decomp.paired:
        planes.append(decomp.modes[0].imag)
    for m in decomp.modes[1:]:
        planes.extend([m.real, m.imag])
    return np.stack(planes)


def write_cylinder_csv(path, cyl: np.ndarray, times) -> None:
    n = cyl.shape[0]
    theta = 2 * np.pi * np.arange(n) / n
    write_csv(path, ["theta", *[f"t={t!r}" for t in np.asarray(times, dtype=float)]], ([th, *row] for th, row in zip(theta, cyl)))


def render_video(model, shape, times) -> VideoGrid:
    """Frames of a trained model (or a ``ModalDecomposition``) at physical ``times``."""
    times = np.asarray(times, dtype=float)
    H, W = shape
    if isinstance(model, ModalDecomposition):
        frames = model.render(times)
    else:
        frames = model.render(H, W, model.to_model_time(times))
    dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
    return VideoGrid(np.asarray(frames, dtype=np.float64), float(times[0]), dt)
