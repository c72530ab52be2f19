"""Synthetic ground-truth videos and CSV grid ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .model import modal_field, pixel_centers


@dataclass
class VideoGrid:
    """Dense ``T x H x W`` real field sampled at ``t_k = t0 + k dt`` on [-1, 1]^2."""

    frames: np.ndarray
    t0: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or min(self.frames.shape) < 1:
            raise ValueError(f"frames must have shape (T, H, W) with T, H, W >= 1; got {self.frames.shape}")
        if not np.issubdtype(self.frames.dtype, np.floating):
            self.frames = self.frames.astype(np.float64)
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("video contains non-finite values")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        self.t0 = float(self.t0)
        self.dt = float(self.dt)

    @property
    def shape(self):
        return self.frames.shape

    @property
    def timestamps(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.frames.shape[0])

    def head(self, n: int) -> "VideoGrid":
        return VideoGrid(self.frames[:n], self.t0, self.dt)

    def frame_index(self, t) -> np.ndarray:
        """Nearest frame for each time, clipped into the video."""
        idx = np.rint((np.asarray(t, dtype=float) - self.t0) / self.dt).astype(int)
        return np.clip(idx, 0, self.frames.shape[0] - 1)


@dataclass
class HotspotSpec:
    orbit_radius: float = 0.5
    angular_velocity: float = 4 * np.pi
    total_flux: float = 1.0
    gaussian_sigma: float = 0.2
    direction: str = "ccw"
    phase0: float = 0.0

    def __post_init__(self):
        if self.orbit_radius <= 0 or self.gaussian_sigma <= 0 or self.total_flux <= 0:
            raise ValueError("orbit_radius, gaussian_sigma and total_flux must be positive")
        if self.direction not in ("ccw", "cw"):
            raise ValueError(f"direction must be 'ccw' or 'cw', got {self.direction!r}")

    @property
    def signed_velocity(self) -> float:
        return self.angular_velocity if self.direction == "ccw" else -self.angular_velocity


MAX_FLUX_OUTSIDE = 0.01


def hotspot_flux_outside(spec: HotspotSpec, n_phase: int = 360) -> float:
    """Largest fraction of the Gaussian mass outside [-1, 1]^2 along the orbit."""
    phi = np.linspace(0, 2 * np.pi, n_phase, endpoint=False)
    inside = np.ones_like(phi)
    for c in (spec.orbit_radius * np.cos(phi), spec.orbit_radius * np.sin(phi)):
        inside *= ndtr((1 - c) / spec.gaussian_sigma) - ndtr((-1 - c) / spec.gaussian_sigma)
    return float(np.max(1 - inside))


def gen_hotspot(spec: HotspotSpec, T: int, H: int, W: int, dt: float, t0: float = 0.0) -> VideoGrid:
    """Gaussian spot orbiting the field center.

    Intensity is normalized analytically so that the integral over the
    [-1, 1]^2 field equals ``total_flux``.
    """
    lost = hotspot_flux_outside(spec)
    if lost > MAX_FLUX_OUTSIDE:
        raise ValueError(f"hot spot leaves {lost:.1%} of its flux outside the field of view")
    ys, xs = pixel_centers(H, W)
    phi = spec.phase0 + spec.signed_velocity * dt * np.arange(T)
    cx = spec.orbit_radius * np.cos(phi)
    cy = spec.orbit_radius * np.sin(phi)
    s2 = spec.gaussian_sigma**2
    gx = np.exp(-((xs[None, :] - cx[:, None]) ** 2) / (2 * s2))
    gy = np.exp(-((ys[None, :] - cy[:, None]) ** 2) / (2 * s2))
    frames = spec.total_flux / (2 * np.pi * s2) * gy[:, :, None] * gx[:, None, :]
    return VideoGrid(frames, t0, dt)


@dataclass
class LinearModalTruth:
    """Ground-truth parameters of a synthetic modal video (rates per time unit)."""

    w0: np.ndarray  # (H, W) real
    wc: np.ndarray  # (K, H, W) complex
    omega: np.ndarray  # (K,) complex
    b: np.ndarray  # (K+1,) complex, b[0] real
    t0: float = 0.0

    def render(self, t) -> np.ndarray:
        K, H, W = self.wc.shape
        tt = np.atleast_1d(np.asarray(t, dtype=float)) - self.t0
        vals = modal_field(self.w0.ravel(), self.wc.reshape(K, H * W).T, self.b, self.omega, tt)
        return vals.T.reshape(len(tt), H, W)


def smooth_field(rng: np.random.Generator, H: int, W: int, order: int = 3) -> np.ndarray:
    """Random low-order cosine series, unit RMS."""
    ys, xs = pixel_centers(H, W)
    out = np.zeros((H, W))
    for m in range(order + 1):
        for n in range(order + 1):
            c = rng.standard_normal() / (1.0 + m * m + n * n)
            out += c * np.outer(np.cos(np.pi * n * (ys + 1) / 2), np.cos(np.pi * m * (xs + 1) / 2))
    return out / np.sqrt(np.mean(out**2))


def default_modal_spectrum(K: int, window: float) -> np.ndarray:
    """Decaying/oscillating rates spread over a few cycles per window."""
    k = np.arange(1, K + 1)
    cycles = 0.9 + 1.3 * (k - 1)
    return (-0.2 * k + 2j * np.pi * cycles) / window


def gen_linear_modal(
    K: int,
    T: int,
    H: int,
    W: int,
    dt: float,
    seed: int,
    omega=None,
    b=None,
    t0: float = 0.0,
    order: int = 3,
) -> tuple[VideoGrid, LinearModalTruth]:
    """Video that is exactly a K-pair modal model with seeded smooth modes.

    ``omega`` holds K complex rates per time unit with non-positive real parts;
    by default a few cycles over the ``(T-1) dt`` window.
    """
    rng = np.random.default_rng(seed)
    window = max(T - 1, 1) * dt
    omega = default_modal_spectrum(K, window) if omega is None else np.asarray(omega, dtype=complex)
    if omega.shape != (K,):
        raise ValueError(f"expected {K} rates, got {omega.shape}")
    if np.any(omega.real > 0):
        raise ValueError("all mode rates must have non-positive real part")
    w0 = 1.0 + 0.5 * smooth_field(rng, H, W, order)
    wc = np.zeros((K, H, W), dtype=complex)
    for k in range(K):
        wc[k] = 0.25 * (smooth_field(rng, H, W, order) + 1j * smooth_field(rng, H, W, order))
    if b is None:
        phases = rng.uniform(0, 2 * np.pi, K)
        b = np.concatenate([[1.0], np.exp(1j * phases)])
    b = np.asarray(b, dtype=complex)
    if b.shape != (K + 1,):
        raise ValueError(f"expected {K + 1} initial coefficients, got {b.shape}")
    b[0] = b[0].real
    truth = LinearModalTruth(w0, wc, omega, b, t0)
    video = VideoGrid(truth.render(t0 + dt * np.arange(T)), t0, dt)
    return video, truth


def ingest_csv_grid(paths, dt: float, t0: float = 0.0) -> VideoGrid:
    """Stack per-frame CSV files of ``H x W`` numbers into a video."""
    frames = []
    shape = None
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing frame file {path}")
        rows = []
        with path.open(newline="") as fh:
            for r, row in enumerate(csv.reader(fh)):
                if not row:
                    continue
                vals = []
                for c, cell in enumerate(row):
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise ValueError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
                if rows and len(vals) != len(rows[0]):
                    raise ValueError(f"{path}: ragged row {r} has {len(vals)} columns, expected {len(rows[0])}")
                rows.append(vals)
        arr = np.array(rows, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"{path}: empty frame")
        if shape is not None and arr.shape != shape:
            raise ValueError(f"{path}: frame shape {arr.shape} differs from {shape}")
        shape = arr.shape
        frames.append(arr)
    if not frames:
        raise ValueError("no frame files given")
    return VideoGrid(np.stack(frames), t0, dt)
