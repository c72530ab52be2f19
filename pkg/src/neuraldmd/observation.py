"""Forward measurement models: pixel sampling, uv tracks, direct Fourier transform, noise.

Spatial frequencies are in cycles per field of view.  Pixel centers on the
[-1, 1]^2 field map to ``x / 2`` in [-1/2, 1/2) for the transform, and the
pixel area is measured in field units so ``V(0, 0)`` is the total flux.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .datagen import VideoGrid
from .model import pixel_centers


@dataclass
class PixelObservations:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    value: np.ndarray
    sigma: np.ndarray

    kind = "pixel"

    def __post_init__(self):
        for name in ("x", "y", "t", "value", "sigma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.sigma <= 0):
            raise ValueError("pixel observation sigma must be positive")

    def __len__(self):
        return len(self.value)

    def subset(self, idx) -> "PixelObservations":
        return PixelObservations(self.x[idx], self.y[idx], self.t[idx], self.value[idx], self.sigma[idx])

    @property
    def coords(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)


@dataclass
class VisibilityObservations:
    u: np.ndarray
    v: np.ndarray
    t: np.ndarray
    vis: np.ndarray
    sigma: np.ndarray

    kind = "vis"

    def __post_init__(self):
        for name in ("u", "v", "t", "sigma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.vis = np.asarray(self.vis, dtype=np.complex128)
        if np.any(self.sigma <= 0):
            raise ValueError("visibility sigma must be positive")

    def __len__(self):
        return len(self.vis)

    def subset(self, idx) -> "VisibilityObservations":
        return VisibilityObservations(self.u[idx], self.v[idx], self.t[idx], self.vis[idx], self.sigma[idx])


# ---------------------------------------------------------------- pixels


def sample_pixels(
    video: VideoGrid,
    fraction: float,
    seed: int,
    noise_sigma: float = 0.0,
    fixed_mask: bool = True,
    sigma_floor: float = 1e-3,
) -> PixelObservations:
    """Uniform random subset of ``floor(fraction H W)`` pixels per frame."""
    T, H, W = video.frames.shape
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = int(np.floor(fraction * H * W + 1e-9))
    if n < 1:
        raise ValueError(f"fraction {fraction} of a {H}x{W} grid selects no pixels")
    rng = np.random.default_rng(seed)
    ys, xs = pixel_centers(H, W)
    if fixed_mask:
        flat = np.sort(rng.choice(H * W, size=n, replace=False))
        idx = np.tile(flat, (T, 1))
    else:
        idx = np.stack([np.sort(rng.choice(H * W, size=n, replace=False)) for _ in range(T)])
    rows, cols = np.divmod(idx, W)
    frame = np.repeat(np.arange(T), n)
    values = video.frames[frame, rows.ravel(), cols.ravel()].astype(np.float64)
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    sigma = np.full(values.shape, noise_sigma if noise_sigma > 0 else sigma_floor)
    return PixelObservations(xs[cols.ravel()], ys[rows.ravel()], video.timestamps[frame], values, sigma)


def pixel_indices(x, y, H: int, W: int):
    """Grid row/column of normalized pixel-center coordinates."""
    cols = np.rint((np.asarray(x) + 1) * W / 2 - 0.5).astype(int)
    rows = np.rint((np.asarray(y) + 1) * H / 2 - 0.5).astype(int)
    if np.any((cols < 0) | (cols >= W) | (rows < 0) | (rows >= H)):
        raise ValueError("observation coordinates fall outside the grid")
    return rows, cols


# ---------------------------------------------------------------- stations and uv tracks


@dataclass
class StationTable:
    names: list[str]
    xyz: np.ndarray  # (n, 3) geocentric meters

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if len(self.names) != len(self.xyz):
            raise ValueError("station names and coordinates differ in length")
        if len(self.names) < 2:
            raise ValueError("a station table needs at least two stations")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("station coordinates must be finite")

    @classmethod
    def from_csv(cls, path) -> "StationTable":
        with Path(path).open(newline="") as fh:
            return cls._parse(csv.DictReader(fh), path)

    @classmethod
    def builtin(cls, name: str) -> "StationTable":
        """Shipped arrays: ``ngeht`` and ``ngeht_plus``."""
        ref = resources.files("neuraldmd.data").joinpath(f"{name}.csv")
        if not ref.is_file():
            raise ValueError(f"no builtin station table named {name!r}")
        with ref.open(newline="") as fh:
            return cls._parse(csv.DictReader(fh), name)

    @classmethod
    def _parse(cls, reader, src):
        names, xyz = [], []
        if reader.fieldnames is None or set(reader.fieldnames) != {"name", "x_m", "y_m", "z_m"}:
            raise ValueError(f"{src}: station CSV must have columns name,x_m,y_m,z_m")
        for row in reader:
            names.append(row["name"])
            xyz.append([float(row["x_m"]), float(row["y_m"]), float(row["z_m"])])
        return cls(names, np.array(xyz))

    def subset(self, names) -> "StationTable":
        idx = [self.names.index(n) for n in names]
        return StationTable([self.names[i] for i in idx], self.xyz[idx])


@dataclass
class UVTrack:
    t: np.ndarray
    station_a: np.ndarray
    station_b: np.ndarray
    u: np.ndarray
    v: np.ndarray
    sigma: np.ndarray

    def __len__(self):
        return len(self.t)

    def subset(self, idx) -> "UVTrack":
        return UVTrack(self.t[idx], self.station_a[idx], self.station_b[idx], self.u[idx], self.v[idx], self.sigma[idx])


def baseline_uv(B: np.ndarray, hour_angle, dec: float, wavelength: float):
    """Projected baseline (meters in ``B``) to (u, v) in wavelengths."""
    sH, cH = np.sin(hour_angle), np.cos(hour_angle)
    sd, cd = np.sin(dec), np.cos(dec)
    u = (B[..., 0] * sH + B[..., 1] * cH) / wavelength
    v = (-B[..., 0] * cH * sd + B[..., 1] * sH * sd + B[..., 2] * cd) / wavelength
    return u, v


def uv_track(
    stations: StationTable,
    source_dec: float,
    hour_angle_range: tuple[float, float, float],
    obs_wavelength: float,
    fov: float,
    elevation_cutoff: float = np.deg2rad(10.0),
    times=None,
    thermal_sigma: float = 0.0,
) -> UVTrack:
    """Earth-rotation uv coverage of every visible station pair.

    ``hour_angle_range`` is ``(start, stop, step)`` in radians (stop
    inclusive when it falls on the grid); ``fov`` is the field-of-view angle
    in radians used to express frequencies in cycles per field of view.
    ``times`` optionally assigns one timestamp per scan, otherwise the scan
    time is hours since the first hour angle.
    """
    start, stop, step = hour_angle_range
    if not abs(source_dec) < np.pi / 2:
        raise ValueError("declination must satisfy |dec| < pi/2")
    if not step > 0:
        raise ValueError("hour-angle step must be positive")
    n_scans = int(np.floor((stop - start) / step + 1e-9)) + 1
    hours = start + step * np.arange(n_scans)
    if times is None:
        times = (hours - start) * 12.0 / np.pi
    times = np.asarray(times, dtype=float)
    if times.shape != hours.shape:
        raise ValueError(f"got {len(times)} times for {n_scans} scans")
    unit = stations.xyz / np.maximum(np.linalg.norm(stations.xyz, axis=1, keepdims=True), 1e-300)
    n = len(stations.names)
    pa, pb = np.triu_indices(n, k=1)
    B = stations.xyz[pa] - stations.xyz[pb]
    rows = {k: [] for k in ("t", "a", "b", "u", "v")}
    for H, t in zip(hours, times):
        s = np.array([np.cos(source_dec) * np.cos(H), -np.cos(source_dec) * np.sin(H), np.sin(source_dec)])
        up = unit @ s >= np.sin(elevation_cutoff)
        keep = up[pa] & up[pb]
        u, v = baseline_uv(B[keep], H, source_dec, obs_wavelength)
        rows["t"].append(np.full(keep.sum(), t))
        rows["a"].append(pa[keep])
        rows["b"].append(pb[keep])
        rows["u"].append(u * fov)
        rows["v"].append(v * fov)
    t = np.concatenate(rows["t"])
    if len(t) == 0:
        raise ValueError("fewer than two stations see the source at every scan; no baselines")
    return UVTrack(
        t,
        np.concatenate(rows["a"]),
        np.concatenate(rows["b"]),
        np.concatenate(rows["u"]),
        np.concatenate(rows["v"]),
        np.full(len(t), thermal_sigma),
    )


def thin_track(track: UVTrack, max_per_scan: int, seed: int) -> UVTrack:
    """Keep a seeded random subset of at most ``max_per_scan`` baselines per scan."""
    if max_per_scan < 1:
        raise ValueError("max_per_scan must be >= 1")
    rng = np.random.default_rng(seed)
    keep = []
    for t in np.unique(track.t):
        idx = np.flatnonzero(track.t == t)
        if len(idx) > max_per_scan:
            idx = np.sort(rng.choice(idx, size=max_per_scan, replace=False))
        keep.append(idx)
    return track.subset(np.concatenate(keep))


# ---------------------------------------------------------------- Fourier transform


def fourier_factors(u, v, H: int, W: int, dtype=np.complex128):
    """Separable kernels ``exp(-2 pi i v y)`` (n, H) and ``exp(-2 pi i u x)`` (n, W)."""
    ys, xs = pixel_centers(H, W)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    Ey = np.exp(-2j * np.pi * np.outer(v, ys / 2)).astype(dtype)
    Ex = np.exp(-2j * np.pi * np.outer(u, xs / 2)).astype(dtype)
    return Ey, Ex


def pixel_area(H: int, W: int) -> float:
    return 4.0 / (H * W)


def nudft(image, points) -> np.ndarray:
    """Direct Fourier sum of a real image at arbitrary (u, v) points."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    H, W = image.shape
    Ey, Ex = fourier_factors(points[:, 0], points[:, 1], H, W)
    return pixel_area(H, W) * np.sum((Ey @ image) * Ex, axis=1)


def video_visibilities(video: VideoGrid, t, u, v) -> np.ndarray:
    """Noiseless visibilities of the nearest frame for each (t, u, v)."""
    frame = video.frame_index(t)
    out = np.empty(len(frame), dtype=np.complex128)
    for f in np.unique(frame):
        sel = frame == f
        out[sel] = nudft(video.frames[f].astype(np.float64), np.stack([np.asarray(u)[sel], np.asarray(v)[sel]], 1))
    return out


def observe_visibilities(
    video: VideoGrid,
    track: UVTrack,
    frac_noise: float,
    seed: int,
    floor_fraction: float = 1e-3,
) -> VisibilityObservations:
    """Sample the video along a uv track and add complex Gaussian noise.

    ``sigma = max(frac_noise |V|, floor_fraction max|V|, track sigma)`` is the
    rms of the complex residual, so each component gets ``sigma / sqrt(2)``.
    """
    if len(track) == 0:
        raise ValueError("empty uv track")
    if frac_noise < 0:
        raise ValueError("frac_noise must be non-negative")
    order = np.lexsort((np.arange(len(track)), track.t))
    track = track.subset(order)
    frame = video.frame_index(track.t)
    t = video.timestamps[frame]
    V = video_visibilities(video, t, track.u, track.v)
    floor = floor_fraction * np.max(np.abs(V))
    if floor <= 0:
        floor = floor_fraction
    sigma = np.maximum(np.maximum(frac_noise * np.abs(V), floor), track.sigma)
    rng = np.random.default_rng(seed)
    if frac_noise > 0 or np.any(track.sigma > 0):
        noise = rng.standard_normal((len(V), 2)) @ np.array([1.0, 1j]) * sigma / np.sqrt(2)
        V = V + noise
    return VisibilityObservations(track.u.copy(), track.v.copy(), t, V, sigma)


# ---------------------------------------------------------------- JSON lines


def write_observations(path, obs) -> None:
    with Path(path).open("w") as fh:
        if isinstance(obs, PixelObservations):
            for x, y, t, val, s in zip(obs.x, obs.y, obs.t, obs.value, obs.sigma):
                rec = {"kind": "pixel", "t": float(t), "x": float(x), "y": float(y), "re": float(val), "sigma": float(s)}
                fh.write(json.dumps(rec) + "\n")
        else:
            for u, v, t, V, s in zip(obs.u, obs.v, obs.t, obs.vis, obs.sigma):
                rec = {
                    "kind": "vis", "t": float(t), "u": float(u), "v": float(v),
                    "re": float(V.real), "im": float(V.imag), "sigma": float(s),
                }
                fh.write(json.dumps(rec) + "\n")


def read_observations(path):
    kinds = set()
    cols: dict[str, list] = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                if kind == "pixel":
                    vals = dict(x=rec["x"], y=rec["y"], t=rec["t"], value=rec["re"], sigma=rec["sigma"])
                elif kind == "vis":
                    vals = dict(u=rec["u"], v=rec["v"], t=rec["t"], vis=complex(rec["re"], rec["im"]), sigma=rec["sigma"])
                else:
                    raise ValueError(f"unknown kind {kind!r}")
            except (KeyError, ValueError, TypeError) as err:
                raise ValueError(f"{path}:{lineno}: bad observation record ({err})") from None
            kinds.add(kind)
            if len(kinds) > 1:
                raise ValueError(f"{path}:{lineno}: mixed pixel and visibility records")
            for k, val in vals.items():
                cols.setdefault(k, []).append(val)
    if not kinds:
        raise ValueError(f"{path}: no observations")
    if kinds == {"pixel"}:
        return PixelObservations(**cols)
    return VisibilityObservations(**cols)
