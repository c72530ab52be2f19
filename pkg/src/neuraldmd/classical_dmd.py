"""Grid-based reference methods: exact (SVD) DMD and TV-regularized optDMD."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datagen import VideoGrid
from .model import ModalDecomposition

log = logging.getLogger(__name__)

RANK_TOL = 1e-12


class RankDeficiencyError(ValueError):
    def __init__(self, requested: int, usable: int):
        super().__init__(f"requested rank {requested} but the snapshot matrix has usable rank {usable}")
        self.requested = requested
        self.usable = usable


class OptDMDDivergence(FloatingPointError):
    pass


@dataclass
class SnapshotMatrix:
    X: np.ndarray
    X_prime: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        if self.X.shape != self.X_prime.shape:
            raise ValueError(f"X {self.X.shape} and X' {self.X_prime.shape} differ in shape")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @classmethod
    def from_video(cls, video: VideoGrid) -> "SnapshotMatrix":
        T = video.frames.shape[0]
        if T < 2:
            raise ValueError("need at least two frames")
        cols = video.frames.reshape(T, -1).astype(np.float64).T
        return cls(cols[:, :-1], cols[:, 1:], video.dt)


@dataclass
class DiscreteSpectrum:
    Lambda: np.ndarray
    W: np.ndarray
    A_tilde: np.ndarray = field(repr=False, default=None)
    W_tilde: np.ndarray = field(repr=False, default=None)


def exact_dmd(snap: SnapshotMatrix, r: int) -> DiscreteSpectrum:
    n, m = snap.X.shape
    if not 1 <= r <= min(n, m):
        raise ValueError(f"rank must lie in [1, {min(n, m)}], got {r}")
    U, s, Vh = np.linalg.svd(snap.X, full_matrices=False)
    usable = int(np.sum(s > RANK_TOL * s[0])) if s[0] > 0 else 0
    if r > usable:
        raise RankDeficiencyError(r, usable)
    U, s, V = U[:, :r], s[:r], Vh[:r].conj().T
    XpVS = snap.X_prime @ V / s
    A_tilde = U.conj().T @ XpVS
    lam, W_tilde = np.linalg.eig(A_tilde)
    return DiscreteSpectrum(lam, XpVS @ W_tilde, A_tilde, W_tilde)


def to_continuous(Lambda, dt: float) -> np.ndarray:
    """Continuous rates ``log(Lambda) / dt`` on the principal branch."""
    lam = np.asarray(Lambda, dtype=complex)
    if np.any(lam == 0):
        raise ValueError("zero eigenvalue has no continuous-time rate (infinitely fast decay)")
    if not dt > 0:
        raise ValueError("dt must be positive")
    return np.log(lam) / dt


def dmd_amplitudes(spec: DiscreteSpectrum, x0) -> np.ndarray:
    return np.linalg.lstsq(spec.W, np.asarray(x0), rcond=None)[0]


# ---------------------------------------------------------------- optDMD


def tv_value_grad(img: np.ndarray, eps: float = 1e-12):
    """Isotropic total variation with forward differences and its gradient."""
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1, :] = img[1:, :] - img[:-1, :]
    mag = np.sqrt(dx * dx + dy * dy + eps)
    gx, gy = dx / mag, dy / mag
    grad = -gx - gy
    grad[:, 1:] += gx[:, :-1]
    grad[1:, :] += gy[:-1, :]
    return float(np.sum(mag) - np.sqrt(eps) * img.size), grad


@dataclass
class OptDMDResult:
    decomposition: ModalDecomposition
    objective: float
    history: list[float]


class _OptDMDProblem:
    def __init__(self, frames: np.ndarray, tv_weight: float):
        T, H, W = frames.shape
        self.shape = (H, W)
        self.Y = frames.reshape(T, -1).T.astype(np.float64)  # (n, T)
        self.x0 = self.Y[:, 0]
        self.tv_weight = tv_weight

    def amplitudes(self, Wm):
        """Least-squares projection ``b = W^+ x_0`` of the first frame onto the modes."""
        return np.linalg.lstsq(Wm, self.x0.astype(Wm.dtype), rcond=None)[0]

    def objective(self, Wm, Om, cols=None, grad=False):
        Y = self.Y if cols is None else self.Y[:, cols]
        t = np.arange(self.Y.shape[1], dtype=float) if cols is None else np.asarray(cols, dtype=float)
        b = self.amplitudes(Wm)
        E = np.exp(np.outer(t, Om))  # (T, r)
        DB = E * b
        R = Y - Wm @ DB.T
        f = float(np.sum(np.abs(R) ** 2))
        tv = 0.0
        gtv = None
        if self.tv_weight > 0:
            H, W = self.shape
            gtv = np.zeros(Wm.shape, dtype=complex)
            for j in range(Wm.shape[1]):
                m = Wm[:, j].reshape(H, W)
                vr, gr = tv_value_grad(m.real)
                vi, gi = tv_value_grad(m.imag)
                tv += vr + vi
                gtv[:, j] = (gr + 1j * gi).ravel()
            f += self.tv_weight * tv
        if not grad:
            return f
        # gradients are 2 df/dconj(.), the steepest-ascent direction
        RW = R.conj().T @ Wm  # (T, r): rows R_t^H W
        G_W = -2.0 * R @ np.conj(DB)
        g_b = -np.conj(np.sum(RW * E, axis=0))  # df/dconj(b) with W held fixed
        # b = (W^H W)^-1 W^H x0 also moves with W
        u = np.linalg.solve(Wm.conj().T @ Wm, g_b)
        e = self.x0 - Wm @ b
        G_W += 2.0 * (-np.outer(Wm @ u, np.conj(b)) + np.outer(e, np.conj(u)))
        if gtv is not None:
            G_W += self.tv_weight * gtv
        G_O = np.conj(-2.0 * np.sum(t[:, None] * RW * E, axis=0) * b)
        return f, G_W, G_O


def _dmd_init(Y, r, rng):
    n, T = Y.shape
    snap = SnapshotMatrix(Y[:, :-1], Y[:, 1:])
    try:
        spec = exact_dmd(snap, r)
        lam = spec.Lambda
        phi = spec.W
    except RankDeficiencyError as err:
        usable = max(err.usable, 0)
        lam = np.ones(r, dtype=complex)
        phi = (rng.standard_normal((n, r)) + 1j * rng.standard_normal((n, r))) * 1e-3
        if usable:
            spec = exact_dmd(snap, usable)
            lam[:usable] = spec.Lambda
            phi[:, :usable] = spec.W
    lam = np.where(lam == 0, 1e-8, lam)
    return phi.astype(complex), np.log(lam.astype(complex))


def optdmd_fit(
    video: VideoGrid,
    r: int,
    tv_weight: float = 0.0,
    iters: int = 500,
    seed: int = 0,
    batch_frames: int | None = None,
    step: float | None = None,
    tol: float = 1e-14,
) -> OptDMDResult:
    """Fit free complex grid modes and rates by projected gradient descent.

    Minimizes ``sum_t ||X_t - sum_j w_j exp(Omega_j t) b_j||^2 + tv_weight TV(w)``
    with ``b = W^+ x_0`` (least-squares projection of the first frame) recomputed from the modes, ``Re(Omega) <= 0``
    enforced by projection and a backtracking rule that only accepts steps
    that lower the objective (full-batch mode).  Initialized from exact DMD.
    """
    if tv_weight < 0:
        raise ValueError("tv_weight must be non-negative")
    frames = np.asarray(video.frames, dtype=np.float64)
    T = frames.shape[0]
    if T < 2:
        raise ValueError("optDMD needs at least two frames")
    prob = _OptDMDProblem(frames, tv_weight)
    rng = np.random.default_rng(seed)
    Wm, Om = _dmd_init(prob.Y, r, rng)
    Om = np.minimum(Om.real, 0) + 1j * Om.imag
    scale = max(float(np.sum(prob.Y**2)), 1e-300)
    s = step if step is not None else 1.0 / scale
    # rates are per frame; their gradient carries factors of t
    om_scale = 1.0 / T**2
    cols = None
    f = prob.objective(Wm, Om)
    history = [f]
    for it in range(iters):
        if batch_frames is not None:
            cols = np.sort(rng.choice(T, size=min(batch_frames, T), replace=False))
        fb, G_W, G_O = prob.objective(Wm, Om, cols, grad=True)
        if not np.isfinite(fb):
            raise OptDMDDivergence("optDMD objective became non-finite; try a smaller step")
        accepted = False
        for _ in range(60):
            W_new = Wm - s * G_W
            O_new = Om - s * om_scale * G_O
            O_new = np.minimum(O_new.real, 0) + 1j * O_new.imag
            f_new = prob.objective(W_new, O_new, cols)
            if np.isfinite(f_new) and f_new <= fb:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        Wm, Om = W_new, O_new
        s *= 1.5
        f_full = prob.objective(Wm, Om) if cols is not None else f_new
        if not np.isfinite(f_full):
            raise OptDMDDivergence("optDMD objective became non-finite; try a smaller step")
        history.append(f_full)
        if cols is None and fb - f_new <= tol * scale:
            break
    H, W = prob.shape
    b = prob.amplitudes(Wm)
    modes = Wm.T.reshape(r, H, W)
    decomp = ModalDecomposition(modes, Om / video.dt, b, paired=False, time_origin=video.t0, time_unit=1.0)
    return OptDMDResult(decomp, history[-1], history)
