"""Neural modal model: coordinate-network modes, constrained spectrum, initial state.

The field is

    I(x, y, t) = w_0(x, y) b_0 + 2 Re sum_{k=1..K} w_k(x, y) exp(Omega_k c t) b_k

with ``Omega_0 = 0`` hard-coded, ``alpha_k = -2 sigmoid(a_k)`` and
``omega_k = 160 sigmoid(w_k)``.  Time ``t`` is in the model's normalized unit,
where the training window maps to [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit

from .field_net import NetworkParams, PosEncConfig, backward, forward, init_params, posenc

DECAY_MAX = 2.0
FREQ_MAX = 160.0


@dataclass
class ModelConfig:
    n_pairs: int = 12
    posenc_degree: int = 4
    modal_hidden: tuple[int, ...] = (256, 256, 256, 256)
    head_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    latent_dim: int = 16
    time_scale: float = 100.0
    head_kind: str = "mlp"  # "mlp" or "free"
    # initial spectrum: omega_k c = 2 pi k init_cycles, alpha_k c = -init_decay
    init_cycles: float = 1.0
    init_decay: float = 0.1
    # field coordinates are multiplied by this before encoding; 0.5 keeps the
    # base octave from wrapping the left edge onto the right one
    coord_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.modal_hidden = tuple(int(h) for h in self.modal_hidden)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        if self.n_pairs < 0:
            raise ValueError("n_pairs must be >= 0")
        if self.head_kind not in ("mlp", "free"):
            raise ValueError(f"head_kind must be 'mlp' or 'free', got {self.head_kind!r}")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")
        if not 0 < self.coord_scale <= 1:
            raise ValueError("coord_scale must lie in (0, 1]")

    @property
    def rank(self) -> int:
        return 1 + 2 * self.n_pairs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modal_hidden"] = list(self.modal_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d


@dataclass
class LatentHead:
    """Produces a raw output vector either as ``net(z)`` or as a free vector."""

    out_dim: int
    net: NetworkParams | None = None
    latent: np.ndarray | None = None
    raw: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return "free" if self.net is None else "mlp"

    def value(self):
        if self.net is None:
            return self.raw, None
        return forward(self.net, self.latent)

    def backward(self, tape, d_raw) -> dict[str, np.ndarray]:
        if self.net is None:
            return {"raw": np.asarray(d_raw, dtype=self.raw.dtype)}
        grads, dz = backward(tape, d_raw)
        out = grads.arrays()
        out["z"] = dz
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        if self.net is None:
            return {"raw": self.raw}
        out = self.net.arrays()
        out["z"] = self.latent
        return out


@dataclass
class SpectrumParams:
    n_pairs: int
    head: LatentHead
    time_scale: float = 100.0


@dataclass
class InitialStateParams:
    head: LatentHead


def _spectrum_from_raw(raw, K):
    a, w = raw[:K], raw[K:]
    sa, sw = expit(a), expit(w)
    omega = np.zeros(K + 1, dtype=np.result_type(raw.dtype, np.complex64))
    omega[1:] = -DECAY_MAX * sa + 1j * (FREQ_MAX * sw)
    return omega, sa, sw


def decode_spectrum(sp: SpectrumParams) -> np.ndarray:
    """Complex rates ``Omega[0..K]`` (unscaled by the time constant)."""
    raw, _ = sp.head.value()
    return _spectrum_from_raw(raw, sp.n_pairs)[0]


def _b_from_raw(raw, K):
    if raw.shape[-1] != 1 + 2 * K:
        raise ValueError(f"initial-state output has {raw.shape[-1]} entries, expected {1 + 2 * K}")
    b = np.empty(K + 1, dtype=np.result_type(raw.dtype, np.complex64))
    b[0] = raw[0]
    b[1:] = raw[1::2] + 1j * raw[2::2]
    return b


def decode_initial_state(ip: InitialStateParams, K: int) -> np.ndarray:
    raw, _ = ip.head.value()
    return _b_from_raw(raw, K)


def unpack_modes(raw: np.ndarray):
    """Split network output ``(n, 1+2K)`` into real ``w0 (n,)`` and complex ``wc (n, K)``."""
    return raw[:, 0], raw[:, 1::2] + 1j * raw[:, 2::2]


def modal_field(w0, wc, b, rates, times) -> np.ndarray:
    """Real field ``(P, n_t)`` from paired modes.

    ``rates`` are the K scaled complex rates of the conjugate-pair modes and
    ``b[0]`` multiplies the static mode.  Shared by the neural model, exported
    decompositions and the synthetic generator.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.real(wc).dtype if np.size(wc) else w0.dtype))
    out = np.multiply.outer(w0 * np.real(b[0]), np.ones_like(times))
    if len(rates):
        E = np.exp(np.multiply.outer(times, rates))
        out = out + 2.0 * (wc @ (b[1:, None] * E.T)).real
    return out


def pixel_centers(H: int, W: int):
    """Row (y) and column (x) pixel-center coordinates on [-1, 1]."""
    ys = -1.0 + (np.arange(H) + 0.5) * 2.0 / H
    xs = -1.0 + (np.arange(W) + 0.5) * 2.0 / W
    return ys, xs


def grid_coords(H: int, W: int) -> np.ndarray:
    ys, xs = pixel_centers(H, W)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class ModalDecomposition:
    """Grid-sampled modes plus spectrum.

    ``paired`` decompositions store ``w_0`` real and K conjugate-pair modes
    (rank 1 + 2K); unpaired ones (optDMD, exact DMD) store r free complex modes
    and reconstruct as the real part of the plain sum.
    """

    modes: np.ndarray  # (n_modes, H, W) complex
    omega: np.ndarray  # (n_modes,) complex
    b: np.ndarray  # (n_modes,) complex
    paired: bool = True
    time_scale: float = 1.0
    time_origin: float = 0.0
    time_unit: float = 1.0
    flagged: np.ndarray | None = None

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = np.zeros(len(self.omega), dtype=bool)

    @property
    def rank(self) -> int:
        n = len(self.omega)
        return 1 + 2 * (n - 1) if self.paired else n

    @property
    def shape(self):
        return self.modes.shape[1:]

    def render(self, t, use_flagged: bool = True) -> np.ndarray:
        """Frames at physical times ``t``; returns ``(n_t, H, W)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tn = (t - self.time_origin) / self.time_unit
        keep = np.ones(len(self.omega), dtype=bool) if use_flagged else ~self.flagged
        H, W = self.shape
        flat = self.modes.reshape(len(self.omega), -1)
        rates = self.omega * self.time_scale
        if self.paired:
            b = np.where(keep, self.b, 0)
            out = modal_field(flat[0].real, flat[1:].T, b, rates[1:], tn)
        else:
            E = np.exp(np.multiply.outer(tn, rates))
            out = (flat.T @ (np.where(keep, self.b, 0)[:, None] * E.T)).real
        return out.T.reshape(len(tn), H, W)


def _make_head(out_dim, cfg: ModelConfig, seed, dtype, bias_target=None):
    if out_dim == 0:
        return LatentHead(0, raw=np.zeros(0, dtype=dtype))
    if cfg.head_kind == "free":
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal(out_dim).astype(dtype) * 0.1 if bias_target is None else bias_target.astype(dtype)
        return LatentHead(out_dim, raw=raw)
    sizes = [cfg.latent_dim, *cfg.head_hidden, out_dim]
    net = init_params(sizes, cfg.activation, seed, dtype=dtype)
    z = np.random.default_rng([seed, 1]).standard_normal(cfg.latent_dim).astype(dtype)
    head = LatentHead(out_dim, net=net, latent=z)
    if bias_target is not None:
        raw0, _ = forward(net, z)
        net.layers[-1].b += (bias_target - raw0).astype(dtype)
    return head


def initial_spectrum_raw(cfg: ModelConfig) -> np.ndarray:
    """Raw head outputs that decode to the initial frequency grid."""
    K = cfg.n_pairs
    c = cfg.time_scale
    k = np.arange(1, K + 1)
    alpha = np.full(K, cfg.init_decay / (DECAY_MAX * c))
    freq = 2 * np.pi * k * cfg.init_cycles / (FREQ_MAX * c)
    if np.any(freq >= 1) or np.any(alpha >= 1) or np.any(alpha <= 0) or np.any(freq <= 0):
        raise ValueError("initial spectrum lies outside the constraint box; adjust init_cycles/init_decay/time_scale")
    return np.concatenate([logit(alpha), logit(freq)])


@dataclass
class NeuralModalModel:
    modal_net: NetworkParams
    posenc: PosEncConfig
    spectrum: SpectrumParams
    initial_state: InitialStateParams
    config: ModelConfig = field(default_factory=ModelConfig)
    time_window: tuple[float, float] | None = None

    @classmethod
    def create(cls, cfg: ModelConfig | None = None, dtype=np.float64) -> "NeuralModalModel":
        cfg = cfg or ModelConfig()
        K = cfg.n_pairs
        pe = PosEncConfig(cfg.posenc_degree, 2)
        modal = init_params([pe.encoded_dim, *cfg.modal_hidden, cfg.rank], cfg.activation, cfg.seed, dtype)
        spec_head = _make_head(2 * K, cfg, cfg.seed + 1, dtype, initial_spectrum_raw(cfg) if K else None)
        b_head = _make_head(cfg.rank, cfg, cfg.seed + 2, dtype)
        return cls(
            modal,
            pe,
            SpectrumParams(K, spec_head, cfg.time_scale),
            InitialStateParams(b_head),
            cfg,
        )

    @property
    def n_pairs(self) -> int:
        return self.spectrum.n_pairs

    @property
    def rank(self) -> int:
        return 1 + 2 * self.n_pairs

    @property
    def dtype(self):
        return self.modal_net.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"modal.{k}": v for k, v in self.modal_net.arrays().items()}
        out.update({f"spectrum.{k}": v for k, v in self.spectrum.head.arrays().items()})
        out.update({f"initial.{k}": v for k, v in self.initial_state.head.arrays().items()})
        return out

    def astype(self, dtype) -> "NeuralModalModel":
        def cast_head(h: LatentHead):
            if h.net is None:
                return LatentHead(h.out_dim, raw=h.raw.astype(dtype))
            return LatentHead(h.out_dim, net=h.net.astype(dtype), latent=h.latent.astype(dtype))

        return NeuralModalModel(
            self.modal_net.astype(dtype),
            self.posenc,
            SpectrumParams(self.n_pairs, cast_head(self.spectrum.head), self.spectrum.time_scale),
            InitialStateParams(cast_head(self.initial_state.head)),
            self.config,
            self.time_window,
        )

    def copy(self) -> "NeuralModalModel":
        return self.astype(self.dtype)

    # time handling -----------------------------------------------------
    def to_model_time(self, t):
        if self.time_window is None:
            return np.asarray(t, dtype=float)
        t0, t1 = self.time_window
        return (np.asarray(t, dtype=float) - t0) / (t1 - t0)

    def from_model_time(self, tn):
        if self.time_window is None:
            return np.asarray(tn, dtype=float)
        t0, t1 = self.time_window
        return t0 + np.asarray(tn, dtype=float) * (t1 - t0)

    # evaluation --------------------------------------------------------
    def omega(self) -> np.ndarray:
        return decode_spectrum(self.spectrum)

    def b(self) -> np.ndarray:
        return decode_initial_state(self.initial_state, self.n_pairs)

    def modes(self, coords):
        return eval_modes(self, coords)

    def field(self, coords, t):
        return eval_field(self, coords, t)

    def render(self, H: int, W: int, t) -> np.ndarray:
        return render_frame(self, (H, W), t)

    # gradients ---------------------------------------------------------
    def field_with_cache(self, coords, times, p_idx=None, t_idx=None):
        """Evaluate the field for training.

        Without index arrays returns the dense ``(P, n_t)`` block; with them
        returns one value per ``(coords[p_idx[i]], times[t_idx[i]])`` pair.
        """
        coords = np.asarray(coords, dtype=self.dtype)
        times = np.asarray(times, dtype=self.dtype)
        enc = posenc(coords * self.config.coord_scale, self.posenc)
        raw, modal_tape = forward(self.modal_net, enc)
        w0, wc = unpack_modes(raw)
        K = self.n_pairs
        raw_s, spec_tape = self.spectrum.head.value()
        omega, sa, sw = _spectrum_from_raw(raw_s, K)
        raw_b, b_tape = self.initial_state.head.value()
        b = _b_from_raw(raw_b, K)
        c = self.spectrum.time_scale
        E = np.exp(np.multiply.outer(times, omega[1:] * c))
        if p_idx is None:
            values = modal_field(w0, wc, b, omega[1:] * c, times)
        else:
            values = w0[p_idx] * b[0].real
            if K:
                values = values + 2.0 * np.einsum("ik,ik->i", wc[p_idx], b[1:] * E[t_idx]).real
        cache = dict(
            modal_tape=modal_tape, spec_tape=spec_tape, b_tape=b_tape, w0=w0, wc=wc, b=b,
            sa=sa, sw=sw, E=E, times=times, p_idx=p_idx, t_idx=t_idx, n_points=len(coords),
        )
        return values, cache

    def backward(self, cache, g) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(g * values)`` for a cached evaluation."""
        w0, wc, b, E, times = cache["w0"], cache["wc"], cache["b"], cache["E"], cache["times"]
        K = self.n_pairs
        c = self.spectrum.time_scale
        P = cache["n_points"]
        g = np.asarray(g, dtype=self.dtype)
        if cache["p_idx"] is None:
            gsum = g.sum(axis=1)
            d_w0 = gsum * b[0].real
            d_b0 = np.dot(w0, gsum)
            if K:
                bE = b[1:, None] * E.T
                G_wc = 2.0 * (g @ np.conj(bE).T)
                A = g @ np.conj(E)
                G_b = 2.0 * np.einsum("pk,pk->k", np.conj(wc), A)
                At = g @ (times[:, None] * np.conj(E))
                G_om = 2.0 * c * np.conj(b[1:]) * np.einsum("pk,pk->k", np.conj(wc), At)
        else:
            p_idx, t_idx = cache["p_idx"], cache["t_idx"]
            d_w0 = np.bincount(p_idx, weights=g, minlength=P) * b[0].real
            d_b0 = np.dot(g, w0[p_idx])
            if K:
                Ei = E[t_idx]
                wci = wc[p_idx]
                S = 2.0 * g[:, None] * np.conj(b[1:] * Ei)
                G_wc = np.empty((P, K), dtype=S.dtype)
                for k in range(K):
                    G_wc[:, k] = np.bincount(p_idx, weights=S[:, k].real, minlength=P) + 1j * np.bincount(
                        p_idx, weights=S[:, k].imag, minlength=P
                    )
                Q = np.conj(wci * Ei)
                G_b = 2.0 * (g @ Q)
                G_om = 2.0 * c * np.conj(b[1:]) * ((g * times[t_idx]) @ Q)
        dy = np.empty((P, 1 + 2 * K), dtype=self.dtype)
        dy[:, 0] = d_w0
        d_rawb = np.empty(1 + 2 * K, dtype=self.dtype)
        d_rawb[0] = d_b0
        d_raws = np.empty(2 * K, dtype=self.dtype)
        if K:
            dy[:, 1::2] = G_wc.real
            dy[:, 2::2] = G_wc.imag
            d_rawb[1::2] = G_b.real
            d_rawb[2::2] = G_b.imag
            sa, sw = cache["sa"], cache["sw"]
            d_raws[:K] = G_om.real * (-DECAY_MAX * sa * (1 - sa))
            d_raws[K:] = G_om.imag * (FREQ_MAX * sw * (1 - sw))
        mg, _ = backward(cache["modal_tape"], dy)
        grads = {f"modal.{k}": v for k, v in mg.arrays().items()}
        if K:
            grads.update({f"spectrum.{k}": v for k, v in self.spectrum.head.backward(cache["spec_tape"], d_raws).items()})
        else:
            grads["spectrum.raw"] = np.zeros(0, dtype=self.dtype)
        grads.update({f"initial.{k}": v for k, v in self.initial_state.head.backward(cache["b_tape"], d_rawb).items()})
        return grads


def eval_modes(model: NeuralModalModel, coords):
    coords = np.asarray(coords, dtype=model.dtype)
    if coords.ndim == 1:
        coords = coords[None, :]
    raw, _ = forward(model.modal_net, posenc(coords * model.config.coord_scale, model.posenc))
    return unpack_modes(raw)


def eval_field(model: NeuralModalModel, coords, t) -> np.ndarray:
    """Real intensities at ``coords`` for model time(s) ``t``.

    Scalar ``t`` returns shape ``(n,)``; an array of times returns ``(n, n_t)``.
    No clamping is applied outside the training window.
    """
    w0, wc = eval_modes(model, coords)
    rates = model.omega()[1:] * model.spectrum.time_scale
    out = modal_field(w0, wc, model.b(), rates, t)
    return out[:, 0] if np.ndim(t) == 0 else out


def render_frame(model: NeuralModalModel, grid, t) -> np.ndarray:
    """Row-major image(s) over pixel centers of an ``(H, W)`` grid on [-1, 1]^2."""
    H, W = grid
    if H < 1 or W < 1:
        raise ValueError("grid must be at least 1x1")
    vals = eval_field(model, grid_coords(H, W), np.atleast_1d(t))
    frames = vals.T.reshape(-1, H, W)
    return frames[0] if np.ndim(t) == 0 else frames


def export_decomposition(model: NeuralModalModel, grid, decay_cutoff: float = -0.05) -> ModalDecomposition:
    H, W = grid
    w0, wc = eval_modes(model, grid_coords(H, W))
    K = model.n_pairs
    modes = np.empty((K + 1, H, W), dtype=np.complex128)
    modes[0] = w0.reshape(H, W)
    for k in range(K):
        modes[k + 1] = wc[:, k].reshape(H, W)
    omega = model.omega().astype(np.complex128)
    tw = model.time_window or (0.0, 1.0)
    return ModalDecomposition(
        modes,
        omega,
        model.b().astype(np.complex128),
        paired=True,
        time_scale=model.spectrum.time_scale,
        time_origin=tw[0],
        time_unit=tw[1] - tw[0],
        flagged=omega.real < decay_cutoff,
    )
