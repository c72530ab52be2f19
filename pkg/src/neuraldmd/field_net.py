"""Small dense networks with hand-written reverse-mode gradients.

Only the fixed feed-forward topology is supported: a stack of affine layers,
each followed by an elementwise activation.  Inputs may be a single vector
or a batch of row vectors; gradients of batched calls are summed over rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "sine", "identity")


@dataclass(frozen=True)
class PosEncConfig:
    degree: int = 4
    input_dim: int = 2

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError(f"positional encoding degree must be >= 1, got {self.degree}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")

    @property
    def encoded_dim(self) -> int:
        return 2 * self.degree * self.input_dim


def posenc(p, cfg: PosEncConfig) -> np.ndarray:
    """Sinusoidal encoding of coordinates.

    For each input dimension d and octave k the pair
    ``(sin(2^k pi p_d), cos(2^k pi p_d))`` is emitted, dimension-major.
    Accepts shape ``(input_dim,)`` or ``(n, input_dim)``.  Coordinates are
    expected in [-1, 1] but values outside are encoded all the same, which is
    what extrapolation in time relies on.
    """
    p = np.asarray(p)
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    if p.shape[-1] != cfg.input_dim:
        raise ValueError(f"expected last axis of length {cfg.input_dim}, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("posenc received non-finite coordinates")
    freqs = (2.0 ** np.arange(cfg.degree) * np.pi).astype(p.dtype)
    ang = p[..., :, None] * freqs
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(*p.shape[:-1], cfg.encoded_dim)


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "tanh"

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass
class NetworkParams:
    layers: list[Layer]

    def __post_init__(self):
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {layer.activation!r}")
            if layer.W.ndim != 2 or layer.b.shape != (layer.W.shape[0],):
                raise ValueError(f"layer {k}: weight {layer.W.shape} and bias {layer.b.shape} disagree")
            if k and layer.W.shape[1] != self.layers[k - 1].W.shape[0]:
                raise ValueError(
                    f"layer {k} expects {layer.W.shape[1]} inputs but layer {k - 1} "
                    f"produces {self.layers[k - 1].W.shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def dtype(self):
        return self.layers[0].W.dtype

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Named views of every weight and bias (no copies)."""
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}W{k}"] = layer.W
            out[f"{prefix}b{k}"] = layer.b
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams([Layer(l.W.astype(dtype), l.b.astype(dtype), l.activation) for l in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(l.W)) and np.all(np.isfinite(l.b)) for l in self.layers)


@dataclass
class GradientTape:
    params: NetworkParams
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sine":
        return np.sin(z)
    return z


def _activate_grad(z, h, kind):
    if kind == "tanh":
        return 1 - h * h
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "sine":
        return np.cos(z)
    return None


def forward(params: NetworkParams, x) -> tuple[np.ndarray, GradientTape]:
    x = np.asarray(x, dtype=params.dtype)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ValueError(f"network expects inputs of length {params.in_dim}, got shape {x.shape}")
    tape = GradientTape(params, squeeze=squeeze)
    for layer in params.layers:
        tape.inputs.append(h)
        z = h @ layer.W.T + layer.b
        h = _activate(z, layer.activation)
        tape.preacts.append(z)
        tape.outputs.append(h)
    return (h[0] if squeeze else h), tape


def backward(tape: GradientTape, dy) -> tuple[NetworkParams, np.ndarray]:
    """Gradients of ``<dy, y>`` w.r.t. every weight, bias and the input."""
    params = tape.params
    if len(tape.inputs) != len(params.layers):
        raise ValueError("tape does not belong to these parameters")
    dh = np.asarray(dy, dtype=params.dtype)
    if tape.squeeze:
        dh = dh[None, :]
    if dh.shape != tape.outputs[-1].shape:
        raise ValueError(f"dy has shape {np.shape(dy)}, network output is {tape.outputs[-1].shape}")
    grads = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        if layer.W.shape[1] != tape.inputs[k].shape[1]:
            raise ValueError("tape does not belong to these parameters")
        d = _activate_grad(tape.preacts[k], tape.outputs[k], layer.activation)
        dz = dh if d is None else dh * d
        grads[k] = Layer(dz.T @ tape.inputs[k], dz.sum(axis=0), layer.activation)
        dh = dz @ layer.W
    return NetworkParams(grads), (dh[0] if tape.squeeze else dh)


def init_params(sizes, activations, seed: int, dtype=np.float64) -> NetworkParams:
    """Glorot-uniform weights, zero biases.

    ``sizes`` lists the widths from input to output; ``activations`` is either
    one name per layer or a single name used for all hidden layers with an
    identity output layer.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"invalid layer sizes {sizes}")
    n_layers = len(sizes) - 1
    if isinstance(activations, str):
        activations = [activations] * (n_layers - 1) + ["identity"]
    if len(activations) != n_layers:
        raise ValueError(f"{n_layers} layers but {len(activations)} activations")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-a, a, size=(fan_out, fan_in)).astype(dtype)
        layers.append(Layer(W, np.zeros(fan_out, dtype=dtype), act))
    return NetworkParams(layers)
