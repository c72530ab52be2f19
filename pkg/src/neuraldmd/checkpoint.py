"""Model and optimizer state round trip through the NDMD container."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import __version__
from .formats import FormatError, ndmd_dumps, ndmd_loads
from .model import ModalDecomposition, ModelConfig, NeuralModalModel
from .training import TrainState


def _model_meta(model) -> dict:
    from .baselines import NeuralRepModel

    if isinstance(model, NeuralModalModel):
        return {"model_kind": "neuraldmd", "model_config": model.config.to_dict()}
    if isinstance(model, NeuralRepModel):
        return {"model_kind": "neural_rep", "model_config": model.config.to_dict()}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def _build_model(meta: dict, dtype):
    from .baselines import NeuralRepConfig, NeuralRepModel

    kind = meta.get("model_kind")
    if kind == "neuraldmd":
        return NeuralModalModel.create(ModelConfig(**meta["model_config"]), dtype)
    if kind == "neural_rep":
        return NeuralRepModel.create(NeuralRepConfig(**meta["model_config"]), dtype)
    raise FormatError(f"unknown model kind {kind!r}")


def checkpoint_dumps(model, state: TrainState | None = None, meta: dict | None = None) -> bytes:
    arrays = {f"param.{k}": v for k, v in model.parameters().items()}
    info = dict(meta or {})
    info.update(_model_meta(model))
    info["dtype"] = np.dtype(model.dtype).name
    info["time_window"] = list(model.time_window) if model.time_window is not None else None
    info["tool_version"] = __version__
    if state is not None:
        arrays.update({f"adam_m.{k}": v for k, v in state.m.items()})
        arrays.update({f"adam_v.{k}": v for k, v in state.v.items()})
        info["state"] = {
            "lr": state.lr,
            "step": state.step,
            "epoch": state.epoch,
            "best_loss": state.best_loss,
            "since_improvement": state.since_improvement,
        }
    return ndmd_dumps(arrays, info)


def checkpoint_loads(data: bytes, path=None):
    """Returns ``(model, state or None, meta)``."""
    arrays, meta = ndmd_loads(data, path)
    if "model_kind" not in meta:
        raise FormatError("checkpoint has no model description", 0, path)
    model = _build_model(meta, np.dtype(meta["dtype"]))
    tw = meta.get("time_window")
    model.time_window = tuple(tw) if tw is not None else None
    params = model.parameters()
    for name, p in params.items():
        stored = arrays.get(f"param.{name}")
        if stored is None or stored.shape != p.shape:
            raise FormatError(f"checkpoint parameter {name!r} missing or misshapen", 0, path)
        p[...] = stored
    state = None
    if "state" in meta:
        s = meta["state"]
        state = TrainState(
            lr=s["lr"],
            m={k: arrays[f"adam_m.{k}"] for k in params},
            v={k: arrays[f"adam_v.{k}"] for k in params},
            step=s["step"],
            epoch=s["epoch"],
            best_loss=s["best_loss"],
            since_improvement=s["since_improvement"],
        )
    return model, state, meta


def checkpoint_write(path, model, state: TrainState | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_dumps(model, state, meta))


def checkpoint_read(path):
    return checkpoint_loads(Path(path).read_bytes(), path)


def decomposition_dumps(decomp: ModalDecomposition, meta: dict | None = None) -> bytes:
    info = dict(meta or {})
    info.update(
        model_kind="decomposition",
        paired=bool(decomp.paired),
        time_scale=float(decomp.time_scale),
        time_origin=float(decomp.time_origin),
        time_unit=float(decomp.time_unit),
        tool_version=__version__,
    )
    arrays = {"modes": decomp.modes, "omega": decomp.omega, "b": decomp.b, "flagged": np.asarray(decomp.flagged, dtype=bool)}
    return ndmd_dumps(arrays, info)


def decomposition_write(path, decomp: ModalDecomposition, meta: dict | None = None) -> None:
    Path(path).write_bytes(decomposition_dumps(decomp, meta))


def load_result(path):
    """A trained model or a stored decomposition, whichever the file holds."""
    data = Path(path).read_bytes()
    arrays, meta = ndmd_loads(data, path)
    if meta.get("model_kind") == "decomposition":
        decomp = ModalDecomposition(
            arrays["modes"], arrays["omega"], arrays["b"], paired=meta["paired"], time_scale=meta["time_scale"],
            time_origin=meta["time_origin"], time_unit=meta["time_unit"], flagged=arrays["flagged"],
        )
        return decomp, meta
    model, _, meta = checkpoint_loads(data, path)
    return model, meta
