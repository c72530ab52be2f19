"""Command-line experiment runner.

    neuraldmd generate CONFIG -o video.nvid
    neuraldmd observe  CONFIG VIDEO -o obs.jsonl
    neuraldmd fit      CONFIG INPUT -o OUTDIR
    neuraldmd evaluate CONFIG RESULT TRUTH -o OUTDIR

CONFIG is a TOML file with a top-level ``seed`` and the sections ``[data]``,
``[observe]``, ``[model]`` (with optional ``[model.neural_rep]``,
``[model.optdmd]``, ``[model.threedvar]`` tables), ``[train]`` and ``[eval]``.
``--set section.key=value`` overrides a value.  Exit status is 0 on success,
1 for usage or configuration errors and 2 for data or contract errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .baselines import AssimConfig, NeuralRepConfig, NeuralRepModel, group_by_time, mean_first_frame, threedvar_run
from .checkpoint import decomposition_write, load_result
from .classical_dmd import optdmd_fit
from .datagen import HotspotSpec, VideoGrid, gen_hotspot, gen_linear_modal, ingest_csv_grid
from .evaluation import (
    angular_velocity,
    cylinder_plot,
    error_curve,
    mode_stack,
    render_video,
    spectrum_report,
    write_cylinder_csv,
    write_spectrum_csv,
)
from .formats import FormatError, nvid_read, nvid_write, write_csv, write_nvid_stack, write_sidecar
from .model import ModalDecomposition, ModelConfig, NeuralModalModel, export_decomposition
from .observation import (
    PixelObservations,
    StationTable,
    observe_visibilities,
    read_observations,
    sample_pixels,
    thin_track,
    uv_track,
    write_observations,
)
from .training import TrainConfig, fit

log = logging.getLogger("neuraldmd")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config schema


@dataclass
class DataSection:
    kind: str = "linear_modal"  # linear_modal | hotspot | csv
    T: int = 64
    H: int = 64
    W: int = 64
    dt: float = 1.0
    t0: float = 0.0
    n_pairs: int = 3
    smooth_order: int = 3
    orbit_radius: float = 0.5
    angular_velocity: float = 4 * np.pi
    total_flux: float = 1.0
    gaussian_sigma: float = 0.2
    direction: str = "ccw"
    phase0: float = 0.0
    paths: list = field(default_factory=list)


@dataclass
class ObserveSection:
    kind: str = "pixel"  # pixel | vis
    n_frames: int = 0  # observe only the first n frames; 0 means all
    fraction: float = 0.1
    noise: float = 0.0  # pixel noise std as a fraction of the video's peak magnitude
    fixed_mask: bool = True
    stations: str = ""  # builtin name (ngeht, ngeht_plus) or CSV path
    station_subset: list = field(default_factory=list)
    dec_deg: float = -29.0
    hour_angle_start_h: float = -6.0
    hour_angle_step_h: float = 0.1
    wavelength_m: float = 1.3e-3
    fov_uas: float = 100.0
    elevation_cutoff_deg: float = 10.0
    frac_noise: float = 0.02
    max_per_frame: int = 0  # keep at most this many baselines per scan; 0 keeps all


@dataclass
class ModelSection:
    method: str = "neuraldmd"  # neuraldmd | neural_rep | optdmd | threedvar
    n_pairs: int = 12
    posenc_degree: int = 4
    modal_hidden: list = field(default_factory=lambda: [256, 256, 256, 256])
    head_hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    latent_dim: int = 16
    time_scale: float = 100.0
    head_kind: str = "mlp"
    init_cycles: float = 1.0
    init_decay: float = 0.1
    neural_rep: dict = field(default_factory=dict)
    optdmd: dict = field(default_factory=dict)
    threedvar: dict = field(default_factory=dict)


@dataclass
class OptDMDSection:
    rank: int = 7
    tv_weight: float = 0.0
    iters: int = 500


@dataclass
class TrainSection:
    lr0: float = 1e-3
    plateau_patience: int = 500
    lr_factor: float = 0.5
    epochs: int = 12000
    batch_size: int = 0
    precision: int = 64
    render_grid: list = field(default_factory=lambda: [64, 64])
    checkpoint_every: int = 1000
    chunks: int = 1
    workers: int = 1


@dataclass
class EvalSection:
    horizon: int = 0  # frames rendered past the truth video's end
    window_end: float | None = None
    cylinder_radius: float = 0.0  # 0 disables the cylinder plot
    n_angles: int = 360
    decay_cutoff: float = -0.05


SECTIONS = {
    "data": DataSection,
    "observe": ObserveSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
}
SUBTABLES = {"neural_rep": NeuralRepConfig, "optdmd": OptDMDSection, "threedvar": AssimConfig}


def _build(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise UsageError(f"[{where}]: {err}") from None


@dataclass
class ExperimentConfig:
    seed: int
    data: DataSection
    observe: ObserveSection
    model: ModelSection
    train: TrainSection
    eval: EvalSection
    raw: dict

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            n_pairs=m.n_pairs, posenc_degree=m.posenc_degree, modal_hidden=tuple(m.modal_hidden),
            head_hidden=tuple(m.head_hidden), activation=m.activation, latent_dim=m.latent_dim,
            time_scale=m.time_scale, head_kind=m.head_kind, init_cycles=m.init_cycles,
            init_decay=m.init_decay, seed=self.seed,
        )

    def train_config(self, loss_kind: str) -> TrainConfig:
        return TrainConfig(seed=self.seed, loss_kind=loss_kind, **{f.name: getattr(self.train, f.name) for f in fields(TrainSection)})

    def sub(self, name):
        values = dict(getattr(self.model, name))
        if name == "neural_rep":
            values.setdefault("seed", self.seed)
        return _build(SUBTABLES[name], values, f"model.{name}")


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form, leaving out the worker count (it never changes results)."""
    raw = {**raw, "train": {k: v for k, v in raw.get("train", {}).items() if k != "workers"}}
    if not raw["train"]:
        del raw["train"]
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"override {assignment!r} is not of the form section.key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"override {key!r} does not name a table entry")
    node[parts[-1]] = _parse_value(text.strip())


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        raw = tomli.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as err:
        raise UsageError(f"{path}: {err}") from None
    for ov in overrides:
        apply_override(raw, ov)
    unknown = sorted(set(raw) - set(SECTIONS) - {"seed"})
    if unknown:
        raise UsageError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "seed" not in raw:
        raise UsageError("config must set a top-level seed")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise UsageError("seed must be an integer")
    built = {name: _build(cls, dict(raw.get(name, {})), name) for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(seed=raw["seed"], raw=raw, **built)
    for name in SUBTABLES:
        cfg.sub(name)
    return cfg


# ---------------------------------------------------------------- commands


def _provenance(cfg: ExperimentConfig, path, **extra):
    write_sidecar(path, cfg.hash, cfg.seed, **extra)


def cmd_generate(cfg: ExperimentConfig, out: Path) -> None:
    d = cfg.data
    extra = {}
    if d.kind == "hotspot":
        spec = HotspotSpec(d.orbit_radius, d.angular_velocity, d.total_flux, d.gaussian_sigma, d.direction, d.phase0)
        video = gen_hotspot(spec, d.T, d.H, d.W, d.dt, d.t0)
    elif d.kind == "linear_modal":
        video, truth = gen_linear_modal(d.n_pairs, d.T, d.H, d.W, d.dt, cfg.seed, t0=d.t0, order=d.smooth_order)
        extra["truth"] = str(out) + ".truth.ndmd"
        decomposition_write(
            extra["truth"],
            ModalDecomposition(
                np.concatenate([truth.w0[None].astype(complex), truth.wc]),
                np.concatenate([[0], truth.omega]),
                truth.b,
                paired=True,
                time_origin=truth.t0,
            ),
            {"config_hash": cfg.hash, "seed": cfg.seed},
        )
    elif d.kind == "csv":
        video = ingest_csv_grid(d.paths, d.dt, d.t0)
    else:
        raise ValueError(f"unknown data kind {d.kind!r}")
    nvid_write(out, video)
    _provenance(cfg, out, command="generate", **extra)
    log.info("wrote %s (%d frames of %dx%d)", out, *video.frames.shape)


def build_track(cfg: ExperimentConfig, times: np.ndarray):
    o = cfg.observe
    if not o.stations:
        raise ValueError("visibility mode needs [observe].stations (builtin name or CSV path)")
    if Path(o.stations).suffix == ".csv":
        table = StationTable.from_csv(o.stations)
    else:
        table = StationTable.builtin(o.stations)
    if o.station_subset:
        table = table.subset(o.station_subset)
    h = np.pi / 12
    start = o.hour_angle_start_h * h
    step = o.hour_angle_step_h * h
    track = uv_track(
        table,
        np.deg2rad(o.dec_deg),
        (start, start + step * (len(times) - 1), step),
        o.wavelength_m,
        np.deg2rad(o.fov_uas * 1e-6 / 3600),
        np.deg2rad(o.elevation_cutoff_deg),
        times=times,
    )
    if o.max_per_frame:
        track = thin_track(track, o.max_per_frame, cfg.seed)
    return track, table


def cmd_observe(cfg: ExperimentConfig, video_path: Path, out: Path) -> None:
    o = cfg.observe
    video = nvid_read(video_path)
    if o.n_frames:
        video = video.head(o.n_frames)
    if o.kind == "pixel":
        sigma = o.noise * float(np.max(np.abs(video.frames)))
        obs = sample_pixels(video, o.fraction, cfg.seed, noise_sigma=sigma, fixed_mask=o.fixed_mask)
    elif o.kind == "vis":
        track, table = build_track(cfg, video.timestamps)
        obs = observe_visibilities(video, track, o.frac_noise, cfg.seed)
        track_path = Path(str(out) + ".uvtrack.csv")
        write_csv(
            track_path,
            ["t", "station_a", "station_b", "u", "v"],
            zip(track.t, [table.names[i] for i in track.station_a], [table.names[i] for i in track.station_b], track.u, track.v),
        )
        _provenance(cfg, track_path, command="observe")
    else:
        raise ValueError(f"unknown observation kind {o.kind!r}")
    write_observations(out, obs)
    _provenance(cfg, out, command="observe", source=str(video_path))
    log.info("wrote %d %s observations to %s", len(obs), o.kind, out)


def cmd_fit(cfg: ExperimentConfig, input_path: Path, out_dir: Path) -> None:
    method = cfg.model.method
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": cfg.hash, "seed": cfg.seed}
    if method == "optdmd":
        if input_path.suffix != ".nvid":
            raise ValueError("optdmd needs a dense NVID video, not sparse observations")
        o = cfg.sub("optdmd")
        video = nvid_read(input_path)
        if cfg.observe.n_frames:
            video = video.head(cfg.observe.n_frames)
        res = optdmd_fit(video, o.rank, o.tv_weight, o.iters, cfg.seed)
        path = out_dir / "model.ndmd"
        decomposition_write(path, res.decomposition, meta)
        write_csv(out_dir / "loss_history.csv", ["iteration", "objective"], enumerate(res.history))
        _provenance(cfg, out_dir / "loss_history.csv", command="fit")
        _provenance(cfg, path, command="fit", method=method)
        return
    if input_path.suffix == ".nvid":
        raise ValueError(f"{method} fits observations (JSON lines), not a dense video")
    obs = read_observations(input_path)
    if method == "threedvar":
        if not isinstance(obs, PixelObservations):
            raise ValueError("threedvar assimilates pixel observations only")
        a = cfg.sub("threedvar")
        stream = group_by_time(obs)
        frames = threedvar_run(stream, mean_first_frame(obs, a.grid), a)
        times = np.array([t for t, _ in stream])
        dt = float(np.min(np.diff(times))) if len(times) > 1 else 1.0
        if len(times) > 1 and not np.allclose(np.diff(times), dt):
            raise ValueError("threedvar output needs evenly spaced observation times")
        path = out_dir / "analysis.nvid"
        nvid_write(path, VideoGrid(frames, times[0], dt))
        _provenance(cfg, path, command="fit", method=method)
        return
    loss_kind = "pixel" if isinstance(obs, PixelObservations) else "visibility"
    tcfg = cfg.train_config(loss_kind)
    if method == "neuraldmd":
        model = NeuralModalModel.create(cfg.model_config(), tcfg.dtype)
    elif method == "neural_rep":
        model = NeuralRepModel.create(cfg.sub("neural_rep"), tcfg.dtype)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = fit(model, obs, tcfg, out_dir, meta=meta)
    for p in res.checkpoints + [out_dir / "checkpoint_best.ndmd", out_dir / "loss_history.csv"]:
        if p.exists():
            _provenance(cfg, p, command="fit", method=method)
    log.info("final loss %.6g", res.final_loss)


def cmd_evaluate(cfg: ExperimentConfig, result_path: Path, truth_path: Path, out_dir: Path) -> None:
    e = cfg.eval
    truth = nvid_read(truth_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    T, H, W = truth.frames.shape
    spectrum = decomp = None
    if result_path.suffix == ".nvid":
        recon_full = nvid_read(result_path)
        if not np.isclose(recon_full.t0, truth.t0) or not np.isclose(recon_full.dt, truth.dt):
            raise ValueError("reconstruction and truth timestamps do not match")
        if recon_full.frames.shape[1:] != (H, W):
            raise ValueError("reconstruction and truth grids differ")
        n = min(T, recon_full.frames.shape[0])
        recon, truth = recon_full.head(n), truth.head(n)
        window_end = e.window_end if e.window_end is not None else recon.timestamps[-1]
        extra_frames = None
    else:
        model, meta = load_result(result_path)
        times = truth.t0 + truth.dt * np.arange(T + e.horizon)
        rendered = render_video(model, (H, W), times)
        recon = VideoGrid(rendered.frames[:T], truth.t0, truth.dt)
        extra_frames = VideoGrid(rendered.frames[T:], times[T], truth.dt) if e.horizon else None
        if isinstance(model, ModalDecomposition):
            decomp = model
            n_fit = cfg.observe.n_frames or T
            window_end = e.window_end if e.window_end is not None else truth.t0 + truth.dt * (n_fit - 1)
        else:
            tw = model.time_window or (truth.t0, truth.timestamps[-1])
            window_end = e.window_end if e.window_end is not None else tw[1]
            decomp = export_decomposition(model, (H, W), e.decay_cutoff) if isinstance(model, NeuralModalModel) else None
        if decomp is not None:
            spectrum = spectrum_report(decomp, e.decay_cutoff)
    curve = error_curve(recon, truth, window_end)
    outputs = [out_dir / "error_curve.csv"]
    curve.write_csv(outputs[0])
    summary = [
        ("max_in_window_err", float(np.max(curve.total_err[~curve.extrapolating], initial=0.0))),
        ("max_extrapolated_err", float(np.max(curve.total_err[curve.extrapolating], initial=0.0))),
        ("mean_err", float(np.mean(curve.total_err))),
    ]
    if extra_frames is not None:
        outputs.append(out_dir / "extrapolation.nvid")
        nvid_write(outputs[-1], extra_frames)
    if spectrum is not None:
        outputs.append(out_dir / "spectrum.csv")
        write_spectrum_csv(outputs[-1], spectrum)
        outputs.append(out_dir / "modes.nvid")
        write_nvid_stack(outputs[-1], mode_stack(decomp))
    if e.cylinder_radius > 0:
        for name, vid in (("cylinder_recon.csv", recon), ("cylinder_truth.csv", truth)):
            cyl = cylinder_plot(vid, e.cylinder_radius, e.n_angles)
            outputs.append(out_dir / name)
            write_cylinder_csv(outputs[-1], cyl, vid.timestamps)
            summary.append((name.replace(".csv", "_slope"), angular_velocity(cyl, vid.timestamps)))
    outputs.append(out_dir / "summary.csv")
    write_csv(outputs[-1], ["metric", "value"], summary)
    for p in outputs:
        _provenance(cfg, p, command="evaluate", result=str(result_path), truth=str(truth_path))
    log.info("in-window max error %.4g, extrapolated max error %.4g", summary[0][1], summary[1][1])


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuraldmd", description="Neural modal reconstruction experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("config", type=Path)
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")

    g = sub.add_parser("generate", help="write a ground-truth video")
    common(g)
    g.add_argument("-o", "--out", type=Path, required=True)
    o = sub.add_parser("observe", help="sample pixels or visibilities from a video")
    common(o)
    o.add_argument("video", type=Path)
    o.add_argument("-o", "--out", type=Path, required=True)
    f = sub.add_parser("fit", help="fit a model or baseline")
    common(f)
    f.add_argument("input", type=Path, help="observations (.jsonl) or, for optdmd, a video (.nvid)")
    f.add_argument("-o", "--out", type=Path, required=True, help="output directory")
    f.add_argument("--workers", type=int, default=None, help="loss-evaluation threads (speed only)")
    e = sub.add_parser("evaluate", help="compare a reconstruction with the truth video")
    common(e)
    e.add_argument("result", type=Path, help="checkpoint/decomposition (.ndmd) or video (.nvid)")
    e.add_argument("truth", type=Path)
    e.add_argument("-o", "--out", type=Path, required=True, help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        overrides = list(args.set)
        if getattr(args, "workers", None) is not None:
            overrides.append(f"train.workers={args.workers}")
        cfg = load_config(args.config, overrides)
        if args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "observe":
            cmd_observe(cfg, args.video, args.out)
        elif args.command == "fit":
            cmd_fit(cfg, args.input, args.out)
        else:
            cmd_evaluate(cfg, args.result, args.truth, args.out)
    except UsageError as err:
        log.error("%s", err)
        return 1
    except (ValueError, FormatError, FileNotFoundError, FloatingPointError, KeyError) as err:
        log.error("%s", err)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
