import json
import math

import numpy as np
import pytest

from neuraldmd.checkpoint import load_result
from neuraldmd.cli import config_hash, load_config, main
from neuraldmd.formats import nvid_read, read_csv
from neuraldmd.observation import read_observations

R_EARTH = 6.371e6

SMALL = """
seed = 3

[data]
kind = "linear_modal"
T = 10
H = 16
W = 16
n_pairs = 1

[observe]
kind = "pixel"
n_frames = 8
fraction = 0.2
noise = 0.01

[model]
method = "neuraldmd"
n_pairs = 1
modal_hidden = [8, 8]
head_hidden = [4]
latent_dim = 3

[train]
epochs = 6
plateau_patience = 3
checkpoint_every = 3

[eval]
horizon = 2
"""

SHRINK = ["data.T=10", "data.H=16", "data.W=16", "observe.n_frames=8", "train.epochs=4",
          "train.render_grid=[16,16]", "model.threedvar.grid=[16,16]", "model.optdmd.iters=20"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_generate_is_deterministic_with_truth_sidecar(tmp_path, cfg):
    assert run("generate", cfg, "-o", tmp_path / "a.nvid") == 0
    assert run("generate", cfg, "-o", tmp_path / "b.nvid") == 0
    assert (tmp_path / "a.nvid").read_bytes() == (tmp_path / "b.nvid").read_bytes()
    meta = json.loads((tmp_path / "a.nvid.meta.json").read_text())
    assert meta["seed"] == 3 and meta["config_hash"] == load_config(cfg).hash
    truth, _ = load_result(meta["truth"])
    video = nvid_read(tmp_path / "a.nvid")
    np.testing.assert_allclose(truth.render(video.timestamps), video.frames, rtol=1e-6, atol=1e-6)


def test_hotspot_generation(tmp_path, cfg):
    assert run("generate", cfg, "--set", 'data.kind="hotspot"', "-o", tmp_path / "h.nvid") == 0
    assert nvid_read(tmp_path / "h.nvid").frames.shape == (10, 16, 16)


def test_pixel_count_per_frame(tmp_path, cfg):
    run("generate", cfg, "--set", "data.H=32", "--set", "data.W=32", "-o", tmp_path / "v.nvid")
    assert run("observe", cfg, "--set", "observe.fraction=0.01", tmp_path / "v.nvid", "-o", tmp_path / "o.jsonl") == 0
    obs = read_observations(tmp_path / "o.jsonl")
    _, counts = np.unique(obs.t, return_counts=True)
    assert len(counts) == 8
    np.testing.assert_array_equal(counts, math.floor(0.01 * 32 * 32))


def test_observe_rerun_is_identical(tmp_path, cfg):
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    run("observe", cfg, tmp_path / "v.nvid", "-o", tmp_path / "a.jsonl")
    run("observe", cfg, tmp_path / "v.nvid", "-o", tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_two_station_vis_mode(tmp_path, cfg):
    st = tmp_path / "two.csv"
    st.write_text(f"name,x_m,y_m,z_m\nA,{R_EARTH},0,0\nB,{0.9 * R_EARTH},{0.3 * R_EARTH},{0.2 * R_EARTH}\n")
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    sets = [
        'observe.kind="vis"', f'observe.stations="{st}"', f"observe.dec_deg={math.degrees(0.1)}",
        f"observe.hour_angle_start_h={-0.3 * 12 / math.pi}", f"observe.hour_angle_step_h={0.05 * 12 / math.pi}",
    ]
    args = [a for s in sets for a in ("--set", s)]
    assert run("observe", cfg, *args, tmp_path / "v.nvid", "-o", tmp_path / "o.jsonl") == 0
    obs = read_observations(tmp_path / "o.jsonl")
    assert len(obs) == 8 and len(np.unique(obs.t)) == 8
    header, rows = read_csv(str(tmp_path / "o.jsonl") + ".uvtrack.csv")
    assert header == ["t", "station_a", "station_b", "u", "v"] and len(rows) == 8


def test_vis_mode_needs_stations(tmp_path, cfg):
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    assert run("observe", cfg, "--set", 'observe.kind="vis"', tmp_path / "v.nvid", "-o", tmp_path / "o.jsonl") == 2


def test_fit_and_evaluate(tmp_path, cfg):
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    run("observe", cfg, tmp_path / "v.nvid", "-o", tmp_path / "o.jsonl")
    assert run("fit", cfg, tmp_path / "o.jsonl", "-o", tmp_path / "fit") == 0
    for name in ("checkpoint_3.ndmd", "checkpoint_6.ndmd", "checkpoint_best.ndmd", "loss_history.csv"):
        assert (tmp_path / "fit" / name).exists()
        assert json.loads((tmp_path / "fit" / (name + ".meta.json")).read_text())["seed"] == 3
    _, rows = read_csv(tmp_path / "fit" / "loss_history.csv")
    assert len(rows) == 6
    assert run("evaluate", cfg, tmp_path / "fit" / "checkpoint_best.ndmd", tmp_path / "v.nvid", "-o", tmp_path / "ev") == 0
    _, curve = read_csv(tmp_path / "ev" / "error_curve.csv")
    assert len(curve) == 10
    assert [bool(int(r[3])) for r in curve] == [False] * 8 + [True] * 2
    assert nvid_read(tmp_path / "ev" / "extrapolation.nvid").frames.shape == (2, 16, 16)
    assert (tmp_path / "ev" / "spectrum.csv").exists() and (tmp_path / "ev" / "modes.nvid").exists()


def test_horizon_zero_curve_has_truth_length(tmp_path, cfg):
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    run("observe", cfg, tmp_path / "v.nvid", "-o", tmp_path / "o.jsonl")
    run("fit", cfg, "--set", "train.epochs=1", tmp_path / "o.jsonl", "-o", tmp_path / "fit")
    assert run("evaluate", cfg, "--set", "eval.horizon=0", tmp_path / "fit" / "checkpoint_best.ndmd",
               tmp_path / "v.nvid", "-o", tmp_path / "ev") == 0
    assert len(read_csv(tmp_path / "ev" / "error_curve.csv")[1]) == 10
    assert not (tmp_path / "ev" / "extrapolation.nvid").exists()


def test_truth_against_itself_is_zero(tmp_path, cfg):
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    assert run("evaluate", cfg, tmp_path / "v.nvid", tmp_path / "v.nvid", "-o", tmp_path / "ev") == 0
    _, curve = read_csv(tmp_path / "ev" / "error_curve.csv")
    assert len(curve) == 10
    assert all(float(r[1]) == 0.0 and float(r[2]) == 0.0 for r in curve)


def test_evaluate_rejects_misaligned_timestamps(tmp_path, cfg):
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    run("generate", cfg, "--set", "data.t0=5.0", "-o", tmp_path / "w.nvid")
    assert run("evaluate", cfg, tmp_path / "w.nvid", tmp_path / "v.nvid", "-o", tmp_path / "ev") == 2


def test_method_contracts(tmp_path, cfg):
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    run("observe", cfg, tmp_path / "v.nvid", "-o", tmp_path / "o.jsonl")
    assert run("fit", cfg, "--set", 'model.method="optdmd"', tmp_path / "o.jsonl", "-o", tmp_path / "f") == 2
    assert run("fit", cfg, tmp_path / "v.nvid", "-o", tmp_path / "f") == 2
    st = tmp_path / "two.csv"
    st.write_text(f"name,x_m,y_m,z_m\nA,{R_EARTH},0,0\nB,{0.9 * R_EARTH},{0.3 * R_EARTH},{0.2 * R_EARTH}\n")
    vis = ["--set", 'observe.kind="vis"', "--set", f'observe.stations="{st}"', "--set", "observe.dec_deg=5.0",
           "--set", "observe.hour_angle_start_h=-1.0", "--set", "observe.hour_angle_step_h=0.1"]
    assert run("observe", cfg, *vis, tmp_path / "v.nvid", "-o", tmp_path / "vis.jsonl") == 0
    assert run("fit", cfg, "--set", 'model.method="threedvar"', "--set", "model.threedvar.grid=[16,16]",
               tmp_path / "vis.jsonl", "-o", tmp_path / "f") == 2


def test_exit_codes(tmp_path, cfg):
    out = ["-o", tmp_path / "x.nvid"]
    assert run("generate", cfg, *out) == 0
    assert run("generate", cfg, "--set", "data.colour=1", *out) == 1
    assert run("generate", tmp_path / "missing.toml", *out) == 1
    no_seed = tmp_path / "noseed.toml"
    no_seed.write_text("[data]\nT = 3\n")
    assert run("generate", no_seed, *out) == 1
    assert run("generate", cfg, "--set", 'data.kind="plasma"', *out) == 2
    bad = tmp_path / "bad.nvid"
    bad.write_bytes(b"JUNKJUNK")
    assert run("observe", cfg, bad, "-o", tmp_path / "o.jsonl") == 2
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1


def test_config_hash_and_overrides(cfg):
    base = load_config(cfg)
    same = load_config(cfg, ["train.epochs=6"])
    other = load_config(cfg, ["train.epochs=7"])
    assert base.hash == same.hash == config_hash(base.raw)
    assert other.hash != base.hash and other.train.epochs == 7


def test_fit_reruns_are_bit_exact(tmp_path, cfg):
    run("generate", cfg, "-o", tmp_path / "v.nvid")
    run("observe", cfg, tmp_path / "v.nvid", "-o", tmp_path / "o.jsonl")
    for d in ("a", "b"):
        assert run("fit", cfg, tmp_path / "o.jsonl", "-o", tmp_path / d) == 0
    for name in ("checkpoint_6.ndmd", "checkpoint_best.ndmd", "loss_history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize(
    "name", ["linear_modal_pixel", "linear_modal_sparse", "neural_rep_pixel", "threedvar_pixel", "optdmd_dense", "hotspot_vis"]
)
def test_shipped_configs_compose(tmp_path, name):
    from pathlib import Path

    conf = Path(__file__).parent.parent / "configs" / f"{name}.toml"
    sets = [a for s in SHRINK for a in ("--set", s)]
    assert run("generate", conf, *sets, "-o", tmp_path / "v.nvid") == 0
    method = load_config(conf).model.method
    if method == "optdmd":
        inp = tmp_path / "v.nvid"
    else:
        assert run("observe", conf, *sets, tmp_path / "v.nvid", "-o", tmp_path / "o.jsonl") == 0
        inp = tmp_path / "o.jsonl"
    assert run("fit", conf, *sets, inp, "-o", tmp_path / "fit") == 0
    result = {"optdmd": "model.ndmd", "threedvar": "analysis.nvid"}.get(method, "checkpoint_best.ndmd")
    assert run("evaluate", conf, *sets, tmp_path / "fit" / result, tmp_path / "v.nvid", "-o", tmp_path / "ev") == 0
    header, rows = read_csv(tmp_path / "ev" / "summary.csv")
    assert header == ["metric", "value"] and all(np.isfinite(float(v)) for _, v in rows)


def test_worker_count_is_not_part_of_the_hash(cfg):
    assert load_config(cfg, ["train.workers=4"]).hash == load_config(cfg).hash
