import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuraldmd.datagen import HotspotSpec, VideoGrid, gen_hotspot
from neuraldmd.evaluation import (
    angular_velocity,
    cylinder_plot,
    error_curve,
    mode_stack,
    normalized_l2,
    read_spectrum_csv,
    render_video,
    spectrum_report,
    write_cylinder_csv,
    write_spectrum_csv,
)
from neuraldmd.formats import read_csv
from neuraldmd.model import ModalDecomposition, pixel_centers


def analytic_video(fn, T, H, W, dt=1.0):
    ys, xs = pixel_centers(H, W)
    X, Y = np.meshgrid(xs, ys)
    return VideoGrid(np.stack([fn(X, Y, k * dt) for k in range(T)]), 0.0, dt)


# ---------------------------------------------------------------- normalized L2


def test_normalized_l2_examples():
    b = np.random.default_rng(0).normal(size=(4, 5))
    assert normalized_l2(b, b) == 0.0
    assert normalized_l2(2 * b, b) == pytest.approx(1.0, rel=1e-14)
    e = np.zeros((3, 3))
    e[1, 1] = 1.0
    unit = np.zeros((3, 3))
    unit[0, 0] = 1.0
    assert normalized_l2(unit + e, unit) == pytest.approx(1.0, rel=1e-14)


def test_normalized_l2_errors():
    with pytest.raises(ValueError):
        normalized_l2(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        normalized_l2(np.ones(3), np.ones(4))


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_normalized_l2_scale_covariant(seed, s):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 6, 6))
    assert normalized_l2(s * a, s * b) == pytest.approx(normalized_l2(a, b), rel=1e-12)


# ---------------------------------------------------------------- error curves


def test_error_curve_of_identical_videos():
    video = VideoGrid(np.random.default_rng(1).normal(size=(5, 4, 4)), 0.0, 0.5)
    curve = error_curve(video, video, window_end=1.0)
    np.testing.assert_array_equal(curve.total_err, 0.0)
    np.testing.assert_array_equal(curve.dynamics_err, 0.0)
    np.testing.assert_array_equal(curve.extrapolating, [False, False, False, True, True])


def test_constant_offset_is_not_a_dynamics_error():
    truth = VideoGrid(np.random.default_rng(2).normal(size=(6, 4, 4)), 0.0, 1.0)
    offset = np.random.default_rng(3).normal(size=(4, 4))
    curve = error_curve(VideoGrid(truth.frames + offset, 0.0, 1.0), truth, window_end=3.0)
    assert np.all(curve.total_err > 0)
    np.testing.assert_allclose(curve.dynamics_err, 0.0, atol=1e-14)


def test_error_curve_rejects_misaligned_videos():
    a = VideoGrid(np.ones((3, 2, 2)), 0.0, 1.0)
    with pytest.raises(ValueError):
        error_curve(a, VideoGrid(np.ones((3, 2, 2)), 0.5, 1.0), 1.0)
    with pytest.raises(ValueError):
        error_curve(a, VideoGrid(np.ones((4, 2, 2)), 0.0, 1.0), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dynamics_error_triangle_bound(seed):
    rng = np.random.default_rng(seed)
    truth = VideoGrid(rng.normal(size=(5, 3, 3)) + 2.0, 0.0, 1.0)
    recon = VideoGrid(truth.frames + 0.3 * rng.normal(size=(5, 3, 3)), 0.0, 1.0)
    curve = error_curve(recon, truth, 2.0)
    assert np.all(curve.total_err >= 0) and np.all(curve.dynamics_err >= 0)
    # ||rd - gd|| <= ||r - g|| + ||mean(r - g)|| and ||gd|| is the dynamics reference
    g = truth.frames - truth.frames.mean(axis=0)
    diff_mean = np.linalg.norm((recon.frames - truth.frames).mean(axis=0))
    for k in range(5):
        ng = np.linalg.norm(g[k])
        bound = (curve.total_err[k] * np.linalg.norm(truth.frames[k]) + diff_mean) / ng
        assert curve.dynamics_err[k] <= bound + 1e-12


def test_error_curve_csv(tmp_path):
    video = VideoGrid(np.random.default_rng(1).normal(size=(3, 2, 2)), 0.0, 1.0)
    error_curve(video, video, 1.0).write_csv(tmp_path / "e.csv")
    header, rows = read_csv(tmp_path / "e.csv")
    assert header == ["t", "total_err", "dynamics_err", "extrapolated"]
    assert len(rows) == 3


# ---------------------------------------------------------------- cylinder plots


def test_static_video_gives_identical_columns():
    frame = np.random.default_rng(0).random((16, 16))
    cyl = cylinder_plot(VideoGrid(np.repeat(frame[None], 4, axis=0), 0.0, 1.0), 0.5, 64)
    for k in range(1, 4):
        np.testing.assert_array_equal(cyl[:, k], cyl[:, 0])


def test_symmetric_frame_gives_constant_rows():
    video = analytic_video(lambda x, y, t: np.exp(-(x**2 + y**2)), 2, 32, 32)
    cyl = cylinder_plot(video, 0.5, 90)
    np.testing.assert_allclose(cyl, cyl[0, 0], rtol=5e-3)


def test_hotspot_slope_recovered():
    spec = HotspotSpec(angular_velocity=2 * np.pi / 40)
    video = gen_hotspot(spec, 40, 48, 48, 1.0)
    slope = angular_velocity(cylinder_plot(video, spec.orbit_radius, 360), video.timestamps)
    assert abs(slope - spec.angular_velocity) < 0.05 * spec.angular_velocity
    cw = gen_hotspot(HotspotSpec(angular_velocity=2 * np.pi / 40, direction="cw"), 40, 48, 48, 1.0)
    assert angular_velocity(cylinder_plot(cw, 0.5, 360), cw.timestamps) < 0


def test_rotation_is_a_cyclic_row_shift():
    n, shift = 360, 15
    dth = 2 * np.pi * shift / n

    def blob(phi):
        c, s = 0.5 * np.cos(phi), 0.5 * np.sin(phi)
        return lambda x, y, t: np.exp(-((x - c) ** 2 + (y - s) ** 2) / (2 * 0.3**2))

    a = cylinder_plot(analytic_video(blob(0.4), 1, 128, 128), 0.5, n)
    b = cylinder_plot(analytic_video(blob(0.4 + dth), 1, 128, 128), 0.5, n)
    np.testing.assert_allclose(b, np.roll(a, shift, axis=0), atol=1e-3)


def test_cylinder_contracts(tmp_path):
    video = VideoGrid(np.ones((2, 4, 4)), 0.0, 1.0)
    with pytest.raises(ValueError):
        cylinder_plot(video, 0.5, 3)
    with pytest.raises(ValueError):
        cylinder_plot(video, 1.2)
    cyl = cylinder_plot(video, 0.5, 8)
    write_cylinder_csv(tmp_path / "c.csv", cyl, video.timestamps)
    header, rows = read_csv(tmp_path / "c.csv")
    assert header[0] == "theta" and len(header) == 3 and len(rows) == 8


# ---------------------------------------------------------------- spectrum


def decomposition(alphas):
    K = len(alphas)
    om = np.concatenate([[0], np.asarray(alphas) + 1j * np.arange(1, K + 1)])
    rng = np.random.default_rng(0)
    modes = rng.normal(size=(K + 1, 3, 3)) + 1j * rng.normal(size=(K + 1, 3, 3))
    modes[0] = modes[0].real
    return ModalDecomposition(modes, om, rng.normal(size=K + 1) + 1j * rng.normal(size=K + 1))


def test_spectrum_ordering_and_flags():
    rows = spectrum_report(decomposition([-0.06, -0.04, -1.0]))
    assert rows[0].k == 0 and not rows[0].flagged
    assert [r.alpha for r in rows] == sorted((r.alpha for r in rows), reverse=True)
    flags = {r.k: r.flagged for r in rows}
    assert flags == {0: False, 1: True, 2: False, 3: True}


def test_spectrum_csv_round_trip(tmp_path):
    rows = spectrum_report(decomposition([-0.3, -0.01]))
    write_spectrum_csv(tmp_path / "s.csv", rows)
    assert read_spectrum_csv(tmp_path / "s.csv") == rows


def test_continuous_spectrum_units():
    d = decomposition([-0.5])
    d.time_scale = 100.0
    rows = spectrum_report(d, continuous=True)
    assert rows[1].alpha == pytest.approx(-50.0)


def test_mode_stack_layout():
    d = decomposition([-0.1, -0.2])
    stack = mode_stack(d)
    assert stack.shape == (5, 3, 3)
    np.testing.assert_array_equal(stack[0], d.modes[0].real)
    np.testing.assert_array_equal(stack[3], d.modes[2].real)
    np.testing.assert_array_equal(stack[4], d.modes[2].imag)


def test_render_video_from_decomposition():
    d = decomposition([-0.1])
    video = render_video(d, (3, 3), [0.0, 0.5, 1.0])
    assert video.dt == 0.5
    np.testing.assert_array_equal(video.frames, d.render([0.0, 0.5, 1.0]))
