import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpminv.mpm import rollout
from mpminv.render import (
    VideoTensor,
    dominant_frequency,
    load_video,
    project,
    render_frame,
    render_frames,
    render_scene,
    render_video,
    save_video,
    spectrum,
    wt_slice,
)
from mpminv.scene import Camera

CAM = Camera(width=32, height=32, scale=32.0, center=(0.5, 0.5), splat_radius=1.5)


def autocorrelation_frequency(x, fps):
    """Brute-force period estimate: first autocorrelation peak after the first negative lag."""
    x = np.asarray(x) - np.mean(x)
    T = len(x)
    ac = np.array([np.dot(x[: T - lag], x[lag:]) / (T - lag) for lag in range(3 * T // 4)])
    first_neg = int(np.argmax(ac < 0))
    lag = first_neg + int(np.argmax(ac[first_neg:]))
    return fps / lag


def test_empty_particle_set_is_black():
    img = render_frame(np.zeros((0, 2)), CAM)
    assert img.shape == (32, 32, 1)
    assert not img.any()


def test_center_particle_peaks_at_center():
    img = render_frame(np.array([[0.5, 0.5]]), CAM)[..., 0]
    assert np.unravel_index(np.argmax(img), img.shape) == (16, 16)
    # radially non-increasing along the row through the peak
    row = img[16, 16:]
    assert np.all(np.diff(row) <= 0)
    assert img[16, 15] == pytest.approx(img[15, 16])


def test_projection_convention():
    row, col = project(np.array([[0.5, 0.5], [0.5 + 1 / 32, 0.5 - 1 / 32]]), CAM)
    assert np.allclose(col, [16, 17])
    assert np.allclose(row, [16, 17])


@settings(max_examples=20, deadline=None)
@given(st.floats(0.3, 0.6), st.floats(0.3, 0.6))
def test_one_pixel_shift_equivariance(x0, y0):
    pts = np.array([[x0, y0], [x0 + 0.05, y0 + 0.02]])
    a = render_frame(pts, CAM)[..., 0]
    b = render_frame(pts + [1 / CAM.scale, 0.0], CAM)[..., 0]
    assert np.abs(np.roll(a, 1, axis=1) - b)[:, 1:].mean() < 1e-3


def test_video_frames_equal_render_frame(pendulum, pendulum_ref):
    traj, video = pendulum_ref
    from mpminv.render import particle_colors
    colors = particle_colors(pendulum)
    for t in (0, 7, len(traj) - 1):
        assert np.array_equal(video.frames[t], render_frame(traj[t], pendulum.camera, colors))
    assert len(video) == len(traj) == pendulum.frames


def test_static_trajectory_gives_identical_frames():
    x = np.repeat(np.array([[[0.4, 0.5], [0.6, 0.55]]]), 5, axis=0)
    v = render_video(x, CAM)
    assert len(v) == 5
    assert all(np.array_equal(v.frames[0], f) for f in v.frames)


def test_reversed_trajectory_reverses_video(pendulum_ref, pendulum):
    traj, video = pendulum_ref
    back = render_video(traj.x[::-1], pendulum.camera, 1.0)
    fwd = render_video(traj.x, pendulum.camera, 1.0)
    assert np.array_equal(back.frames, fwd.frames[::-1])


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        render_video(np.zeros((0, 3, 2)), CAM)


def test_batched_render_matches_per_frame(rng):
    x = rng.uniform(0.2, 0.8, size=(4, 30, 2))
    stack = render_frames(x, CAM)
    for t in range(4):
        assert np.array_equal(stack[t], render_frame(x[t], CAM))
    assert stack.min() >= 0 and stack.max() <= 1


# ---------------------------------------------------------------------------
# w-t slices


def test_constant_video_slice_rows_identical():
    v = VideoTensor(np.full((6, 8, 10, 1), 0.3))
    s = wt_slice(v).slice
    assert s.shape == (6, 10)
    assert np.all(s == s[0])


def test_single_bright_row():
    frames = np.zeros((5, 8, 10, 1))
    frames[0, 3] = 1.0
    s = wt_slice(VideoTensor(frames), row=3).slice
    assert np.all(s[0] == 1.0)
    assert not s[1:].any()


def test_slice_row_out_of_range():
    with pytest.raises(ValueError):
        wt_slice(VideoTensor(np.zeros((2, 4, 4, 1))), row=4)


def test_oscillating_dot_traces_sinusoid():
    T, fps = 40, 20.0
    t = np.arange(T) / fps
    xs = 0.5 + 0.2 * np.sin(2 * np.pi * 1.0 * t)
    pts = np.stack([xs, np.full(T, 0.5)], axis=1)[:, None, :]
    cam = dataclasses.replace(CAM, width=64, height=32, scale=64.0)
    s = wt_slice(render_video(pts, cam, fps=fps), row=16).slice
    expected = 32 + (xs - 0.5) * 64
    assert np.abs(np.argmax(s, axis=1) - expected).max() <= 1.0


# ---------------------------------------------------------------------------
# dominant frequency


def test_constant_slice_has_no_frequency():
    assert dominant_frequency(np.full((16, 5), 0.7), 30.0) == (0.0, 0.0)


def test_pure_tone():
    T, fps = 64, 32.0
    t = np.arange(T) / fps
    s = 0.5 + 0.3 * np.sin(2 * np.pi * 2.0 * t)[:, None] * np.ones((1, 8))
    f, amp = dominant_frequency(s, fps)
    assert abs(f - 2.0) <= fps / T
    assert amp > 0


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.4, 0.4))
def test_frequency_ignores_brightness_offset(offset):
    T, fps = 48, 24.0
    s = 0.5 + 0.1 * np.cos(2 * np.pi * 3.0 * np.arange(T) / fps)[:, None] * np.ones((1, 4))
    assert dominant_frequency(s + offset, fps)[0] == dominant_frequency(s, fps)[0]


def test_spectrum_agrees_with_peak():
    s = np.sin(2 * np.pi * np.arange(32) * 4 / 32)[:, None]
    freqs, mag = spectrum(s, 32.0)
    assert freqs[np.argmax(mag)] == dominant_frequency(s, 32.0)[0] == 4.0


def test_too_short_slice():
    with pytest.raises(ValueError):
        dominant_frequency(np.zeros((3, 4)), 30.0)


def test_pendulum_peak_matches_autocorrelation(pendulum):
    T = 96
    traj = rollout(pendulum, pendulum.part_params(), frames=T)
    tip = pendulum.labels == 1
    oracle = autocorrelation_frequency(traj.x[:, tip, 0].mean(1), pendulum.fps)
    row, _ = project(pendulum.positions[tip].mean(0), pendulum.camera)
    f, _ = dominant_frequency(wt_slice(render_scene(traj, pendulum), int(round(float(row)))), pendulum.fps)
    assert abs(f - oracle) <= pendulum.fps / T


# ---------------------------------------------------------------------------
# PNG I/O


@pytest.mark.parametrize("channels", [1, 3])
def test_png_roundtrip(tmp_path, rng, channels):
    frames = np.round(rng.uniform(size=(3, 8, 12, channels)) * 255) / 255
    v = VideoTensor(frames, fps=12.0)
    save_video(v, tmp_path / "vid")
    back = load_video(tmp_path / "vid")
    assert back.fps == 12.0
    assert back.shape == v.shape
    assert np.allclose(back.frames, frames, atol=1e-12)


def test_missing_frame_reported(tmp_path):
    save_video(VideoTensor(np.zeros((2, 4, 4, 1))), tmp_path)
    (tmp_path / "frame_00001.png").unlink()
    with pytest.raises(FileNotFoundError, match="frame_00001"):
        load_video(tmp_path)
