import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpminv.dms import (
    DMSConfig,
    LossReport,
    dms_loss,
    frame_difference,
    gaussian_window,
    magnitude_loss,
    patch_spectrum,
    patchify,
    phase_loss,
    reference_spectrum,
    spatial_loss,
    ssim_frame,
    unpatchify,
)
from mpminv.render import VideoTensor, render_video
from mpminv.scene import Camera


def naive_ssim(a, b):
    """Sliding-window SSIM with explicit loops, symmetric padding and biased variances."""
    w = np.outer(gaussian_window(), gaussian_window())
    r = w.shape[0] // 2
    pa, pb = np.pad(a, r, mode="symmetric"), np.pad(b, r, mode="symmetric")
    c1, c2 = 0.01**2, 0.03**2
    out = np.empty(a.shape)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            x = pa[i:i + 2 * r + 1, j:j + 2 * r + 1]
            y = pb[i:i + 2 * r + 1, j:j + 2 * r + 1]
            mx, my = (w * x).sum(), (w * y).sum()
            vx = (w * (x - mx) ** 2).sum()
            vy = (w * (y - my) ** 2).sum()
            cxy = (w * (x - mx) * (y - my)).sum()
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return out.mean()


def direct_dft3(p):
    """Triple-loop DFT, one coefficient at a time."""
    T, H, W = p.shape
    t, h, w = np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij")
    out = np.empty(p.shape, dtype=complex)
    for u in range(T):
        for v in range(H):
            for k in range(W):
                phase = -2j * np.pi * (u * t / T + v * h / H + k * w / W)
                out[u, v, k] = np.sum(p * np.exp(phase))
    return out


def moving_dot_video(T=12, size=32, shift=0):
    cam = Camera(width=size, height=size, scale=float(size), center=(0.5, 0.5), gain=1.0)
    t = np.arange(T) - shift
    pts = np.stack([0.2 + 0.05 * t, 0.3 + 0.03 * t], axis=1)[:, None, :]
    return render_video(pts, cam)


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_identical_is_one(rng):
    a = rng.uniform(size=(20, 24))
    assert ssim_frame(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_negative_image_is_worse(rng):
    a = rng.uniform(size=(16, 16))
    assert ssim_frame(a, 1 - a) < 1


def test_ssim_matches_naive_oracle(rng):
    a = rng.uniform(size=(16, 16))
    b = np.clip(a + 0.2 * rng.normal(size=(16, 16)), 0, 1)
    assert ssim_frame(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 14), elements=st.floats(0, 1)), arrays(np.float64, (12, 14), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim_frame(a, b)
    assert s == pytest.approx(ssim_frame(b, a), abs=1e-12)
    assert s <= 1 + 1e-12


def test_spatial_loss_cases(rng):
    v = rng.uniform(size=(4, 16, 16, 1))
    assert spatial_loss(v, v) == pytest.approx(0.0, abs=1e-9)
    zero = np.zeros((3, 16, 16, 1))
    assert spatial_loss(zero, zero) == 0.0
    w = np.clip(v + 0.1 * rng.normal(size=v.shape), 0, 1)
    per = np.mean([ssim_frame(v[t, ..., 0], w[t, ..., 0]) for t in range(4)])
    assert spatial_loss(w, v) == pytest.approx(1 - per, abs=1e-15)
    assert spatial_loss(w, v, "l1") == pytest.approx(np.abs(w - v).mean())


def test_spatial_loss_rgb_flag(rng):
    v = rng.uniform(size=(2, 16, 16, 3))
    w = np.clip(v + 0.1 * rng.normal(size=v.shape), 0, 1)
    per = np.mean([[ssim_frame(v[t, ..., c], w[t, ..., c]) for c in range(3)] for t in range(2)])
    assert spatial_loss(w, v, rgb=True) == pytest.approx(1 - per, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        spatial_loss(np.zeros((2, 8, 8, 1)), np.zeros((2, 8, 9, 1)))


# ---------------------------------------------------------------------------
# differences and patches


def test_frame_difference_cases():
    assert not frame_difference(np.full((5, 4, 4, 1), 0.4)).any()
    assert frame_difference(np.zeros((2, 4, 4, 1))).shape == (1, 4, 4)
    ramp = np.linspace(0, 1, 6)[:, None, None, None] * np.ones((6, 4, 4, 1))
    d = frame_difference(ramp)
    assert np.allclose(d, d[0])
    with pytest.raises(ValueError):
        frame_difference(np.zeros((1, 4, 4, 1)))


def test_patchify_counts_and_identity(rng):
    d = rng.normal(size=(3, 64, 64))
    assert patchify(d, 16, 16).shape == (16, 3, 16, 16)
    whole = patchify(d, 64, 64)
    assert whole.shape[0] == 1 and np.array_equal(whole[0], d)
    with pytest.raises(ValueError):
        patchify(d, 15, 16)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([(2, 2), (4, 2), (4, 8), (8, 8)]), st.integers(0, 2**32 - 1))
def test_patchify_roundtrip_raster_order(t, patch, seed):
    hp, wp = patch
    d = np.random.default_rng(seed).normal(size=(t, 16, 16))
    p = patchify(d, hp, wp)
    assert np.array_equal(unpatchify(p, 16, 16), d)
    # patch n sits at block (n // cols, n % cols)
    cols = 16 // wp
    n = p.shape[0] - 1
    r, c = divmod(n, cols)
    assert np.array_equal(p[n], d[:, r * hp:(r + 1) * hp, c * wp:(c + 1) * wp])


# ---------------------------------------------------------------------------
# spectra


def test_spectrum_trivial_cases():
    assert not patch_spectrum(np.zeros((1, 4, 4, 4))).any()
    delta = np.zeros((1, 4, 4, 4))
    delta[0, 0, 0, 0] = 1
    assert np.allclose(patch_spectrum(delta), 1.0)


@pytest.mark.parametrize("n", [4, 8])
def test_spectrum_matches_direct_dft_and_parseval(rng, n):
    for _ in range(20):
        p = rng.normal(size=(n, n, n))
        f = patch_spectrum(p[None])[0]
        ref = direct_dft3(p)
        assert np.abs(f - ref).max() <= 1e-6 * np.abs(ref).max()
        assert np.sum(np.abs(f) ** 2) / p.size == pytest.approx(np.sum(p**2), rel=1e-6)


def test_magnitude_loss_cases(rng):
    f = rng.normal(size=(2, 4, 4, 4)) + 1j * rng.normal(size=(2, 4, 4, 4))
    assert magnitude_loss(f, f) == 0.0
    rotated = f * np.exp(1j * rng.uniform(0, 2 * np.pi, size=f.shape))
    assert magnitude_loss(rotated, f) == pytest.approx(0.0, abs=1e-12)
    assert magnitude_loss(np.array([np.e - 1]), np.array([0.0])) == pytest.approx(1.0)


def test_phase_loss_cases(rng):
    f = (rng.normal(size=(3, 4, 4, 4)) + 1j * rng.normal(size=(3, 4, 4, 4))) * 10
    assert phase_loss(f, f) < 1e-6
    assert phase_loss(-f, f) == pytest.approx(2.0, abs=1e-6)
    zero = np.zeros((2, 4, 4, 4), dtype=complex)
    assert phase_loss(zero, zero) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_phase_loss_properties(seed, scale):
    r = np.random.default_rng(seed)
    f = r.normal(size=(2, 4, 4, 4)) + 1j * r.normal(size=(2, 4, 4, 4))
    g = r.normal(size=(2, 4, 4, 4)) + 1j * r.normal(size=(2, 4, 4, 4))
    value = phase_loss(f, g)
    assert 0.0 <= value <= 2.0
    assert value == pytest.approx(phase_loss(g, f), abs=1e-12)
    # positive rescaling leaves the phase unchanged (up to the epsilon floor)
    assert phase_loss(scale * f, g) == pytest.approx(value, abs=1e-6)


def test_phase_loss_rejects_bad_eps():
    with pytest.raises(ValueError):
        phase_loss(np.ones(3), np.ones(3), eps=0.0)


# ---------------------------------------------------------------------------
# full loss


def test_identity_loss_on_textured_motion(rng):
    v = VideoTensor(rng.uniform(size=(8, 32, 32, 1)))
    rep = dms_loss(v, v, DMSConfig())
    assert rep.spatial == pytest.approx(0.0, abs=1e-9)
    assert rep.mag == 0.0
    assert rep.phase < 1e-6


def test_one_frame_delay_increases_phase_loss():
    ref = moving_dot_video()
    late = moving_dot_video(shift=1)
    cfg = DMSConfig()
    spec = reference_spectrum(ref, cfg)
    assert dms_loss(late, ref, cfg, ref_spec=spec).phase > dms_loss(ref, ref, cfg, ref_spec=spec).phase


def test_total_is_sum_of_components(rng):
    a = VideoTensor(rng.uniform(size=(8, 32, 32, 1)))
    b = VideoTensor(rng.uniform(size=(8, 32, 32, 1)))
    cfg = DMSConfig()
    rep = dms_loss(a, b, cfg)
    fa = patch_spectrum(patchify(frame_difference(a), 16, 16))
    fb = patch_spectrum(patchify(frame_difference(b), 16, 16))
    expected = spatial_loss(a, b) + magnitude_loss(fa, fb) + phase_loss(fa, fb)
    assert rep.total == pytest.approx(expected, abs=1e-9)
    assert rep.to_json()["L_DMS"] == rep.total
    assert rep.to_json()["L_spec"] == rep.mag + rep.phase


def test_presets(rng):
    a = rng.uniform(size=(4, 16, 16, 1))
    b = rng.uniform(size=(4, 16, 16, 1))
    l1 = dms_loss(a, b, DMSConfig.preset("l1"))
    assert l1 == LossReport(float(np.abs(a - b).mean()), 0.0, 0.0)
    assert dms_loss(a, b, DMSConfig.preset("ssim")).mag == 0.0
    assert DMSConfig.preset("ssim+fft") == DMSConfig()
    with pytest.raises(ValueError):
        DMSConfig.preset("fft-only")
    with pytest.raises(ValueError):
        DMSConfig(spatial_mode="l2")


def test_loss_needs_two_frames():
    with pytest.raises(ValueError):
        dms_loss(np.zeros((1, 16, 16, 1)), np.zeros((1, 16, 16, 1)))
