"""Dual-domain motion supervision.

The loss has a spatial part, one minus the mean frame-wise SSIM, and a spectral
part computed on temporal frame differences.  The difference volume is cut into
non-overlapping patches, each patch gets an unnormalized 3-D DFT over
(t, h, w), and the spectra are compared by log-magnitude (L1) and by the real
part of the normalized cross spectrum (phase).  All terms have unit weight.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .render import VideoTensor, to_gray

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DEFAULT_PATCH = 16
DEFAULT_EPS = 1e-8
SPATIAL_MODES = ("ssim", "l1")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _blur(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # 'reflect' in scipy repeats the edge sample (d c b a | a b c d)
    out = correlate1d(img, taps, axis=-2, mode="reflect")
    return correlate1d(out, taps, axis=-1, mode="reflect")


def ssim_components(a: np.ndarray, b: np.ndarray, data_range: float = 1.0):
    """Local luminance and contrast-structure maps of SSIM over the last two axes.

    Returns ``(l_map, cs_map)`` with ``ssim_map = l_map * cs_map``.  Local
    statistics use the Gaussian window with symmetric edge padding and biased
    (population) variances.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    taps = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _blur(a, taps)
    mu_b = _blur(b, taps)
    var_a = _blur(a * a, taps) - mu_a * mu_a
    var_b = _blur(b * b, taps) - mu_b * mu_b
    cov = _blur(a * b, taps) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim_frame(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two grayscale images (H, W); 3-channel input is converted to luma."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = to_gray(a), to_gray(b)
    lum, cs = ssim_components(a, b)
    return float(np.mean(lum * cs))


def _frames(video) -> np.ndarray:
    return video.frames if isinstance(video, VideoTensor) else np.asarray(video, dtype=np.float64)


def _check_pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    a, b = _frames(pred), _frames(ref)
    if a.shape != b.shape:
        raise ValueError(f"video shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def spatial_loss(pred, ref, mode: str = "ssim", rgb: bool = False) -> float:
    """``1 - mean_t SSIM(pred_t, ref_t)``, or the mean absolute difference in ``l1`` mode.

    With ``rgb=True`` SSIM is averaged over color channels instead of being
    computed on luma.
    """
    a, b = _check_pair(pred, ref)
    if mode == "l1":
        return float(np.mean(np.abs(a - b)))
    if mode != "ssim":
        raise ValueError(f"unknown spatial mode {mode!r}; expected one of {SPATIAL_MODES}")
    if rgb:
        # move channels in front so the window runs over (H, W)
        ac, bc = np.moveaxis(a, -1, 1), np.moveaxis(b, -1, 1)
        lum, cs = ssim_components(ac, bc)
        per_frame = (lum * cs).mean(axis=(1, 2, 3))
    else:
        lum, cs = ssim_components(to_gray(a), to_gray(b))
        per_frame = (lum * cs).mean(axis=(1, 2))
    return float(1.0 - per_frame.mean())


def frame_difference(video) -> np.ndarray:
    """Consecutive differences of the luma frames, shape (T-1, H, W)."""
    gray = to_gray(_frames(video))
    if gray.shape[0] < 2:
        raise ValueError("frame differences need at least 2 frames")
    return np.diff(gray, axis=0)


def patchify(diffs: np.ndarray, hp: int = DEFAULT_PATCH, wp: int = DEFAULT_PATCH) -> np.ndarray:
    """Split (T', H, W) into raster-ordered patches of shape (N, T', hp, wp)."""
    diffs = np.asarray(diffs)
    t, h, w = diffs.shape
    if hp <= 0 or wp <= 0 or h % hp or w % wp:
        raise ValueError(f"patch size {hp}x{wp} must divide the frame size {h}x{w}")
    blocks = diffs.reshape(t, h // hp, hp, w // wp, wp)
    return blocks.transpose(1, 3, 0, 2, 4).reshape(-1, t, hp, wp)


def unpatchify(patches: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    n, t, hp, wp = patches.shape
    blocks = patches.reshape(h // hp, w // wp, t, hp, wp)
    return blocks.transpose(2, 0, 3, 1, 4).reshape(t, h, w)


def patch_spectrum(patches: np.ndarray) -> np.ndarray:
    """Unnormalized forward 3-D DFT of every patch over its (t, h, w) axes."""
    patches = np.asarray(patches)
    if patches.size == 0:
        raise ValueError("no patches to transform")
    return np.fft.fftn(patches, axes=(-3, -2, -1))


def normalize_spectrum(spec: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    return spec / (np.abs(spec) + eps)


def _check_spectra(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"spectrum shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def magnitude_loss(pred_spec, ref_spec) -> float:
    """Mean |log(1 + |F_pred|) - log(1 + |F_ref|)| over all patches and coefficients."""
    a, b = _check_spectra(pred_spec, ref_spec)
    return float(np.mean(np.abs(np.log1p(np.abs(a)) - np.log1p(np.abs(b)))))


def phase_similarity(pred_spec, ref_spec, eps: float = DEFAULT_EPS) -> np.ndarray:
    a, b = _check_spectra(pred_spec, ref_spec)
    return np.real(normalize_spectrum(a, eps) * np.conj(normalize_spectrum(b, eps)))


def phase_loss(pred_spec, ref_spec, eps: float = DEFAULT_EPS) -> float:
    """``1 - mean(S_phase)``; a coefficient that is zero in either spectrum scores 0 similarity."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return float(1.0 - np.mean(phase_similarity(pred_spec, ref_spec, eps)))


@dataclass(frozen=True)
class DMSConfig:
    """Loss switches.  The defaults give the full dual-domain loss."""

    patch_h: int = DEFAULT_PATCH
    patch_w: int = DEFAULT_PATCH
    eps: float = DEFAULT_EPS
    spatial_mode: str = "ssim"  # "ssim" or "l1"
    use_spatial: bool = True
    use_spectral: bool = True
    rgb: bool = False

    def __post_init__(self):
        if self.spatial_mode not in SPATIAL_MODES:
            raise ValueError(f"unknown spatial mode {self.spatial_mode!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def preset(cls, name: str, **kw) -> "DMSConfig":
        """Named ablation rows: ``l1``, ``ssim``, ``ssim+fft`` (the default)."""
        presets = {
            "l1": dict(spatial_mode="l1", use_spectral=False),
            "ssim": dict(spatial_mode="ssim", use_spectral=False),
            "ssim+fft": dict(),
        }
        if name not in presets:
            raise ValueError(f"unknown loss preset {name!r}; expected one of {sorted(presets)}")
        return cls(**{**presets[name], **kw})

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossReport:
    spatial: float
    mag: float
    phase: float

    @property
    def spec(self) -> float:
        return self.mag + self.phase

    @property
    def total(self) -> float:
        return self.spatial + self.spec

    def to_json(self) -> dict:
        return {"L_spatial": self.spatial, "L_mag": self.mag, "L_phase": self.phase,
                "L_spec": self.spec, "L_DMS": self.total}


def reference_spectrum(ref, config: DMSConfig = DMSConfig()) -> np.ndarray:
    """Patch spectra of a reference video, reusable across loss evaluations."""
    return patch_spectrum(patchify(frame_difference(ref), config.patch_h, config.patch_w))


def dms_loss(pred, ref, config: DMSConfig = DMSConfig(), ref_spec=None) -> LossReport:
    """Evaluate the supervision loss of a rendered video against the reference.

    ``ref_spec`` may carry precomputed reference spectra to skip one FFT.
    """
    a, b = _check_pair(pred, ref)
    if a.shape[0] < 2:
        raise ValueError("videos need at least 2 frames")
    spatial = spatial_loss(a, b, config.spatial_mode, config.rgb) if config.use_spatial else 0.0
    mag = phase = 0.0
    if config.use_spectral:
        pred_spec = reference_spectrum(a, config)
        if ref_spec is None:
            ref_spec = reference_spectrum(b, config)
        mag = magnitude_loss(pred_spec, ref_spec)
        phase = phase_loss(pred_spec, ref_spec, config.eps)
    return LossReport(spatial, mag, phase)
