"""Video metrics (PSNR, MS-SSIM) and point-set metrics (Chamfer, HD95, F-score)."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .dms import ssim_components
from .render import VideoTensor, to_gray

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
DEFAULT_TAU_FRACTION = 0.01  # F-score threshold as a fraction of the scene diameter


def _as_array(x) -> np.ndarray:
    return x.frames if isinstance(x, VideoTensor) else np.asarray(x, dtype=np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for signals in [0, 1], capped at 100 dB."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _pool2(img: np.ndarray) -> np.ndarray:
    # 2x2 average pooling over the last two axes; an odd trailing row/column is dropped
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2] + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def ms_ssim_frames(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-frame MS-SSIM of two grayscale stacks (T, H, W)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    n = len(MS_SSIM_WEIGHTS)
    if min(a.shape[-2:]) < 2 ** (n - 1) * 2:
        raise ValueError(f"frames must be at least {2 ** n}x{2 ** n} for {n} scales, got {a.shape[-2:]}")
    score = np.ones(a.shape[0])
    for level, weight in enumerate(MS_SSIM_WEIGHTS):
        lum, cs = ssim_components(a, b)
        # a negative contrast-structure term has no real fractional power
        cs_mean = np.maximum(cs.mean(axis=(-2, -1)), 0.0)
        score *= cs_mean**weight
        if level == n - 1:
            score *= np.maximum(lum.mean(axis=(-2, -1)), 0.0) ** weight
        else:
            a, b = _pool2(a), _pool2(b)
    return score


def ms_ssim(pred, ref) -> float:
    """Frame-averaged 5-scale MS-SSIM on luma; identical inputs give exactly 1."""
    a, b = _as_array(pred), _as_array(ref)
    if a.shape != b.shape:
        raise ValueError(f"video shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 4:
        a, b = to_gray(a), to_gray(b)
    elif a.ndim == 2:
        a, b = a[None], b[None]
    return float(ms_ssim_frames(a, b).mean())


# ---------------------------------------------------------------------------
# point sets


def _points(p, name) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"{name} point set must be a non-empty (N, d) array")
    return p


def nn_distances(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour distances pred->ref and ref->pred."""
    pred, ref = _points(pred, "predicted"), _points(ref, "reference")
    if pred.shape[1] != ref.shape[1]:
        raise ValueError("point sets have different dimensions")
    d_pr, _ = cKDTree(ref).query(pred)
    d_rp, _ = cKDTree(pred).query(ref)
    return d_pr, d_rp


def chamfer(pred, ref) -> float:
    """Half the sum of the two directed mean squared nearest-neighbour distances (m^2)."""
    d_pr, d_rp = nn_distances(pred, ref)
    return 0.5 * (float(np.mean(d_pr**2)) + float(np.mean(d_rp**2)))


def hd95(pred, ref) -> float:
    """Larger of the two directed 95th-percentile nearest-neighbour distances (m)."""
    d_pr, d_rp = nn_distances(pred, ref)
    return max(float(np.percentile(d_pr, 95)), float(np.percentile(d_rp, 95)))


def fscore(pred, ref, tau: float) -> float:
    """Harmonic mean of precision and recall at distance threshold ``tau`` (strict)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    d_pr, d_rp = nn_distances(pred, ref)
    precision = float(np.mean(d_pr < tau))
    recall = float(np.mean(d_rp < tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def trajectory_metrics(pred_x: np.ndarray, ref_x: np.ndarray, tau: float) -> dict:
    """Frame-averaged point metrics for two (T, P, d) position stacks."""
    pred_x, ref_x = np.asarray(pred_x), np.asarray(ref_x)
    if pred_x.shape[0] != ref_x.shape[0]:
        raise ValueError(f"frame count mismatch: {pred_x.shape[0]} vs {ref_x.shape[0]}")
    cd = [chamfer(p, r) for p, r in zip(pred_x, ref_x)]
    hd = [hd95(p, r) for p, r in zip(pred_x, ref_x)]
    fs = [fscore(p, r, tau) for p, r in zip(pred_x, ref_x)]
    return {
        "chamfer": float(np.mean(cd)),
        "hd95": float(np.mean(hd)),
        "fscore": float(np.mean(fs)),
        "tau": float(tau),
        "conventions": "chamfer = (mean d^2 pred->ref + mean d^2 ref->pred) / 2; "
                       "hd95 = max of directed 95th percentiles (linear interpolation); "
                       "fscore counts distances strictly below tau",
    }


def default_tau(positions: np.ndarray) -> float:
    """1% of the bounding-box diagonal of the given points."""
    positions = np.asarray(positions)
    return DEFAULT_TAU_FRACTION * float(np.linalg.norm(positions.max(0) - positions.min(0)))
