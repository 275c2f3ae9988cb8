"""Particle splatting renderer, w-t slices and the dominant-frequency diagnostic.

The renderer is an orthographic stand-in for Gaussian-splat rendering: every
particle deposits a smooth, truncated isotropic Gaussian of fixed pixel radius
and its part color.  Values are accumulated additively and clamped to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Camera, SceneConfig

LUMA = np.array([0.299, 0.587, 0.114])
CUTOFF = 3.0  # footprint support in units of the splat radius
_FLOOR = math.exp(-0.5 * CUTOFF**2)


@dataclass
class VideoTensor:
    frames: np.ndarray  # (T, H, W, C) in [0, 1]
    fps: float = 30.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4 or frames.shape[-1] not in (1, 3):
            raise ValueError(f"expected frames of shape (T, H, W, C) with C in {{1, 3}}, got {frames.shape}")
        self.frames = frames

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self) -> int:
        return self.frames.shape[0]

    def gray(self) -> np.ndarray:
        """Luma frames, shape (T, H, W)."""
        return to_gray(self.frames)

    def head(self, k: int) -> "VideoTensor":
        return VideoTensor(self.frames[:k], self.fps)


@dataclass
class WTSlice:
    slice: np.ndarray  # (T, W)
    row: int


def to_gray(frames: np.ndarray) -> np.ndarray:
    """BT.601 luma of a (..., C) array; single-channel input is squeezed."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] == 3:
        return frames @ LUMA
    if frames.shape[-1] == 1:
        return frames[..., 0]
    raise ValueError(f"last axis must have 1 or 3 channels, got {frames.shape[-1]}")


# ---------------------------------------------------------------------------
# splatting


def project(x: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World positions (..., d) to fractional pixel (row, col)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 3:
        keep = [a for a in range(3) if a != camera.view_axis]
        x = x[..., keep]
    cx, cy = camera.center
    col = camera.width // 2 + (x[..., 0] - cx) * camera.scale
    row = camera.height // 2 - (x[..., 1] - cy) * camera.scale
    return row, col


def footprint(r2: np.ndarray, radius: float) -> np.ndarray:
    """Gaussian of std ``radius`` shifted and rescaled to reach zero at the cutoff."""
    g = (np.exp(-0.5 * r2 / radius**2) - _FLOOR) / (1.0 - _FLOOR)
    return np.maximum(g, 0.0)


def particle_colors(cfg: SceneConfig, labels=None) -> np.ndarray:
    """Per-particle colors (P, C) from the part table, broadcast to the camera channels."""
    labels = cfg.labels if labels is None else np.asarray(labels)
    c = cfg.camera.channels
    table = np.array([np.broadcast_to(np.asarray(p.color, float), (c,)) if len(p.color) in (1, c)
                      else _bad_color(p, c) for p in cfg.parts])
    return table[labels]


def _bad_color(part, channels):
    raise ValueError(f"part {part.name!r}: color has {len(part.color)} entries, camera has {channels} channels")


def render_frames(x: np.ndarray, camera: Camera, colors=None) -> np.ndarray:
    """Splat a stack of particle sets (T, P, d) into (T, H, W, C) images."""
    x = np.asarray(x, dtype=np.float64)
    T, P = x.shape[:2]
    H, W, C = camera.height, camera.width, camera.channels
    out = np.zeros((T, H * W, C))
    if P == 0:
        return out.reshape(T, H, W, C)
    colors = np.asarray(1.0 if colors is None else colors, dtype=np.float64)
    if colors.ndim == 1 and colors.shape[0] == P:
        colors = colors[:, None]
    colors = np.broadcast_to(colors, (P, C))
    rad = camera.splat_radius
    reach = int(math.ceil(CUTOFF * rad))
    offs = np.arange(-reach, reach + 1)
    row, col = project(x, camera)  # (T, P)
    r0 = np.round(row).astype(np.int64)
    c0 = np.round(col).astype(np.int64)
    rr = r0[..., None, None] + offs[:, None]  # (T, P, k, 1)
    cc = c0[..., None, None] + offs[None, :]  # (T, P, 1, k)
    r2 = (rr - row[..., None, None]) ** 2 + (cc - col[..., None, None]) ** 2
    wgt = footprint(r2, rad) * camera.gain
    inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W) & (wgt > 0)
    t_idx = np.broadcast_to(np.arange(T)[:, None, None, None], inside.shape)[inside]
    p_idx = np.broadcast_to(np.arange(P)[None, :, None, None], inside.shape)[inside]
    pix = np.broadcast_to(rr * W + cc, inside.shape)[inside]
    flat = t_idx * (H * W) + pix
    wv = wgt[inside]
    for ch in range(C):
        out[..., ch] = np.bincount(flat, weights=wv * colors[p_idx, ch], minlength=T * H * W).reshape(T, H * W)
    return np.clip(out, 0.0, 1.0).reshape(T, H, W, C)


def render_frame(particles, camera: Camera, colors=None) -> np.ndarray:
    """Render one particle set (a ParticleState or a (P, d) array) to (H, W, C)."""
    x = particles.x if hasattr(particles, "x") else particles
    return render_frames(np.asarray(x)[None], camera, colors)[0]


def render_video(trajectory, camera: Camera, colors=None, fps: float = 30.0) -> VideoTensor:
    """Render each trajectory frame; frame ``t`` equals ``render_frame(trajectory[t])``."""
    x = trajectory.x if hasattr(trajectory, "x") else np.asarray(trajectory)
    if len(x) == 0:
        raise ValueError("cannot render an empty trajectory")
    return VideoTensor(render_frames(x, camera, colors), fps)


def render_scene(trajectory, cfg: SceneConfig) -> VideoTensor:
    """Render with the scene's camera, part colors and frame rate."""
    return render_video(trajectory, cfg.camera, particle_colors(cfg), cfg.fps)


# ---------------------------------------------------------------------------
# w-t diagnostic


def wt_slice(video: VideoTensor, row: int | None = None) -> WTSlice:
    """Stack the grayscale scanline ``row`` of every frame into a (T, W) image."""
    gray = video.gray() if isinstance(video, VideoTensor) else to_gray(np.asarray(video))
    H = gray.shape[1]
    if row is None:
        row = H // 2
    if not 0 <= row < H:
        raise ValueError(f"row {row} outside [0, {H})")
    return WTSlice(gray[:, row, :].copy(), int(row))


def dominant_frequency(wt, fps: float) -> tuple[float, float]:
    """Peak temporal frequency (Hz) and amplitude of a w-t slice.

    Each column's mean is removed, the per-column DFT magnitudes along time
    are averaged, and the largest non-DC bin wins.  A constant slice gives
    ``(0.0, 0.0)``.
    """
    s = np.asarray(wt.slice if isinstance(wt, WTSlice) else wt, dtype=np.float64)
    T = s.shape[0]
    if T < 4:
        raise ValueError("dominant_frequency needs at least 4 frames")
    mag = np.abs(np.fft.rfft(s - s.mean(axis=0), axis=0)).mean(axis=1)
    mag[0] = 0.0
    k = int(np.argmax(mag))
    if mag[k] <= 1e-12 * max(1.0, np.abs(s).max()):
        return 0.0, 0.0
    return k * fps / T, float(mag[k])


def spectrum(wt, fps: float) -> tuple[np.ndarray, np.ndarray]:
    """Frequencies (Hz) and column-averaged magnitudes used by :func:`dominant_frequency`."""
    s = np.asarray(wt.slice if isinstance(wt, WTSlice) else wt, dtype=np.float64)
    mag = np.abs(np.fft.rfft(s - s.mean(axis=0), axis=0)).mean(axis=1)
    return np.fft.rfftfreq(s.shape[0], 1.0 / fps), mag


# ---------------------------------------------------------------------------
# PNG sequence I/O


def save_video(video: VideoTensor, directory) -> Path:
    """Write ``frame_%05d.png`` (8-bit) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T, H, W, C = video.shape
    q = np.round(np.clip(video.frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    for t in range(T):
        img = Image.fromarray(q[t, ..., 0], "L") if C == 1 else Image.fromarray(q[t], "RGB")
        img.save(directory / f"frame_{t:05d}.png")
    manifest = {"schema_version": 1, "fps": video.fps, "width": W, "height": H, "frames": T, "channels": C}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_video(directory) -> VideoTensor:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{manifest_path}: video manifest not found") from None
    frames = []
    for t in range(int(manifest["frames"])):
        path = directory / f"frame_{t:05d}.png"
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
        except FileNotFoundError:
            raise FileNotFoundError(f"{path}: frame listed in manifest is missing") from None
        frames.append(arr.astype(np.float64) / 255.0)
    video = VideoTensor(np.stack(frames), float(manifest["fps"]))
    if video.shape[1:3] != (manifest["height"], manifest["width"]):
        raise ValueError(f"{directory}: frame size {video.shape[1:3]} disagrees with manifest")
    return video
