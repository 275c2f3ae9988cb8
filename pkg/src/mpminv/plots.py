"""Minimal PNG plots drawn with Pillow: line charts and grayscale heatmaps."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

PALETTE = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189), (255, 127, 14)]


def heatmap(values: np.ndarray, path, upscale: int = 4) -> Path:
    """Save a 2-D array in [0, 1] as a grayscale image, nearest-neighbour upscaled."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray(np.round(v * 255).astype(np.uint8), "L")
    img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
    img.save(path)
    return Path(path)


def line_plot(series: dict, path, size=(640, 360), log_y: bool = False, marker_x: float | None = None,
              title: str = "") -> Path:
    """Draw ``{label: (x, y)}`` as polylines on a white canvas with simple axes.

    ``marker_x`` draws a vertical marker, e.g. at a dominant frequency.
    """
    w, h = size
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 40
    img = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(img)
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    if log_y:
        ys = np.log10(np.maximum(ys, 1e-12))
    finite = np.isfinite(ys)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = (float(ys[finite].min()), float(ys[finite].max())) if finite.any() else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def to_px(x, y):
        px = pad_l + (x - x0) / (x1 - x0) * (w - pad_l - pad_r)
        py = h - pad_b - (y - y0) / (y1 - y0) * (h - pad_t - pad_b)
        return px, py

    draw.line([(pad_l, pad_t), (pad_l, h - pad_b), (w - pad_r, h - pad_b)], fill="black")
    label_y = (lambda v: f"1e{v:.1f}") if log_y else (lambda v: f"{v:.3g}")
    draw.text((4, pad_t - 6), label_y(y1), fill="black")
    draw.text((4, h - pad_b - 6), label_y(y0), fill="black")
    draw.text((pad_l, h - pad_b + 6), f"{x0:.3g}", fill="black")
    draw.text((w - pad_r - 40, h - pad_b + 6), f"{x1:.3g}", fill="black")
    if title:
        draw.text((pad_l, 8), title, fill="black")
    for k, (label, (x, y)) in enumerate(series.items()):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if log_y:
            y = np.log10(np.maximum(y, 1e-12))
        color = PALETTE[k % len(PALETTE)]
        pts = [to_px(a, b) for a, b in zip(x, y) if np.isfinite(b)]
        if len(pts) > 1:
            draw.line(pts, fill=color, width=2)
        elif pts:
            draw.point(pts, fill=color)
        draw.text((w - pad_r - 150, pad_t + 14 * k), label, fill=color)
    if marker_x is not None:
        px, _ = to_px(marker_x, y0)
        draw.line([(px, pad_t), (px, h - pad_b)], fill=(200, 0, 0))
        draw.text((px + 4, pad_t), f"{marker_x:.3g}", fill=(200, 0, 0))
    img.save(path)
    return Path(path)
