"""Static figure rendering: map prior brightness plus trajectory overlays."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .episodes import Episode, PredictionSet, split_past_pred, world_to_pixel
from .scenemap import PTilde

PAST_COLOR = (60, 220, 60)       # past trajectory
GT_COLOR = (230, 60, 60)         # ground-truth future
HYPOTHESIS_COLOR = (70, 130, 255)
UPSCALE = 4


def _brightness(p: PTilde) -> np.ndarray:
    """Monotone map of log-density to 0..255 grayscale."""
    lp = p.log_prob
    lo, hi = lp.min(), lp.max()
    if hi - lo < 1e-300:
        return np.full(lp.shape, 255, dtype=np.uint8)
    return np.round((lp - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _paint(canvas: np.ndarray, points: np.ndarray, color, shape, resolution):
    h, w = shape
    rc = world_to_pixel(points.reshape(-1, 2), shape, resolution)
    rows = np.floor(rc[:, 0] + 0.5).astype(int)
    cols = np.floor(rc[:, 1] + 0.5).astype(int)
    keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    canvas[rows[keep], cols[keep]] = color


def render(episode: Episode, p_tilde: PTilde,
           predictions: PredictionSet | None = None) -> np.ndarray:
    """Compose the RGB figure array (native grid resolution)."""
    gray = _brightness(p_tilde)
    canvas = np.stack([gray, gray, gray], axis=-1)
    shape = p_tilde.shape
    res = p_tilde.resolution
    if predictions is not None:
        for hyp in predictions.hypotheses.values():
            _paint(canvas, hyp, HYPOTHESIS_COLOR, shape, res)
    for traj in episode.agents:
        past, pred = split_past_pred(episode, traj.agent_id)
        _paint(canvas, pred, GT_COLOR, shape, res)
        _paint(canvas, past, PAST_COLOR, shape, res)
    return canvas


def plot(episode: Episode, p_tilde: PTilde, predictions, out_path) -> None:
    """Write the figure as a PNG, upscaled x4 nearest-neighbor.

    Output bytes are deterministic for fixed inputs.
    """
    canvas = render(episode, p_tilde, predictions)
    image = Image.fromarray(canvas, mode="RGB")
    h, w = canvas.shape[:2]
    image = image.resize((w * UPSCALE, h * UPSCALE), Image.NEAREST)
    image.save(out_path, format="PNG")
