"""Drivable-area map products: distance transform, map prior, scene context.

The binary road mask feeds three consumers. The exact Euclidean distance
transform turns it into a smooth "how far off the road" field. A softmax
over the max-subtracted, standardized field gives the map prior -- a
probability grid that is uniform and maximal on drivable pixels and
decays with distance off-road -- whose bilinear log-density lookup is
differentiable in the query position. The same field plus pixel-index
and center-distance channels forms the 3-channel scene context consumed
by the convolutional backbone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .episodes import RoadMask, world_to_pixel
from .errors import ValidationError

_INF = 1e20


@dataclass(frozen=True)
class DistanceMap:
    """Euclidean pixel distance to the nearest drivable pixel (0 on road)."""

    grid: np.ndarray          # (H, W) float64
    resolution: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class PTilde:
    """Map prior over the pixel grid with a consistent log-density view."""

    prob: np.ndarray          # (H, W), sums to 1
    log_prob: np.ndarray      # (H, W), log of prob
    norm_stats: tuple[float, float]
    resolution: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.prob.shape


@dataclass(frozen=True)
class SceneContext:
    """Standardized (H, W, 3) model input built from the distance map.

    Channels: 0 = distance-transform field, 1 = row-major pixel index
    scaled to [0, 1], 2 = Euclidean pixel distance to the grid center.
    """

    grid: np.ndarray          # (H, W, 3) float64
    stats: np.ndarray         # (3, 2) per-channel (mean, std) used
    resolution: float


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas: 1-D squared-distance transform."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=int)
    z = np.empty(n + 1)
    z[0] = -_INF
    z[1] = _INF
    k = 0
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def _column_pass(grid: np.ndarray) -> np.ndarray:
    """Squared distance to the nearest drivable pixel within each column.

    Binary input lets the column stage run as two vectorized scans
    (down, then up) instead of the parabola envelope.
    """
    h, w = grid.shape
    run = np.full(w, _INF)
    down = np.empty((h, w))
    for r in range(h):
        run = np.where(grid[r], 0.0, np.minimum(run + 1.0, _INF))
        down[r] = run
    run = np.full(w, _INF)
    for r in range(h - 1, -1, -1):
        run = np.where(grid[r], 0.0, np.minimum(run + 1.0, _INF))
        down[r] = np.minimum(down[r], run)
    return np.minimum(down * down, _INF)


def distance_transform(mask: RoadMask) -> DistanceMap:
    """Exact Euclidean distance transform of the drivable-area mask.

    Two-pass squared-distance algorithm: a vertical nearest-pixel scan
    per column, then the 1-D parabola-envelope transform across every
    row of the intermediate field. Exact for any mask, not a chamfer
    approximation.
    """
    grid = mask.grid
    if not grid.any():
        raise ValidationError("distance transform needs at least one drivable pixel")
    sq = _column_pass(grid)
    for r in range(sq.shape[0]):
        sq[r, :] = _edt_1d(sq[r, :])
    return DistanceMap(np.sqrt(sq), mask.resolution)


def value_field(dist: DistanceMap) -> np.ndarray:
    """Max-subtracted distance field: maximal and equal on drivable pixels."""
    return dist.grid.max() - dist.grid


def value_stats(dists: list[DistanceMap]) -> tuple[float, float]:
    """Mean/std of the max-subtracted field over a training corpus."""
    values = np.concatenate([value_field(d).ravel() for d in dists])
    std = float(values.std())
    return float(values.mean()), (std if std > 0 else 1.0)


def build_p_tilde(dist: DistanceMap, norm_stats: tuple[float, float]) -> PTilde:
    """Softmax the standardized max-subtracted distance field into a prior.

    Drivable pixels all carry the field maximum, so they share the
    grid's largest probability; off-road probability decays with the
    distance from the drivable area.
    """
    mean, std = float(norm_stats[0]), float(norm_stats[1])
    if not (np.isfinite(mean) and np.isfinite(std)) or std <= 0:
        raise ValidationError(f"invalid normalization stats ({mean}, {std})")
    v = (value_field(dist) - mean) / std
    shifted = v - v.max()
    log_z = np.log(np.exp(shifted).sum())
    log_prob = shifted - log_z
    return PTilde(np.exp(log_prob), log_prob, (mean, std), dist.resolution)


def log_p_tilde_at(p: PTilde, pos):
    """Bilinear log-density and its gradient w.r.t. the position in meters.

    Raises ValidationError when the position falls outside the grid;
    callers that need a total function use
    :func:`log_p_tilde_with_penalty`.
    """
    rc = world_to_pixel(np.asarray(pos, dtype=float), p.shape, p.resolution)
    h, w = p.shape
    if not (0.0 <= rc[0] <= h - 1 and 0.0 <= rc[1] <= w - 1):
        raise ValidationError(f"position {pos} maps outside the grid at {rc}")
    value, grad_rc = _bilinear_with_grad(p.log_prob, rc)
    # d(col)/dx = 1/res, d(row)/dy = -1/res
    grad_xy = np.array([grad_rc[1] / p.resolution, -grad_rc[0] / p.resolution])
    return value, grad_xy


def log_p_tilde_with_penalty(p: PTilde, pos):
    """Total log-density: off-grid queries pay the grid minimum minus the
    pixel-space overshoot, so the penalty keeps growing (and its gradient
    keeps pointing back toward the map) beyond the edge.

    Returns (value, grad_xy, inside_flag).
    """
    rc = world_to_pixel(np.asarray(pos, dtype=float), p.shape, p.resolution)
    h, w = p.shape
    if 0.0 <= rc[0] <= h - 1 and 0.0 <= rc[1] <= w - 1:
        value, grad_xy = log_p_tilde_at(p, pos)
        return value, grad_xy, True
    clamped = np.array([np.clip(rc[0], 0.0, h - 1), np.clip(rc[1], 0.0, w - 1)])
    delta = rc - clamped
    overshoot = float(np.hypot(delta[0], delta[1]))
    d_over_drc = delta / overshoot
    grad_xy = -np.array([d_over_drc[1] / p.resolution, -d_over_drc[0] / p.resolution])
    return float(p.log_prob.min()) - overshoot, grad_xy, False


def _bilinear_with_grad(grid: np.ndarray, rc):
    """2x2 bilinear interpolation with the gradient w.r.t. (row, col)."""
    h, w = grid.shape
    r0 = min(int(np.floor(rc[0])), h - 2) if h > 1 else 0
    c0 = min(int(np.floor(rc[1])), w - 2) if w > 1 else 0
    fr = rc[0] - r0
    fc = rc[1] - c0
    g00 = grid[r0, c0]
    g01 = grid[r0, min(c0 + 1, w - 1)]
    g10 = grid[min(r0 + 1, h - 1), c0]
    g11 = grid[min(r0 + 1, h - 1), min(c0 + 1, w - 1)]
    top = g00 * (1 - fc) + g01 * fc
    bot = g10 * (1 - fc) + g11 * fc
    value = top * (1 - fr) + bot * fr
    d_dr = bot - top
    d_dc = (g01 - g00) * (1 - fr) + (g11 - g10) * fr
    return float(value), np.array([d_dr, d_dc])


def context_stats(dists: list[DistanceMap]) -> np.ndarray:
    """Per-channel (mean, std) of the raw scene-context channels."""
    raws = [_raw_context(d) for d in dists]
    stacked = np.concatenate([r.reshape(-1, 3) for r in raws], axis=0)
    means = stacked.mean(axis=0)
    stds = stacked.std(axis=0)
    stds[stds <= 0] = 1.0
    return np.stack([means, stds], axis=1)


def _raw_context(dist: DistanceMap) -> np.ndarray:
    h, w = dist.shape
    rows, cols = np.mgrid[0:h, 0:w]
    idx = (rows * w + cols).astype(float)
    idx /= max(h * w - 1, 1)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    radial = np.hypot(rows - center[0], cols - center[1])
    return np.stack([dist.grid, idx, radial], axis=-1)


def build_scene_context(dist: DistanceMap, dataset_stats) -> SceneContext:
    """Standardize the 3 raw channels by per-channel dataset statistics."""
    stats = np.asarray(dataset_stats, dtype=float)
    if stats.shape != (3, 2) or not np.isfinite(stats).all() or (stats[:, 1] <= 0).any():
        raise ValidationError(f"invalid context stats {stats!r}")
    raw = _raw_context(dist)
    grid = (raw - stats[:, 0]) / stats[:, 1]
    return SceneContext(grid, stats, dist.resolution)


def pool_context(ctx: SceneContext, out_size: int = 64) -> np.ndarray:
    """Area-average the context down to ``out_size`` per side.

    Fractional bin edges are handled exactly (224 -> 64 averages 3.5 x
    3.5 input regions), so drivable geometry survives at the coarser
    resolution.
    """
    h, w, _ = ctx.grid.shape
    if h == out_size and w == out_size:
        return ctx.grid.copy()
    wr = _area_weights(h, out_size)
    wc = _area_weights(w, out_size)
    rows_pooled = np.tensordot(wr, ctx.grid, axes=(1, 0))        # (O, W, C)
    return np.tensordot(rows_pooled, wc, axes=(1, 1)).transpose(0, 2, 1)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic matrix of exact box-average weights."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                weights[o, i] = overlap / scale
    return weights


def rasterize(points, mask: RoadMask):
    """Map waypoints to their nearest pixels (round half up on row/col).

    Returns the unique pixel set and a per-point flag that is True when
    the point is off-grid or lands on a non-drivable pixel.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    h, w = mask.shape
    rc = world_to_pixel(points, mask.shape, mask.resolution)
    rows = np.floor(rc[:, 0] + 0.5).astype(int)
    cols = np.floor(rc[:, 1] + 0.5).astype(int)
    off_grid = (rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)
    offroad = off_grid.copy()
    pixels = set()
    for i in range(len(points)):
        if off_grid[i]:
            continue
        pixels.add((int(rows[i]), int(cols[i])))
        if not mask.grid[rows[i], cols[i]]:
            offroad[i] = True
    return pixels, offroad


# ---------------------------------------------------------------------------
# raw grid files (.dist / .ptilde)

def save_grid(grid: np.ndarray, path) -> None:
    """Write a float32 raster with an 8-byte (H, W) uint32 header, LE."""
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(grid.astype("<f4").tobytes())


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ValidationError(f"{path}: truncated grid header")
        h, w = struct.unpack("<II", header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w:
        raise ValidationError(f"{path}: grid payload size mismatch")
    return data.reshape(h, w).astype(np.float64)
