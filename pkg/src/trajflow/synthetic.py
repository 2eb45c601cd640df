"""Synthetic Y-fork scenario generator for desk-scale experiments.

Each episode is built around the same world geometry: a straight stem
road running +y that splits at the origin into two branches at +-30
degrees. Agents approach along the stem at constant speed with a small
lateral offset and per-waypoint jitter, then commit to one branch with
probability 1/2. The road mask is rasterized in the ego frame, so every
ground-truth waypoint lands on a drivable pixel by construction.
"""

from __future__ import annotations

import numpy as np

from .episodes import (MASK_SIZE, PAST_LEN, PRED_LEN, RESOLUTION, Episode,
                       RoadMask, Trajectory, to_ego_frame)
from .errors import ValidationError

STEM_LENGTH = 60.0        # meters of stem below the junction
BRANCH_LENGTH = 45.0
BRANCH_ANGLE = np.deg2rad(30.0)
HALF_WIDTH = 4.0          # road half width
THROAT_RADIUS = 12.0      # paved junction pad around the fork point
MAX_OFFSET = 1.2          # lateral offset from the centerline
JITTER_STD = 0.12
JITTER_CLIP = 0.25
SPEED_RANGE = (2.0, 3.5)  # meters per frame (0.5 s)

_BRANCH_DIRS = {
    -1: np.array([-np.sin(BRANCH_ANGLE), np.cos(BRANCH_ANGLE)]),
    +1: np.array([np.sin(BRANCH_ANGLE), np.cos(BRANCH_ANGLE)]),
}


def _fork_segments():
    """(start, end) pairs of the stem and both branch centerlines."""
    segments = [(np.array([0.0, -STEM_LENGTH]), np.array([0.0, 0.0]))]
    for direction in _BRANCH_DIRS.values():
        segments.append((np.array([0.0, 0.0]), direction * BRANCH_LENGTH))
    return segments


def _segment_distance(points: np.ndarray, seg_start, seg_end) -> np.ndarray:
    d = seg_end - seg_start
    length_sq = float(d @ d)
    t = np.clip(((points - seg_start) @ d) / length_sq, 0.0, 1.0)
    closest = seg_start + t[:, None] * d
    return np.linalg.norm(points - closest, axis=1)


def fork_mask(ego_position, size: int = MASK_SIZE,
              resolution: float = RESOLUTION) -> RoadMask:
    """Rasterize the fork's drivable area in the ego-centered frame.

    Drivable = within the half width of the stem or either branch
    centerline, or inside the paved throat around the fork point (the
    wedge between branches only opens beyond the throat).
    """
    half = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size]
    x = (cols.ravel() - half) * resolution + ego_position[0]
    y = (half - rows.ravel()) * resolution + ego_position[1]
    points = np.stack([x, y], axis=1)
    dist = np.full(len(points), np.inf)
    for seg_start, seg_end in _fork_segments():
        dist = np.minimum(dist, _segment_distance(points, seg_start, seg_end))
    drivable = dist <= HALF_WIDTH
    drivable |= np.hypot(points[:, 0], points[:, 1]) <= THROAT_RADIUS
    return RoadMask(drivable.reshape(size, size), resolution)


def _walk_path(start_y: float, offset: float, speed: float, branch: int,
               rng: np.random.Generator) -> np.ndarray:
    """Noisy constant-speed walk along the stem-then-branch centerline.

    Arc length keeps every centerline point exactly on the fork
    skeleton; the lateral offset is applied perpendicular to the local
    direction and the jitter is clipped, so offset + jitter stays well
    inside the half width and every waypoint is drivable.
    """
    n_frames = PAST_LEN + PRED_LEN
    positions = np.zeros((n_frames, 2))
    for i in range(n_frames):
        s = start_y + (i - (PAST_LEN - 1)) * speed
        if s <= 0.0:
            center = np.array([0.0, s])
            direction = np.array([0.0, 1.0])
        else:
            direction = _BRANCH_DIRS[branch]
            center = direction * s
        perp = np.array([direction[1], -direction[0]])
        jitter = np.clip(rng.normal(0.0, JITTER_STD, 2),
                         -JITTER_CLIP, JITTER_CLIP)
        positions[i] = center + perp * offset + jitter
    return positions


def synth_fork(n: int, seed: int, max_agents: int = 4) -> list[Episode]:
    """Generate ``n`` ego-normalized fork episodes; deterministic in seed."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    episodes = []
    for i in range(n):
        n_agents = int(rng.integers(1, max_agents + 1))
        agents = []
        for aid in range(n_agents):
            speed = rng.uniform(*SPEED_RANGE)
            offset = rng.uniform(-MAX_OFFSET, MAX_OFFSET)
            if aid == 0:
                # the ego always clears the junction with frames to spare
                start_y = rng.uniform(-3.5 * speed, -0.5 * speed)
            else:
                start_y = rng.uniform(-14.0, -2.0)
            branch = -1 if rng.random() < 0.5 else 1
            xy = _walk_path(start_y, offset, speed, branch, rng)
            agents.append(Trajectory(aid, np.arange(PAST_LEN + PRED_LEN), xy,
                                     np.ones(PAST_LEN + PRED_LEN, dtype=bool)))
        ego_present = agents[0].xy[PAST_LEN - 1]
        episode = Episode(f"fork-{i:05d}", agents, ego_agent_id=0,
                          present_index=PAST_LEN - 1,
                          road_mask=fork_mask(ego_present))
        episodes.append(to_ego_frame(episode))
    return episodes
