"""Episode data model and on-disk formats.

An episode is one 5-second window of a driving scene sampled at 2 Hz:
4 past frames (t = -3..0), 6 prediction frames (t = 1..6), every agent's
trajectory, and a binary road mask rasterized around the ego agent.

Positions are plain float arrays in meters. A trajectory stores one
``(T,)`` time-index array, a ``(T, 2)`` position array and a ``(T,)``
observed flag array. The grid convention, fixed here and used everywhere
else, maps the pixel ``(r, c)`` center to
``ego + ((c - (W-1)/2) * res, ((H-1)/2 - r) * res)`` meters: columns
point +x, rows point -y, and the ego present position sits at the grid
center.

File formats owned by this module:

* episode file -- JSON lines, one object per episode with fields
  ``id``, ``ego_agent_id``, ``agents`` (each ``{"id", "points"}`` where a
  point is ``[t, x, y, observed]``) and ``mask_file`` (path relative to
  the episode file).
* road mask -- binary PGM (P5), maxval 255, pixel 255 = drivable.
* prediction file -- JSON lines, one object per (episode, agent) with
  fields ``episode_id``, ``agent_id``, ``k`` and ``hypotheses`` (k lists
  of ``pred_len`` ``[x, y]`` pairs).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParseError, ValidationError

PAST_LEN = 4
PRED_LEN = 6
MASK_SIZE = 224
RESOLUTION = 0.5  # meters per pixel
MAX_COORD = 1e4   # meters


@dataclass(frozen=True)
class RoadMask:
    """Binary drivable-area raster centered on the ego present position."""

    grid: np.ndarray            # (H, W) bool, True = drivable
    resolution: float = RESOLUTION

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 2:
            raise ValidationError("road mask grid must be 2-D")
        if not grid.any():
            raise ValidationError("road mask has no drivable pixel")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def extent(self) -> tuple[float, float]:
        """Covered area in meters, (height, width)."""
        h, w = self.grid.shape
        return h * self.resolution, w * self.resolution

    def drivable_count(self) -> int:
        return int(self.grid.sum())


@dataclass
class Trajectory:
    """One agent's position sequence with per-frame observed flags."""

    agent_id: int
    times: np.ndarray      # (T,) int, strictly increasing
    xy: np.ndarray         # (T, 2) float meters
    observed: np.ndarray   # (T,) bool

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=int)
        self.xy = np.asarray(self.xy, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.xy.shape != (len(self.times), 2):
            raise ValidationError(
                f"trajectory for agent {self.agent_id}: xy shape {self.xy.shape} "
                f"does not match {len(self.times)} time indices")
        if self.observed.shape != (len(self.times),):
            raise ValidationError(
                f"trajectory for agent {self.agent_id}: observed flags misshaped")
        if len(self.times) > 1 and not (np.diff(self.times) > 0).all():
            raise ValidationError(
                f"trajectory for agent {self.agent_id}: time indices not strictly increasing")
        if not self.observed.any():
            raise ValidationError(
                f"trajectory for agent {self.agent_id}: no observed point")

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class Episode:
    """All agent trajectories plus the scene raster for one 5 s window."""

    episode_id: str
    agents: list[Trajectory]
    ego_agent_id: int
    present_index: int          # time index of t=0 (the 4th frame)
    road_mask: RoadMask
    past_len: int = PAST_LEN
    pred_len: int = PRED_LEN

    def agent(self, agent_id: int) -> Trajectory:
        for traj in self.agents:
            if traj.agent_id == agent_id:
                return traj
        raise KeyError(f"agent {agent_id} not in episode {self.episode_id}")

    @property
    def ego(self) -> Trajectory:
        return self.agent(self.ego_agent_id)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def validate(self) -> None:
        """Check every container invariant; raises ValidationError."""
        n_frames = self.past_len + self.pred_len
        ids = [t.agent_id for t in self.agents]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"episode {self.episode_id}: duplicate agent ids")
        if self.ego_agent_id not in ids:
            raise ValidationError(f"episode {self.episode_id}: ego agent absent")
        for traj in self.agents:
            if len(traj) != n_frames:
                raise ValidationError(
                    f"episode {self.episode_id}: agent {traj.agent_id} spans "
                    f"{len(traj)} frames, expected {n_frames}")
            if traj.times[self.past_len - 1] != self.present_index:
                raise ValidationError(
                    f"episode {self.episode_id}: agent {traj.agent_id} present "
                    f"frame is {traj.times[self.past_len - 1]}, expected "
                    f"{self.present_index}")
            if not np.isfinite(traj.xy).all():
                raise ValidationError(
                    f"episode {self.episode_id}: agent {traj.agent_id} has "
                    f"non-finite positions")
            if (np.abs(traj.xy) > MAX_COORD).any():
                raise ValidationError(
                    f"episode {self.episode_id}: agent {traj.agent_id} position "
                    f"exceeds {MAX_COORD} m")


@dataclass
class PredictionSet:
    """k sampled future hypotheses per agent for one episode."""

    episode_id: str
    hypotheses: dict[int, np.ndarray]   # agent_id -> (k, pred_len, 2)

    def __post_init__(self):
        lengths = set()
        ks = set()
        for aid, hyp in self.hypotheses.items():
            hyp = np.asarray(hyp, dtype=float)
            self.hypotheses[aid] = hyp
            if hyp.ndim != 3 or hyp.shape[2] != 2:
                raise ValidationError(
                    f"predictions for agent {aid}: expected (k, L, 2), got {hyp.shape}")
            ks.add(hyp.shape[0])
            lengths.add(hyp.shape[1])
        if len(ks) > 1 or len(lengths) > 1:
            raise ValidationError("hypothesis counts/lengths differ across agents")
        if ks and min(ks) < 1:
            raise ValidationError("k must be >= 1")

    @property
    def k(self) -> int:
        return next(iter(self.hypotheses.values())).shape[0]

    @property
    def agent_ids(self) -> list[int]:
        return list(self.hypotheses.keys())


# ---------------------------------------------------------------------------
# grid mapping

def world_to_pixel(xy, shape: tuple[int, int], resolution: float = RESOLUTION):
    """Map ego-frame meters to fractional (row, col) pixel coordinates.

    Vectorized: xy may be (2,) or (N, 2); output matches.
    """
    xy = np.asarray(xy, dtype=float)
    h, w = shape
    col = xy[..., 0] / resolution + (w - 1) / 2.0
    row = (h - 1) / 2.0 - xy[..., 1] / resolution
    return np.stack([row, col], axis=-1)


def pixel_to_world(rc, shape: tuple[int, int], resolution: float = RESOLUTION):
    """Inverse of :func:`world_to_pixel`."""
    rc = np.asarray(rc, dtype=float)
    h, w = shape
    x = (rc[..., 1] - (w - 1) / 2.0) * resolution
    y = ((h - 1) / 2.0 - rc[..., 0]) * resolution
    return np.stack([x, y], axis=-1)


# ---------------------------------------------------------------------------
# frame operations

def translate_episode(episode: Episode, offset) -> Episode:
    """Return a copy of the episode with all positions shifted by ``offset``."""
    offset = np.asarray(offset, dtype=float)
    agents = [replace(t, xy=t.xy + offset) for t in episode.agents]
    return replace(episode, agents=agents)


def to_ego_frame(episode: Episode) -> Episode:
    """Normalize so the ego agent sits at the origin at the present frame.

    Every agent is translated by the same offset, which keeps the mask
    convention (grid center = ego at t=0) consistent. Idempotent.
    """
    ego = episode.ego
    at_present = np.nonzero(ego.times == episode.present_index)[0]
    if len(at_present) == 0 or not ego.observed[at_present[0]]:
        raise ValidationError(
            f"episode {episode.episode_id}: ego agent unobserved at the present frame")
    origin = ego.xy[at_present[0]]
    return translate_episode(episode, -origin)


def split_past_pred(episode: Episode, agent_id: int):
    """Split an agent's trajectory into (past, pred) position arrays.

    Past covers t <= present (4 frames), pred covers t > present (6
    frames); concatenating the two reproduces the stored trajectory.
    """
    traj = episode.agent(agent_id)
    n_frames = episode.past_len + episode.pred_len
    if len(traj) != n_frames:
        raise ValidationError(
            f"agent {agent_id} spans {len(traj)} frames, expected {n_frames}")
    past_sel = traj.times <= episode.present_index
    past = traj.xy[past_sel]
    pred = traj.xy[~past_sel]
    if len(past) != episode.past_len or len(pred) != episode.pred_len:
        raise ValidationError(
            f"agent {agent_id}: past/pred split is ({len(past)}, {len(pred)}), "
            f"expected ({episode.past_len}, {episode.pred_len})")
    return past, pred


def restrict_to_nearest(episode: Episode, n_surrounding: int) -> Episode:
    """Keep the ego plus its ``n_surrounding`` nearest agents at t=0."""
    ego = episode.ego
    ego_pos = ego.xy[episode.past_len - 1]
    others = [t for t in episode.agents if t.agent_id != episode.ego_agent_id]
    dists = [np.linalg.norm(t.xy[episode.past_len - 1] - ego_pos) for t in others]
    order = np.argsort(dists, kind="stable")[:n_surrounding]
    kept = [ego] + [others[i] for i in order]
    return replace(episode, agents=kept)


# ---------------------------------------------------------------------------
# PGM road masks

def load_road_mask(path, expect_size: int | None = MASK_SIZE) -> RoadMask:
    """Read a binary (P5) PGM road mask; 255 = drivable."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise ParseError(f"{path}: expected maxval 255, got {maxval}")
    pos += 1  # single whitespace after maxval
    raster = np.frombuffer(data, dtype=np.uint8, count=height * width, offset=pos)
    if raster.size != height * width:
        raise ParseError(f"{path}: truncated raster")
    if expect_size is not None and (height != expect_size or width != expect_size):
        raise ParseError(
            f"{path}: mask dimension {height}x{width}, expected "
            f"{expect_size}x{expect_size}")
    grid = raster.reshape(height, width) == 255
    return RoadMask(grid)


def save_road_mask(mask: RoadMask, path) -> None:
    h, w = mask.shape
    raster = np.where(mask.grid, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(raster.tobytes())


# ---------------------------------------------------------------------------
# episode files

def _episode_to_record(episode: Episode, mask_file: str) -> dict:
    return {
        "id": episode.episode_id,
        "ego_agent_id": episode.ego_agent_id,
        "agents": [
            {
                "id": int(t.agent_id),
                "points": [
                    [int(ti), float(x), float(y), bool(ob)]
                    for ti, (x, y), ob in zip(t.times, t.xy, t.observed)
                ],
            }
            for t in episode.agents
        ],
        "mask_file": mask_file,
    }


def _record_to_episode(record: dict, base_dir: str, lineno: int, path) -> Episode:
    try:
        episode_id = str(record["id"])
        ego_agent_id = int(record["ego_agent_id"])
        mask_file = record["mask_file"]
        agents = []
        for entry in record["agents"]:
            points = entry["points"]
            times = [p[0] for p in points]
            xy = [[p[1], p[2]] for p in points]
            observed = [p[3] for p in points]
            agents.append(Trajectory(int(entry["id"]), times, xy, observed))
    except (KeyError, IndexError, TypeError) as exc:
        raise ParseError(f"{path}:{lineno}: malformed episode record ({exc})") from exc
    if not agents:
        raise ParseError(f"{path}:{lineno}: episode has no agents")
    n_frames = len(agents[0])
    if n_frames != PAST_LEN + PRED_LEN:
        raise ParseError(
            f"{path}:{lineno}: agents span {n_frames} frames, expected "
            f"{PAST_LEN + PRED_LEN}")
    present_index = int(agents[0].times[PAST_LEN - 1])
    mask = load_road_mask(os.path.join(base_dir, mask_file))
    episode = Episode(episode_id, agents, ego_agent_id, present_index, mask)
    try:
        episode.validate()
    except ValidationError as exc:
        raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return episode


def load_episodes(path) -> list[Episode]:
    """Load a JSON-lines episode file; order follows the file."""
    base_dir = os.path.dirname(os.path.abspath(path))
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            episodes.append(_record_to_episode(record, base_dir, lineno, path))
    return episodes


def save_episodes(episodes: list[Episode], path, mask_dir: str = "masks") -> None:
    """Write episodes as JSON lines; masks as PGM files under ``mask_dir``."""
    base_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(os.path.join(base_dir, mask_dir), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for episode in episodes:
            mask_file = os.path.join(mask_dir, f"{episode.episode_id}.pgm")
            save_road_mask(episode.road_mask, os.path.join(base_dir, mask_file))
            fh.write(json.dumps(_episode_to_record(episode, mask_file)) + "\n")


# ---------------------------------------------------------------------------
# prediction files

def load_predictions(path) -> list[PredictionSet]:
    """Load a JSON-lines prediction file, grouped per episode."""
    grouped: dict[str, dict[int, np.ndarray]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                eid = str(record["episode_id"])
                aid = int(record["agent_id"])
                hyp = np.asarray(record["hypotheses"], dtype=float)
                k = int(record["k"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed prediction record "
                                 f"({exc})") from exc
            if hyp.ndim != 3 or hyp.shape[0] != k or hyp.shape[2] != 2:
                raise ParseError(
                    f"{path}:{lineno}: hypotheses shape {hyp.shape} does not "
                    f"match k={k}")
            if eid not in grouped:
                grouped[eid] = {}
                order.append(eid)
            grouped[eid][aid] = hyp
    return [PredictionSet(eid, grouped[eid]) for eid in order]


def save_predictions(predictions: list[PredictionSet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pset in predictions:
            for aid, hyp in pset.hypotheses.items():
                record = {
                    "episode_id": pset.episode_id,
                    "agent_id": int(aid),
                    "k": int(hyp.shape[0]),
                    "hypotheses": [[[float(x), float(y)] for x, y in h] for h in hyp],
                }
                fh.write(json.dumps(record) + "\n")
