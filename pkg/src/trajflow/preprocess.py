"""Trajectory conditioning: EM-fit Kalman smoothing and episode slicing.

Raw tracks come in noisy and gappy. Each track is smoothed independently
with a fixed-interval (RTS) Kalman smoother under the constant-velocity
linear model

    [x, y, z, vx, vy, vz]' = F [x, y, z, vx, vy, vz],
    F = [[I3, 0.5*I3], [0, I3]],

observing (x, y, z). The transition and emission matrices stay fixed;
EM re-estimates only the initial state (mean and covariance) and the two
noise covariances. Smoothed means fill missing frames, the z coordinate
is dropped, and a sliding 10-frame window turns dense scene tracks into
ego-normalized episodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .episodes import Episode, RoadMask, Trajectory, to_ego_frame
from .errors import NumericalFault, ParseError, ValidationError

STATE_DIM = 6
OBS_DIM = 3
COV_FLOOR = 1e-8

#: Constant-velocity transition: position picks up 0.5 * velocity per frame.
F_CV = np.block([
    [np.eye(3), 0.5 * np.eye(3)],
    [np.zeros((3, 3)), np.eye(3)],
])

#: Emission selects (x, y, z) from the state.
H_OBS = np.hstack([np.eye(3), np.zeros((3, 3))])


@dataclass(frozen=True)
class KalmanModel:
    """Constant-velocity state-space model with fitted noise parameters."""

    F: np.ndarray    # (6, 6) state transition, fixed
    Hm: np.ndarray   # (3, 6) emission, fixed
    Q: np.ndarray    # (6, 6) process covariance
    R: np.ndarray    # (3, 3) emission covariance
    m0: np.ndarray   # (6,) initial state mean
    P0: np.ndarray   # (6, 6) initial state covariance


@dataclass
class RawTrack:
    """One agent's raw observations: (t, x, y, z) plus observed flags."""

    agent_id: int
    times: np.ndarray      # (T,) int
    xyz: np.ndarray        # (T, 3) float
    observed: np.ndarray   # (T,) bool

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=int)
        self.xyz = np.asarray(self.xyz, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.xyz.shape != (len(self.times), 3):
            raise ValidationError(
                f"raw track {self.agent_id}: xyz shape {self.xyz.shape}")
        if self.observed.shape != (len(self.times),):
            raise ValidationError(f"raw track {self.agent_id}: flag shape mismatch")

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())


def _symmetrize_clip(matrix: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize and clip eigenvalues from below (PSD fallback)."""
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() >= floor:
        return sym
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def _initial_model(track: RawTrack) -> KalmanModel:
    obs_idx = np.nonzero(track.observed)[0]
    first = track.xyz[obs_idx[0]]
    if len(obs_idx) > 1:
        nxt = obs_idx[1]
        gap = track.times[nxt] - track.times[obs_idx[0]]
        # invert the 0.5 position/velocity coupling of F_CV
        vel = (track.xyz[nxt] - first) / (0.5 * gap)
    else:
        vel = np.zeros(3)
    m0 = np.concatenate([first, vel])
    return KalmanModel(F_CV.copy(), H_OBS.copy(), np.eye(STATE_DIM),
                       np.eye(OBS_DIM), m0, np.eye(STATE_DIM))


def _filter(track: RawTrack, model: KalmanModel):
    """Forward Kalman filter; skips the correction on missing frames.

    Returns (pred_means, pred_covs, filt_means, filt_covs, loglik) where
    loglik is the observed-data log-likelihood.
    """
    n = len(track.times)
    F, H, Q, R = model.F, model.Hm, model.Q, model.R
    pred_m = np.zeros((n, STATE_DIM))
    pred_p = np.zeros((n, STATE_DIM, STATE_DIM))
    filt_m = np.zeros((n, STATE_DIM))
    filt_p = np.zeros((n, STATE_DIM, STATE_DIM))
    loglik = 0.0
    for t in range(n):
        if t == 0:
            pred_m[t] = model.m0
            pred_p[t] = model.P0
        else:
            pred_m[t] = F @ filt_m[t - 1]
            pred_p[t] = F @ filt_p[t - 1] @ F.T + Q
            pred_p[t] = 0.5 * (pred_p[t] + pred_p[t].T)
        if track.observed[t]:
            innov = track.xyz[t] - H @ pred_m[t]
            s = H @ pred_p[t] @ H.T + R
            s = 0.5 * (s + s.T)
            sign, logdet = np.linalg.slogdet(s)
            if sign <= 0:
                raise NumericalFault(
                    f"singular innovation covariance at frame {track.times[t]}")
            s_inv_innov = np.linalg.solve(s, innov)
            loglik += -0.5 * (OBS_DIM * np.log(2 * np.pi) + logdet
                              + innov @ s_inv_innov)
            gain = np.linalg.solve(s, H @ pred_p[t]).T
            filt_m[t] = pred_m[t] + gain @ innov
            filt_p[t] = pred_p[t] - gain @ H @ pred_p[t]
            filt_p[t] = 0.5 * (filt_p[t] + filt_p[t].T)
        else:
            filt_m[t] = pred_m[t]
            filt_p[t] = pred_p[t]
    return pred_m, pred_p, filt_m, filt_p, loglik


def _rts_smooth(model: KalmanModel, pred_m, pred_p, filt_m, filt_p):
    """Backward Rauch-Tung-Striebel pass.

    Returns (smoothed_means, smoothed_covs, lag_one_covs) where
    lag_one_covs[t] = Cov(x_t, x_{t-1} | all observations), t >= 1.
    """
    n = len(filt_m)
    F = model.F
    sm_m = np.zeros_like(filt_m)
    sm_p = np.zeros_like(filt_p)
    gains = np.zeros((n - 1, STATE_DIM, STATE_DIM)) if n > 1 else np.zeros((0, STATE_DIM, STATE_DIM))
    sm_m[-1] = filt_m[-1]
    sm_p[-1] = filt_p[-1]
    for t in range(n - 2, -1, -1):
        gain = np.linalg.solve(pred_p[t + 1], F @ filt_p[t]).T
        gains[t] = gain
        sm_m[t] = filt_m[t] + gain @ (sm_m[t + 1] - pred_m[t + 1])
        sm_p[t] = filt_p[t] + gain @ (sm_p[t + 1] - pred_p[t + 1]) @ gain.T
        sm_p[t] = 0.5 * (sm_p[t] + sm_p[t].T)
    lag_one = np.zeros((n, STATE_DIM, STATE_DIM))
    for t in range(1, n):
        lag_one[t] = sm_p[t] @ gains[t - 1].T
    return sm_m, sm_p, lag_one


def loglik(track: RawTrack, model: KalmanModel) -> float:
    """Observed-data log-likelihood of a track under the model."""
    return _filter(track, model)[4]


def _em_iterate(track: RawTrack, model: KalmanModel) -> KalmanModel:
    """One E-step plus M-step; only m0, P0, Q, R are re-estimated."""
    pred_m, pred_p, filt_m, filt_p, _ = _filter(track, model)
    sm_m, sm_p, lag_one = _rts_smooth(model, pred_m, pred_p, filt_m, filt_p)
    n = len(track.times)
    F, H = model.F, model.Hm

    m0 = sm_m[0]
    p0 = _symmetrize_clip(sm_p[0], 0.0)

    q_acc = np.zeros((STATE_DIM, STATE_DIM))
    for t in range(1, n):
        err = sm_m[t] - F @ sm_m[t - 1]
        cross = lag_one[t] @ F.T
        q_acc += (np.outer(err, err) + sm_p[t] + F @ sm_p[t - 1] @ F.T
                  - cross - cross.T)
    q = _symmetrize_clip(q_acc / max(n - 1, 1), COV_FLOOR)

    r_acc = np.zeros((OBS_DIM, OBS_DIM))
    n_obs = 0
    for t in range(n):
        if track.observed[t]:
            resid = track.xyz[t] - H @ sm_m[t]
            r_acc += np.outer(resid, resid) + H @ sm_p[t] @ H.T
            n_obs += 1
    r = _symmetrize_clip(r_acc / n_obs, COV_FLOOR)

    return replace(model, Q=q, R=r, m0=m0, P0=p0)


def em_fit(track: RawTrack, iters: int = 10) -> KalmanModel:
    """Fit initial state and noise covariances by EM.

    The transition and emission matrices stay fixed at the
    constant-velocity model; the observed-data log-likelihood is
    non-decreasing over iterations (a standard EM guarantee, kept within
    numerical tolerance by the PSD clip fallback).
    """
    model, _ = em_fit_path(track, iters)
    return model


def em_fit_path(track: RawTrack, iters: int = 10):
    """Like :func:`em_fit` but also returns the log-likelihood sequence.

    The returned array has ``iters + 1`` entries: the likelihood of the
    initial model followed by the likelihood after each EM iteration.
    """
    if track.n_observed < 2:
        raise ValidationError(
            f"track {track.agent_id}: EM needs at least 2 observed points")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    model = _initial_model(track)
    logliks = [loglik(track, model)]
    for _ in range(iters):
        model = _em_iterate(track, model)
        logliks.append(loglik(track, model))
    return model, np.array(logliks)


def smooth_impute(track: RawTrack, model: KalmanModel) -> Trajectory:
    """Filter, smooth, and impute a track into a dense (x, y) trajectory.

    Missing frames take the smoothed state means; the z coordinate is
    carried through the smoother and dropped at the end.
    """
    pred_m, pred_p, filt_m, filt_p, _ = _filter(track, model)
    sm_m, _, _ = _rts_smooth(model, pred_m, pred_p, filt_m, filt_p)
    xy = sm_m[:, :2].copy()
    observed = np.ones(len(track.times), dtype=bool)
    return Trajectory(track.agent_id, track.times.copy(), xy, observed)


# ---------------------------------------------------------------------------
# episode slicing

def extract_snippets(scene_tracks: list[Trajectory], mask_source,
                     ego_agent_id: int, stride: int = 1,
                     max_snippets: int = 30, scene_id: str = "scene"):
    """Slice dense scene tracks into ego-normalized 10-frame episodes.

    ``mask_source`` is called with the ego position at each window's
    present frame and must return the :class:`RoadMask` centered there
    (see :class:`WorldMask`). Agents missing any frame of a window are
    dropped from that episode. Windows without the ego agent or without
    any agent are skipped and counted.

    Returns (episodes, skip_report).
    """
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    from .episodes import PAST_LEN, PRED_LEN
    window = PAST_LEN + PRED_LEN
    all_times = np.unique(np.concatenate([t.times for t in scene_tracks]))
    skip_report = {"no_ego": 0, "no_agents": 0}
    episodes = []
    start_times = [int(t) for t in all_times if t + window - 1 <= all_times[-1]]
    count = 0
    for start in start_times[::stride]:
        if count >= max_snippets:
            break
        frames = np.arange(start, start + window)
        members = []
        for traj in scene_tracks:
            sel = np.isin(traj.times, frames)
            if sel.sum() != window:
                continue
            members.append(Trajectory(traj.agent_id, traj.times[sel],
                                      traj.xy[sel], traj.observed[sel]))
        ids = {t.agent_id for t in members}
        if not members:
            skip_report["no_agents"] += 1
            continue
        if ego_agent_id not in ids:
            skip_report["no_ego"] += 1
            continue
        present = int(frames[PAST_LEN - 1])
        ego = next(t for t in members if t.agent_id == ego_agent_id)
        ego_pos = ego.xy[np.nonzero(ego.times == present)[0][0]]
        mask = mask_source(ego_pos)
        episode = Episode(f"{scene_id}-{start:04d}", members, ego_agent_id,
                          present, mask)
        episodes.append(to_ego_frame(episode))
        count += 1
    return episodes, skip_report


class WorldMask:
    """World-anchored drivable raster that crops ego-centered windows."""

    def __init__(self, grid: np.ndarray, origin, resolution: float = 0.5,
                 window: int = 224):
        self.grid = np.asarray(grid, dtype=bool)
        self.origin = np.asarray(origin, dtype=float)  # world xy of grid center
        self.resolution = resolution
        self.window = window

    def window_at(self, center_xy) -> RoadMask:
        """Crop a ``window``-sized mask centered at a world position."""
        h, w = self.grid.shape
        rel = np.asarray(center_xy, dtype=float) - self.origin
        cc = rel[0] / self.resolution + (w - 1) / 2.0
        cr = (h - 1) / 2.0 - rel[1] / self.resolution
        half = self.window / 2.0
        out = np.zeros((self.window, self.window), dtype=bool)
        r0 = int(np.floor(cr - half + 0.5))
        c0 = int(np.floor(cc - half + 0.5))
        src_r = slice(max(r0, 0), min(r0 + self.window, h))
        src_c = slice(max(c0, 0), min(c0 + self.window, w))
        dst_r = slice(src_r.start - r0, src_r.stop - r0)
        dst_c = slice(src_c.start - c0, src_c.stop - c0)
        out[dst_r, dst_c] = self.grid[src_r, src_c]
        return RoadMask(out, self.resolution)


# ---------------------------------------------------------------------------
# raw-track files

def load_raw_tracks(path) -> list[RawTrack]:
    """Read a JSON-lines raw-track file: (agent_id, [t, x, y, z, observed])."""
    tracks = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                aid = int(record["agent_id"])
                points = record["points"]
                times = [p[0] for p in points]
                xyz = [[p[1], p[2], p[3]] for p in points]
                observed = [bool(p[4]) for p in points]
            except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed raw track ({exc})") from exc
            tracks.append(RawTrack(aid, times, xyz, observed))
    return tracks


def save_raw_tracks(tracks: list[RawTrack], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for track in tracks:
            record = {
                "agent_id": int(track.agent_id),
                "points": [
                    [int(t), float(x), float(y), float(z), bool(ob)]
                    for t, (x, y, z), ob in zip(track.times, track.xyz, track.observed)
                ],
            }
            fh.write(json.dumps(record) + "\n")
