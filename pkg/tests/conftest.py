import numpy as np
import pytest

from trajflow.episodes import Episode, RoadMask, Trajectory


def make_episode(episode_id="ep0", n_agents=2, seed=0, mask_size=224,
                 resolution=0.5, pred_len=6, speed=1.0, spacing=2.0):
    """Small hand-rolled episode: agents moving +x at constant speed."""
    rng = np.random.default_rng(seed)
    n_frames = 4 + pred_len
    agents = []
    for aid in range(n_agents):
        start = np.array([-3.0 * speed, aid * spacing])
        xy = start + np.outer(np.arange(n_frames), [speed, 0.0])
        xy = xy + rng.normal(0, 0.01, xy.shape)
        agents.append(Trajectory(aid, np.arange(n_frames), xy,
                                 np.ones(n_frames, dtype=bool)))
    # re-anchor so the ego sits at the origin at the present frame
    offset = agents[0].xy[3].copy()
    for traj in agents:
        traj.xy = traj.xy - offset
    grid = np.zeros((mask_size, mask_size), dtype=bool)
    grid[mask_size // 4: 3 * mask_size // 4, :] = True
    mask = RoadMask(grid, resolution)
    return Episode(episode_id, agents, ego_agent_id=0, present_index=3,
                   road_mask=mask, pred_len=pred_len)


@pytest.fixture
def episode():
    return make_episode()


@pytest.fixture
def micro_episode():
    """2 agents, 2-step horizon, 8x8 mask: the gradient-check config."""
    return make_episode("micro", n_agents=2, seed=3, mask_size=8,
                        pred_len=2, speed=0.12, spacing=0.8)
