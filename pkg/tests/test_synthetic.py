import numpy as np
import pytest

from trajflow.episodes import split_past_pred
from trajflow.errors import ValidationError
from trajflow.scenemap import rasterize
from trajflow.synthetic import fork_mask, synth_fork


class TestSynthFork:
    def test_gt_waypoints_on_drivable(self):
        for ep in synth_fork(40, seed=0):
            for traj in ep.agents:
                _, offroad = rasterize(traj.xy, ep.road_mask)
                assert not offroad.any(), f"{ep.episode_id} agent {traj.agent_id}"

    def test_episode_structure(self):
        eps = synth_fork(10, seed=1)
        assert len(eps) == 10
        for ep in eps:
            ep.validate()
            assert 1 <= ep.n_agents <= 4
            assert np.allclose(ep.ego.xy[3], [0.0, 0.0])
            past, pred = split_past_pred(ep, ep.ego_agent_id)
            assert past.shape == (4, 2)
            assert pred.shape == (6, 2)

    def test_same_seed_identical(self):
        a = synth_fork(5, seed=7)
        b = synth_fork(5, seed=7)
        for ea, eb in zip(a, b):
            assert ea.episode_id == eb.episode_id
            assert np.array_equal(ea.road_mask.grid, eb.road_mask.grid)
            for ta, tb in zip(ea.agents, eb.agents):
                assert np.array_equal(ta.xy, tb.xy)

    def test_branch_choice_frequency(self):
        """Ego commits to a branch with probability one half."""
        eps = synth_fork(1000, seed=2)
        left = 0
        for ep in eps:
            final_x = ep.ego.xy[-1, 0] - ep.ego.xy[3, 0]
            left += final_x < 0
        assert 0.45 <= left / len(eps) <= 0.55

    def test_ego_clears_junction(self):
        """The ego's future always bends: straight-line error is large."""
        for ep in synth_fork(50, seed=3):
            past, pred = split_past_pred(ep, ep.ego_agent_id)
            vel = past[-1] - past[-2]
            straight = past[-1] + np.outer(np.arange(1, 7), vel)
            assert np.linalg.norm(straight[-1] - pred[-1]) > 0.5

    def test_needs_positive_n(self):
        with pytest.raises(ValidationError):
            synth_fork(0, seed=0)


def test_fork_mask_geometry():
    mask = fork_mask(np.zeros(2))
    h, w = mask.shape
    assert (h, w) == (224, 224)
    # junction area drivable, stem below, corners empty
    assert mask.grid[111, 111]
    assert mask.grid[160, 112]       # stem, ~24 m below center
    assert not mask.grid[0, 0]
    assert not mask.grid[0, 223]
    # branches reach up-left and up-right
    assert mask.grid[40, 40:80].any()
    assert mask.grid[40, 144:184].any()
