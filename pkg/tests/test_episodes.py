import json

import numpy as np
import pytest

from trajflow.episodes import (RoadMask, Trajectory, load_episodes,
                               load_predictions, load_road_mask,
                               pixel_to_world, restrict_to_nearest,
                               save_episodes, save_predictions,
                               save_road_mask, split_past_pred, to_ego_frame,
                               translate_episode, world_to_pixel,
                               PredictionSet)
from trajflow.errors import ParseError, ValidationError

from conftest import make_episode


class TestRoadMask:
    def test_requires_drivable_pixel(self):
        with pytest.raises(ValidationError):
            RoadMask(np.zeros((4, 4), dtype=bool))

    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        grid = rng.random((224, 224)) > 0.5
        grid[0, 0] = True
        mask = RoadMask(grid)
        path = tmp_path / "m.pgm"
        save_road_mask(mask, path)
        loaded = load_road_mask(path)
        assert np.array_equal(loaded.grid, grid)

    def test_wrong_dimension_rejected(self, tmp_path):
        mask = RoadMask(np.ones((16, 16), dtype=bool))
        path = tmp_path / "m.pgm"
        save_road_mask(mask, path)
        with pytest.raises(ParseError, match="dimension"):
            load_road_mask(path)
        assert load_road_mask(path, expect_size=None).shape == (16, 16)


class TestGridMapping:
    def test_center_pixel(self):
        rc = world_to_pixel(np.zeros(2), (224, 224), 0.5)
        assert np.allclose(rc, [111.5, 111.5])

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(-50, 50, size=(100, 2))
        rc = world_to_pixel(xy, (224, 224), 0.5)
        back = pixel_to_world(rc, (224, 224), 0.5)
        assert np.allclose(back, xy, atol=1e-12)

    def test_axes_orientation(self):
        # +x moves columns right, +y moves rows up
        rc = world_to_pixel(np.array([1.0, 0.0]), (224, 224), 0.5)
        assert rc[1] > 111.5 and rc[0] == 111.5
        rc = world_to_pixel(np.array([0.0, 1.0]), (224, 224), 0.5)
        assert rc[0] < 111.5 and rc[1] == 111.5


class TestEgoFrame:
    def test_translation(self):
        ep = make_episode()
        shifted = translate_episode(ep, [5.0, 3.0])
        normalized = to_ego_frame(shifted)
        assert np.allclose(normalized.ego.xy[3], [0.0, 0.0])
        other = normalized.agent(1)
        rel = shifted.agent(1).xy - shifted.ego.xy[3]
        assert np.allclose(other.xy, rel)

    def test_idempotent(self):
        ep = make_episode()
        once = to_ego_frame(ep)
        twice = to_ego_frame(once)
        for a, b in zip(once.agents, twice.agents):
            assert np.allclose(a.xy, b.xy)

    def test_inverse_restores_originals(self):
        ep = translate_episode(make_episode(), [17.25, -4.5])
        origin = ep.ego.xy[3].copy()
        normalized = to_ego_frame(ep)
        restored = translate_episode(normalized, origin)
        for a, b in zip(ep.agents, restored.agents):
            assert np.allclose(a.xy, b.xy, atol=1e-12)

    def test_unobserved_ego_rejected(self):
        ep = make_episode()
        ep.ego.observed[3] = False
        with pytest.raises(ValidationError):
            to_ego_frame(ep)


class TestSplitPastPred:
    def test_lengths(self):
        ep = make_episode()
        past, pred = split_past_pred(ep, 0)
        assert past.shape == (4, 2)
        assert pred.shape == (6, 2)

    def test_index_arithmetic(self):
        # frames 0..9 with present index 3: past is frames 0..3
        ep = make_episode()
        traj = ep.agent(0)
        past, _ = split_past_pred(ep, 0)
        assert np.allclose(past, traj.xy[:4])

    def test_partition(self):
        ep = make_episode()
        past, pred = split_past_pred(ep, 1)
        assert np.allclose(np.vstack([past, pred]), ep.agent(1).xy)

    def test_unknown_agent(self):
        ep = make_episode()
        with pytest.raises(KeyError):
            split_past_pred(ep, 99)


class TestEpisodeFiles:
    def test_count_preserved(self, tmp_path):
        eps = [make_episode(f"e{i}", seed=i) for i in range(2)]
        path = tmp_path / "episodes.jsonl"
        save_episodes(eps, path)
        assert len(load_episodes(path)) == 2

    def test_round_trip_identity(self, tmp_path):
        eps = [make_episode(f"e{i}", n_agents=3, seed=10 + i) for i in range(3)]
        path = tmp_path / "episodes.jsonl"
        save_episodes(eps, path)
        loaded = load_episodes(path)
        for orig, back in zip(eps, loaded):
            assert back.episode_id == orig.episode_id
            assert back.ego_agent_id == orig.ego_agent_id
            assert back.present_index == orig.present_index
            assert np.array_equal(back.road_mask.grid, orig.road_mask.grid)
            for a, b in zip(orig.agents, back.agents):
                assert a.agent_id == b.agent_id
                assert np.array_equal(a.times, b.times)
                assert np.array_equal(a.xy, b.xy)       # exact float round trip
                assert np.array_equal(a.observed, b.observed)

    def test_missing_ego_rejected(self, tmp_path):
        ep = make_episode()
        path = tmp_path / "episodes.jsonl"
        save_episodes([ep], path)
        lines = path.read_text().splitlines()
        record = json.loads(lines[0])
        record["ego_agent_id"] = 42
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(ParseError, match="ego agent absent"):
            load_episodes(path)

    def test_malformed_record_names_line(self, tmp_path):
        path = tmp_path / "episodes.jsonl"
        path.write_text('{"id": "x"}\n')
        with pytest.raises(ParseError, match=":1"):
            load_episodes(path)


class TestPredictions:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        pset = PredictionSet("e0", {0: rng.normal(size=(4, 6, 2)),
                                    1: rng.normal(size=(4, 6, 2))})
        path = tmp_path / "preds.jsonl"
        save_predictions([pset], path)
        loaded = load_predictions(path)
        assert len(loaded) == 1
        assert loaded[0].k == 4
        for aid in (0, 1):
            assert np.array_equal(loaded[0].hypotheses[aid],
                                  pset.hypotheses[aid])

    def test_k_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            PredictionSet("e0", {0: np.zeros((2, 6, 2)), 1: np.zeros((3, 6, 2))})


def test_restrict_to_nearest():
    ep = make_episode(n_agents=4)
    kept = restrict_to_nearest(ep, 1)
    assert kept.n_agents == 2
    assert kept.agents[0].agent_id == 0
    # agent 1 sits 2 m away, agents 2/3 further
    assert kept.agents[1].agent_id == 1


def test_validate_catches_bad_span():
    ep = make_episode()
    ep.agents[1] = Trajectory(1, np.arange(5), np.zeros((5, 2)),
                              np.ones(5, dtype=bool))
    with pytest.raises(ValidationError, match="spans"):
        ep.validate()
