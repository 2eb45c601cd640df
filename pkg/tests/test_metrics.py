import numpy as np
import pytest

from trajflow.episodes import PredictionSet, RoadMask
from trajflow.errors import ValidationError
from trajflow.metrics import (dac, dao, displacement_errors, evaluate,
                              offroad_waypoint_fraction, rf)

from conftest import make_episode


def straight_episode():
    """Deterministic straight-line episode for hand-computed fixtures."""
    ep = make_episode("fix", n_agents=1, seed=0)
    traj = ep.agent(0)
    traj.xy = np.outer(np.arange(-3, 7), [1.0, 0.0]).astype(float)
    return ep


def offset_hypotheses(gt, offsets):
    """One hypothesis per offset: GT shifted in +y."""
    return np.stack([gt + np.array([0.0, dy]) for dy in offsets])


class TestDisplacementErrors:
    def test_exact_hypothesis_is_zero(self):
        ep = straight_episode()
        gt = ep.agent(0).xy[4:]
        preds = PredictionSet("fix", {0: gt[None]})
        out = displacement_errors(preds, ep)[0]
        assert out == (0.0, 0.0, 0.0, 0.0)

    def test_hand_computed_fixture(self):
        """Offsets 0.1 and 1.0 in y: minADE 0.1, avgADE 0.55, same FDEs."""
        ep = straight_episode()
        gt = ep.agent(0).xy[4:]
        preds = PredictionSet("fix", {0: offset_hypotheses(gt, [0.1, 1.0])})
        min_ade, avg_ade, min_fde, avg_fde = displacement_errors(preds, ep)[0]
        assert min_ade == pytest.approx(0.1)
        assert avg_ade == pytest.approx(0.55)
        assert min_fde == pytest.approx(0.1)
        assert avg_fde == pytest.approx(0.55)

    def test_hypothesis_permutation_invariant(self):
        ep = straight_episode()
        gt = ep.agent(0).xy[4:]
        a = PredictionSet("fix", {0: offset_hypotheses(gt, [0.1, 1.0, -0.4])})
        b = PredictionSet("fix", {0: offset_hypotheses(gt, [1.0, -0.4, 0.1])})
        assert displacement_errors(a, ep)[0] == displacement_errors(b, ep)[0]

    def test_length_mismatch(self):
        ep = straight_episode()
        preds = PredictionSet("fix", {0: np.zeros((1, 4, 2))})
        with pytest.raises(ValidationError):
            displacement_errors(preds, ep)


class TestRF:
    def test_reported_ratio(self):
        # published reporting example: avgFDE 2.996 over minFDE 1.171
        assert rf(2.996, 1.171) == pytest.approx(2.558, abs=5e-4)

    def test_identical_hypotheses_unity(self):
        assert rf(1.5, 1.5) == pytest.approx(1.0, rel=1e-8)

    def test_degenerate_zero_over_zero(self):
        assert rf(0.0, 0.0) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            min_fde = rng.uniform(0.1, 10.0)
            avg_fde = min_fde * rng.uniform(1.0, 5.0)
            c = rng.uniform(0.1, 100.0)
            assert rf(c * avg_fde, c * min_fde) == pytest.approx(
                rf(avg_fde, min_fde), rel=1e-6)


class TestDAO:
    def _mask_with(self, n_drivable):
        grid = np.zeros((224, 224), dtype=bool)
        grid.ravel()[:n_drivable] = True
        return RoadMask(grid, 0.5)

    def test_hand_computed_normalization(self):
        """3 unique drivable pixels over 60 drivable: 0.05 -> 500."""
        grid = np.zeros((224, 224), dtype=bool)
        grid[100, 100:160] = True   # 60 drivable pixels
        mask = RoadMask(grid, 0.5)
        # hit three distinct pixels in that row (y for row 100, x per column)
        y = (111.5 - 100) * 0.5
        xs = [(c - 111.5) * 0.5 for c in (110, 120, 130)]
        hyp = np.array([[[x, y] for x in xs] for _ in range(2)])  # k=2 duplicates
        preds = PredictionSet("e", {0: hyp})
        assert dao(preds, mask)[0] == pytest.approx(500.0)

    def test_all_offroad_is_zero(self):
        mask = self._mask_with(10)
        hyp = np.full((3, 6, 2), 40.0)   # off in a corner without drivable
        preds = PredictionSet("e", {0: hyp})
        assert dao(preds, mask)[0] == 0.0

    def test_paper_reporting_rule(self):
        # raw ratio 0.002262 scales to 22.62
        assert 0.002262 * 10_000 == pytest.approx(22.62)

    def test_duplicate_hypotheses_invariant(self):
        rng = np.random.default_rng(1)
        mask = RoadMask(rng.random((224, 224)) > 0.3, 0.5)
        base = rng.uniform(-30, 30, size=(4, 6, 2))
        preds_a = PredictionSet("e", {0: base})
        preds_b = PredictionSet("e", {0: np.concatenate([base, base])})
        assert dao(preds_a, mask)[0] == dao(preds_b, mask)[0]


class TestDAC:
    def _half_mask(self):
        grid = np.zeros((224, 224), dtype=bool)
        grid[:, :112] = True
        return RoadMask(grid, 0.5)

    def test_one_offender_of_four(self):
        mask = self._half_mask()
        good = np.full((6, 2), [-20.0, 0.0])
        bad = np.full((6, 2), [20.0, 0.0])
        hyp = np.stack([good, good, good, bad])
        assert dac(PredictionSet("e", {0: hyp}), mask)[0] == 0.75

    def test_all_good(self):
        mask = self._half_mask()
        hyp = np.full((5, 6, 2), [-20.0, 0.0])
        assert dac(PredictionSet("e", {0: hyp}), mask)[0] == 1.0

    def test_all_leave_map(self):
        mask = self._half_mask()
        hyp = np.full((5, 6, 2), [500.0, 0.0])
        assert dac(PredictionSet("e", {0: hyp}), mask)[0] == 0.0

    def test_monotone_in_offending_waypoints(self):
        """Moving one more waypoint off-road never raises DAC."""
        mask = self._half_mask()
        rng = np.random.default_rng(2)
        for _ in range(1000):
            k = int(rng.integers(1, 6))
            hyp = np.full((k, 6, 2), [-20.0, 0.0])
            n_bad = int(rng.integers(0, k + 1))
            hyp[:n_bad, 0] = [20.0, 0.0]
            value = dac(PredictionSet("e", {0: hyp}), mask)[0]
            assert value == pytest.approx((k - n_bad) / k)
            if n_bad < k:
                hyp[n_bad, 0] = [20.0, 0.0]
                worse = dac(PredictionSet("e", {0: hyp}), mask)[0]
                assert worse <= value


class TestMinMaxInvariants:
    def test_min_never_exceeds_avg(self):
        rng = np.random.default_rng(3)
        ep = straight_episode()
        gt = ep.agent(0).xy[4:]
        for _ in range(200):
            k = int(rng.integers(1, 8))
            hyp = gt[None] + rng.normal(0, 1.0, size=(k, 6, 2))
            out = displacement_errors(PredictionSet("fix", {0: hyp}), ep)[0]
            assert out[0] <= out[1] + 1e-12
            assert out[2] <= out[3] + 1e-12


class TestEvaluate:
    def _corpus(self, n_surrounding):
        eps, psets = [], []
        for i, extra in enumerate(n_surrounding):
            ep = make_episode(f"e{i}", n_agents=1 + extra, seed=i)
            hyp = {t.agent_id: np.stack([ep.agent(t.agent_id).xy[4:] + 0.3,
                                         ep.agent(t.agent_id).xy[4:] + 0.5])
                   for t in ep.agents}
            eps.append(ep)
            psets.append(PredictionSet(f"e{i}", hyp))
        return eps, psets

    def test_single_episode_matches_per_agent(self):
        eps, psets = self._corpus([0])
        report, _ = evaluate(eps, psets)
        row = report.per_agent[0]
        assert report.min_ade == row["minADE"]
        assert report.dac == row["DAC"]

    def test_corpus_means_match_hand_totals(self):
        eps, psets = self._corpus([0, 1, 2])
        report, _ = evaluate(eps, psets)
        assert report.min_ade == pytest.approx(
            np.mean([r["minADE"] for r in report.per_agent]), abs=1e-12)
        assert report.rf == pytest.approx(
            np.mean([r["rF"] for r in report.per_agent]), abs=1e-12)

    def test_k_reported(self):
        eps, psets = self._corpus([1])
        report, _ = evaluate(eps, psets)
        assert report.k == 2

    def test_unmatched_prediction_rejected(self):
        eps, psets = self._corpus([0])
        psets[0].episode_id = "nope"
        with pytest.raises(ValidationError, match="unknown episode"):
            evaluate(eps, psets)

    def test_ri_bucketing(self):
        eps, psets = self._corpus([1, 3, 5, 10, 10])
        _, ri = evaluate(eps, psets)
        assert set(ri.min_fde) == {1, 3, 5, 10}
        assert np.isfinite(ri.min_fde[10])
        assert np.isfinite(ri.ri)

    def test_ri_empty_bucket_is_nan(self):
        eps, psets = self._corpus([1, 1])
        _, ri = evaluate(eps, psets)
        assert np.isnan(ri.min_fde[10])
        assert np.isnan(ri.ri)

    def test_report_table_column_order(self):
        eps, psets = self._corpus([0])
        report, _ = evaluate(eps, psets)
        header = report.to_table().splitlines()[0].split()
        assert header == ["minADE", "minFDE", "rF", "DAO", "DAC"]

    def test_report_csv_has_corpus_row(self):
        eps, psets = self._corpus([0, 1])
        report, _ = evaluate(eps, psets)
        lines = report.to_csv().strip().splitlines()
        assert lines[-1].startswith("corpus,mean")


def test_offroad_waypoint_fraction():
    grid = np.zeros((224, 224), dtype=bool)
    grid[:, :112] = True
    mask = RoadMask(grid, 0.5)
    hyp = np.full((2, 6, 2), [-20.0, 0.0])
    hyp[1, :3] = [20.0, 0.0]     # 3 of 12 waypoints off-road
    assert offroad_waypoint_fraction(PredictionSet("e", {0: hyp}), mask) == 0.25
