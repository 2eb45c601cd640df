import numpy as np
import pytest

import trajflow.diffnet as dn
from trajflow.episodes import Episode, Trajectory
from trajflow.errors import ValidationError
from trajflow.model import (MICRO_CONFIG, DecoderState,
                            ModelConfig, build_scene_cache,
                            constant_velocity_baseline, decode_step,
                            encode_agents, init_params, log_density, rollout,
                            sample_k, scene_backbone)
from trajflow.scenemap import (build_scene_context, context_stats,
                               distance_transform, pool_context)

from conftest import make_episode

CFG = MICRO_CONFIG


def micro_ctx(episode, cfg=CFG):
    dist = distance_transform(episode.road_mask)
    ctx = build_scene_context(dist, context_stats([dist]))
    return pool_context(ctx, cfg.ctx_hw)


def micro_setup(episode, seed=0, mode="eval", cfg=CFG):
    params = init_params(cfg, seed)
    rng = np.random.default_rng(99)
    scene = scene_backbone(micro_ctx(episode, cfg), params, cfg, mode, rng)
    cache = build_scene_cache(scene, params, cfg)
    enc = encode_agents(episode, params, cfg)
    return params, cache, enc


class TestEncoder:
    def test_stationary_agent_matches_zero_sequence(self, micro_episode):
        params = init_params(CFG, 1)
        ep = micro_episode
        frozen = [Trajectory(t.agent_id, t.times,
                             np.tile(t.xy[3], (len(t), 1)), t.observed)
                  for t in ep.agents]
        ep_frozen = Episode("f", frozen, 0, ep.present_index, ep.road_mask,
                            pred_len=ep.pred_len)
        enc = encode_agents(ep_frozen, params, CFG)
        # differenced input is all zeros, so both agents share one encoding
        assert np.allclose(enc.h0[0].data, enc.h0[1].data)

    def test_single_agent_softmax_is_identity(self, micro_episode):
        ep = Episode("one", [micro_episode.agents[0]], 0,
                     micro_episode.present_index, micro_episode.road_mask,
                     pred_len=micro_episode.pred_len)
        params = init_params(CFG, 2)
        enc = encode_agents(ep, params, CFG)
        h0 = enc.h0[0]
        normed = dn.layer_norm(h0, params["enc.ln.gain"], params["enc.ln.bias"])
        v = dn.linear(normed, params["enc.v.W"], params["enc.v.b"])
        assert np.allclose(enc.h_tilde[0].data, h0.data + v.data, atol=1e-12)

    def test_permutation_equivariance(self):
        ep = make_episode("p", n_agents=3, seed=5, mask_size=8,
                          pred_len=2, speed=0.12, spacing=0.6)
        params = init_params(CFG, 3)
        enc = encode_agents(ep, params, CFG)
        permuted = Episode("pp", [ep.agents[2], ep.agents[0], ep.agents[1]],
                           ep.ego_agent_id, ep.present_index, ep.road_mask,
                           pred_len=ep.pred_len)
        enc_p = encode_agents(permuted, params, CFG)
        for aid in (0, 1, 2):
            assert np.allclose(enc.h_tilde[aid].data, enc_p.h_tilde[aid].data,
                               atol=1e-12)


class TestSceneBackbone:
    def test_default_table_shapes(self):
        cfg = ModelConfig()
        params = init_params(cfg, 0)
        ctx = np.zeros((64, 64, 3))
        scene = scene_backbone(ctx, params, cfg, mode="eval")
        assert scene.gamma_g.shape == (32, 32, 32)
        assert scene.gamma_l.shape == (100, 100, 6)

    def test_zero_input_zero_globals(self):
        cfg = ModelConfig()
        params = init_params(cfg, 0)
        scene = scene_backbone(np.zeros((64, 64, 3)), params, cfg, mode="eval")
        assert np.allclose(scene.gamma_g.data, 0.0)
        assert np.allclose(scene.gamma_l.data, 0.0)

    def test_eval_mode_bitwise_deterministic(self, micro_episode):
        params = init_params(CFG, 4)
        ctx = micro_ctx(micro_episode)
        a = scene_backbone(ctx, params, CFG, mode="eval")
        b = scene_backbone(ctx, params, CFG, mode="eval")
        assert np.array_equal(a.gamma_g.data, b.gamma_g.data)
        assert np.array_equal(a.gamma_l.data, b.gamma_l.data)

    def test_wrong_shape_rejected(self):
        params = init_params(CFG, 0)
        with pytest.raises(Exception):
            scene_backbone(np.zeros((5, 5, 3)), params, CFG, mode="eval")


class TestDecodeStep:
    def test_zero_noise_returns_mu(self, micro_episode):
        params, cache, enc = micro_setup(micro_episode)
        s0 = dn.DiffTensor(micro_episode.agent(0).xy[3])
        s_m1 = dn.DiffTensor(micro_episode.agent(0).xy[2])
        pos, _, step = decode_step([], DecoderState.initial(CFG), enc.h_tilde[0],
                                   cache, s0, s_m1, np.zeros(2), params, CFG)
        assert np.allclose(pos.data, step.mu.data, atol=1e-15)

    def test_verlet_constant_velocity(self, micro_episode):
        # alpha=1, mu_hat forced to 0: mu = 2*prev1 - prev2
        params, cache, enc = micro_setup(micro_episode)
        params["flow.fc3.W"].data[:] = 0.0
        params["flow.fc3.b"].data[:] = 0.0
        prev1 = dn.DiffTensor([0.4, 0.1])
        prev2 = dn.DiffTensor([0.3, 0.05])
        state = DecoderState.initial(CFG)
        state.t = 2  # one fake previous output supplied below
        pos, _, step = decode_step([prev1], state, enc.h_tilde[0], cache,
                                   dn.DiffTensor(prev2.data), prev2,
                                   np.zeros(2), params, CFG, alpha=1.0)
        expected = 2 * prev1.data - prev2.data
        assert np.allclose(step.mu.data, expected, atol=1e-12)
        assert np.allclose(step.sigma.data, np.eye(2))  # expm(0) = I

    def test_degraded_anchor_arithmetic(self, micro_episode):
        params, cache, enc = micro_setup(micro_episode)
        params["flow.fc3.W"].data[:] = 0.0
        params["flow.fc3.b"].data[:] = 0.0
        params["flow.fc3.b"].data[0] = 0.1  # mu_hat = (0.1, 0)
        state = DecoderState.initial(CFG)
        state.t = 2
        pos, _, step = decode_step(
            [dn.DiffTensor([2.0, 0.0])], state, enc.h_tilde[0], cache,
            dn.DiffTensor([1.0, 0.0]), dn.DiffTensor([1.0, 0.0]),
            np.zeros(2), params, CFG, alpha=0.5)
        assert np.allclose(step.mu.data, [2.6, 0.0], atol=1e-12)


class TestFlowCorrectness:
    def test_round_trip_recovers_noise(self, micro_episode):
        """Sampled positions fed back as GT reproduce the stored z draws."""
        params, cache, enc = micro_setup(micro_episode, seed=6)
        rng = np.random.default_rng(17)
        zs = {}
        sampled = {}
        for aid in enc.agent_ids:
            traj = micro_episode.agent(aid)
            s0 = dn.DiffTensor(traj.xy[3])
            s_m1 = dn.DiffTensor(traj.xy[2])
            state = DecoderState.initial(CFG)
            prev = []
            zs[aid] = []
            for t in range(CFG.pred_len):
                z = rng.standard_normal(2)
                pos, state, _ = decode_step(prev, state, enc.h_tilde[aid],
                                            cache, s0, s_m1, z, params, CFG)
                zs[aid].append(z)
                prev.append(pos)
            sampled[aid] = np.array([p.data for p in prev])
        # rebuild the episode with the samples as ground truth
        agents = []
        for traj in micro_episode.agents:
            xy = traj.xy.copy()
            xy[4:] = sampled[traj.agent_id]
            agents.append(Trajectory(traj.agent_id, traj.times, xy,
                                     traj.observed))
        ep2 = Episode("rt", agents, 0, micro_episode.present_index,
                      micro_episode.road_mask, pred_len=CFG.pred_len)
        params2, cache2, enc2 = micro_setup(ep2, seed=6)
        logq, steps = log_density(ep2, cache2, enc2, params2, CFG)
        for aid in enc2.agent_ids:
            for t in range(CFG.pred_len):
                assert np.allclose(steps[aid][t].z, zs[aid][t], atol=1e-8)

    def test_log_det_equals_trace(self, micro_episode):
        params, cache, enc = micro_setup(micro_episode, seed=7)
        _, steps = log_density(micro_episode, cache, enc, params, CFG)
        for aid, agent_steps in steps.items():
            for step in agent_steps:
                det = np.linalg.det(step.sigma.data)
                trace = np.trace(step.sigma_hat.data)
                assert abs(np.log(det) - trace) < 1e-10

    def test_density_matches_fd_jacobian_change_of_variable(self, micro_episode):
        """log q == log N(z) - log |det dg/dz| with an FD Jacobian of g."""
        params, cache, enc = micro_setup(micro_episode, seed=8)
        aid = 0
        traj = micro_episode.agent(aid)
        s0v, s_m1v = traj.xy[3], traj.xy[2]
        target = traj.xy[4]  # GT at t=1

        def g(z):
            pos, _, _ = decode_step([], DecoderState.initial(CFG),
                                    enc.h_tilde[aid], cache,
                                    dn.DiffTensor(s0v), dn.DiffTensor(s_m1v),
                                    z, params, CFG)
            return pos.data

        logq, steps = log_density(micro_episode, cache, enc, params, CFG)
        z = steps[aid][0].z
        h = 1e-6
        jac = np.zeros((2, 2))
        for j in range(2):
            dz = np.zeros(2)
            dz[j] = h
            jac[:, j] = (g(z + dz) - g(z - dz)) / (2 * h)
        log_norm = -np.log(2 * np.pi) - 0.5 * float(z @ z)
        expected = log_norm - np.log(abs(np.linalg.det(jac)))
        assert float(logq[aid][0].data) == pytest.approx(expected, abs=1e-5)

    def test_fitted_degenerate_density(self, micro_episode):
        """mu == target and sigma == I gives log q = -log(2 pi) per step."""
        params, cache, enc = micro_setup(micro_episode, seed=9)
        params["flow.fc3.W"].data[:] = 0.0
        params["flow.fc3.b"].data[:] = 0.0
        aid = 0
        traj = micro_episode.agent(aid)
        # future continues at exactly the alpha-damped velocity
        xy = traj.xy.copy()
        vel = xy[3] - xy[2]
        for t in range(4, len(xy)):
            xy[t] = xy[t - 1] + CFG.alpha * (xy[t - 1] - xy[t - 2])
        agents = [Trajectory(0, traj.times, xy, traj.observed)]
        ep = Episode("deg", agents, 0, micro_episode.present_index,
                     micro_episode.road_mask, pred_len=CFG.pred_len)
        enc2 = encode_agents(ep, params, CFG)
        logq, _ = log_density(ep, cache, enc2, params, CFG)
        for node in logq[0]:
            assert float(node.data) == pytest.approx(-np.log(2 * np.pi))


class TestSampling:
    def test_same_seed_identical(self, micro_episode):
        params = init_params(CFG, 10)
        ctx = micro_ctx(micro_episode)
        a = sample_k(micro_episode, ctx, params, CFG, k=3, seed=123)
        b = sample_k(micro_episode, ctx, params, CFG, k=3, seed=123)
        for aid in a.hypotheses:
            assert np.array_equal(a.hypotheses[aid], b.hypotheses[aid])

    def test_k_hypotheses(self, micro_episode):
        params = init_params(CFG, 11)
        preds = sample_k(micro_episode, micro_ctx(micro_episode), params, CFG,
                         k=12, seed=1)
        for hyp in preds.hypotheses.values():
            assert hyp.shape == (12, CFG.pred_len, 2)

    def test_k1_matches_single_rollout(self, micro_episode):
        params = init_params(CFG, 12)
        ctx = micro_ctx(micro_episode)
        preds = sample_k(micro_episode, ctx, params, CFG, k=1, seed=77)
        with dn.no_grad():
            scene = scene_backbone(ctx, params, CFG, mode="eval")
            cache = build_scene_cache(scene, params, CFG)
            enc = encode_agents(micro_episode, params, CFG)
            rng = np.random.default_rng(77)
            manual = rollout(micro_episode, cache, enc, params, CFG, rng)
        for aid in preds.hypotheses:
            rolled = np.array([p.data for p in manual[aid]])
            assert np.allclose(preds.hypotheses[aid][0], rolled, atol=1e-15)

    def test_k_must_be_positive(self, micro_episode):
        params = init_params(CFG, 13)
        with pytest.raises(ValidationError):
            sample_k(micro_episode, micro_ctx(micro_episode), params, CFG,
                     k=0, seed=0)


class TestBaseline:
    def test_constant_velocity_extrapolation(self, episode):
        preds = constant_velocity_baseline(episode)
        traj = episode.agent(0)
        vel = traj.xy[3] - traj.xy[2]
        expected = traj.xy[3] + np.outer(np.arange(1, 7), vel)
        assert np.allclose(preds.hypotheses[0][0], expected)


def test_checkpoint_restores_model(tmp_path, micro_episode):
    params = init_params(CFG, 21)
    ctx = micro_ctx(micro_episode)
    preds = sample_k(micro_episode, ctx, params, CFG, k=2, seed=5)
    path = tmp_path / "model.dfn"
    dn.save_checkpoint(params, path)
    fresh = init_params(CFG, 999)
    fresh.load_values(dn.load_checkpoint(path))
    preds2 = sample_k(micro_episode, ctx, fresh, CFG, k=2, seed=5)
    for aid in preds.hypotheses:
        assert np.array_equal(preds.hypotheses[aid], preds2.hypotheses[aid])
