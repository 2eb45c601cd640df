"""Encoder-decoder forecaster with a constrained affine flow head.

The encoder first-differences each agent's past, embeds it, runs an
LSTM, and fuses the per-agent summaries with scaled dot-product
self-attention. The decoder walks the prediction horizon one step at a
time: a GRU over the flattened previous outputs drives additive
attention over the global scene feature, a bilinear gather pulls the
local feature at the last position, and a small FC stack emits the
6-vector that becomes the step's affine flow: sigma from a 2x2 matrix
exponential, mu anchored to a velocity extrapolation damped by the
degradation coefficient alpha. Sampling pushes standard normal draws
through the flow; density evaluation inverts it with the conditioning
context teacher-forced to ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet as dn
from .episodes import Episode, PredictionSet, split_past_pred
from .errors import NumericalFault, ShapeError, ValidationError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ModelConfig:
    """Network sizes; defaults follow the reference hyperparameters."""

    past_len: int = 4
    pred_len: int = 6
    embed_dim: int = 128      # trajectory embedding / LSTM input
    lstm_hidden: int = 128    # agent summary and q/k/v width
    gru_hidden: int = 150     # decoder recurrence
    attn2_dim: int = 150      # additive-attention score space
    ctx_hw: int = 64          # pooled scene-context side
    conv1_ch: int = 16
    gg_ch: int = 32           # global feature channels
    gl_ch: int = 6            # local feature channels
    gl_hw: int = 100          # local feature side
    gl_extent: float = 112.0  # meters covered by the local feature
    local_fc: int = 50
    flow_fc: int = 50
    alpha: float = 0.5        # velocity-prior degradation coefficient
    dropout_p: float = 0.5

    @property
    def gg_hw(self) -> int:
        return self.ctx_hw // 2

    @property
    def flat_slots(self) -> int:
        return 2 * self.pred_len


#: Reduced configuration for gradient checking and fast tests.
MICRO_CONFIG = ModelConfig(
    past_len=4, pred_len=2, embed_dim=6, lstm_hidden=6, gru_hidden=5,
    attn2_dim=5, ctx_hw=8, conv1_ch=2, gg_ch=3, gl_ch=2, gl_hw=6,
    gl_extent=4.0, local_fc=4, flow_fc=4)


def init_params(cfg: ModelConfig, seed: int) -> dn.ParamStore:
    """Create and initialize every parameter and batch-norm buffer."""
    store = dn.ParamStore(seed)
    store.add("enc.embed.W", (2, cfg.embed_dim))
    store.add("enc.embed.b", (cfg.embed_dim,), "zeros")
    store.add("enc.lstm.Wx", (cfg.embed_dim, 4 * cfg.lstm_hidden))
    store.add("enc.lstm.Wh", (cfg.lstm_hidden, 4 * cfg.lstm_hidden))
    store.add("enc.lstm.b", (4 * cfg.lstm_hidden,), "zeros")
    store.add("enc.ln.gain", (cfg.lstm_hidden,), "ones")
    store.add("enc.ln.bias", (cfg.lstm_hidden,), "zeros")
    for name in ("q", "k", "v"):
        store.add(f"enc.{name}.W", (cfg.lstm_hidden, cfg.lstm_hidden))
        store.add(f"enc.{name}.b", (cfg.lstm_hidden,), "zeros")

    convs = [("conv1", 3, 3, cfg.conv1_ch), ("conv2", 3, cfg.conv1_ch, cfg.conv1_ch),
             ("conv3", 5, cfg.conv1_ch, cfg.gg_ch), ("conv4", 1, cfg.gg_ch, cfg.gl_ch)]
    for name, k, cin, cout in convs:
        store.add(f"cnn.{name}.K", (k, k, cin, cout))
        store.add(f"cnn.{name}.b", (cout,), "zeros")
        bn = name.replace("conv", "bn")
        store.add(f"cnn.{bn}.gain", (cout,), "ones")
        store.add(f"cnn.{bn}.shift", (cout,), "zeros")
        store.add_buffer(f"cnn.{bn}.mean", np.zeros(cout))
        store.add_buffer(f"cnn.{bn}.var", np.ones(cout))

    store.add("dec.gru.Wx", (cfg.flat_slots, 3 * cfg.gru_hidden))
    store.add("dec.gru.Wh", (cfg.gru_hidden, 3 * cfg.gru_hidden))
    store.add("dec.gru.bx", (3 * cfg.gru_hidden,), "zeros")
    store.add("dec.gru.bh", (3 * cfg.gru_hidden,), "zeros")
    store.add("dec.fh.W", (cfg.gru_hidden, cfg.attn2_dim))
    store.add("dec.fh.b", (cfg.attn2_dim,), "zeros")
    store.add("dec.fgamma.W", (cfg.gg_ch, cfg.attn2_dim))
    store.add("dec.fgamma.b", (cfg.attn2_dim,), "zeros")
    store.add("dec.score.w", (cfg.attn2_dim,))
    store.add("loc.fc1.W", (cfg.lstm_hidden + cfg.gl_ch, cfg.local_fc))
    store.add("loc.fc1.b", (cfg.local_fc,), "zeros")
    store.add("loc.fc2.W", (cfg.local_fc, cfg.local_fc))
    store.add("loc.fc2.b", (cfg.local_fc,), "zeros")
    store.add("flow.fc1.W", (cfg.gg_ch + cfg.gru_hidden + cfg.local_fc, cfg.flow_fc))
    store.add("flow.fc1.b", (cfg.flow_fc,), "zeros")
    store.add("flow.fc2.W", (cfg.flow_fc, cfg.flow_fc))
    store.add("flow.fc2.b", (cfg.flow_fc,), "zeros")
    store.add("flow.fc3.W", (cfg.flow_fc, 6))
    store.add("flow.fc3.b", (6,), "zeros")
    return store


# ---------------------------------------------------------------------------
# encoder

@dataclass
class AgentEncoding:
    """Per-agent trajectory summaries before/after interaction fusion."""

    agent_ids: list[int]
    h0: dict[int, dn.DiffTensor]
    h_tilde: dict[int, dn.DiffTensor]


def encode_agents(episode: Episode, params: dn.ParamStore,
                  cfg: ModelConfig) -> AgentEncoding:
    """Trajectory encoding plus the cross-agent interaction block."""
    h0 = {}
    for traj in episode.agents:
        past, _ = split_past_pred(episode, traj.agent_id)
        if len(past) != cfg.past_len:
            raise ValidationError(
                f"agent {traj.agent_id} has {len(past)} past frames, "
                f"needs {cfg.past_len}")
        diffs = np.vstack([np.zeros(2), np.diff(past, axis=0)])
        h = dn.DiffTensor(np.zeros(cfg.lstm_hidden))
        c = dn.DiffTensor(np.zeros(cfg.lstm_hidden))
        for step in diffs:
            emb = dn.linear(dn.DiffTensor(step), params["enc.embed.W"],
                            params["enc.embed.b"])
            h, c = dn.lstm_cell(emb, h, c, params["enc.lstm.Wx"],
                                params["enc.lstm.Wh"], params["enc.lstm.b"])
        h0[traj.agent_id] = h

    qs, ks, vs = {}, {}, {}
    for aid, h in h0.items():
        normed = dn.layer_norm(h, params["enc.ln.gain"], params["enc.ln.bias"])
        qs[aid] = dn.linear(normed, params["enc.q.W"], params["enc.q.b"])
        ks[aid] = dn.linear(normed, params["enc.k.W"], params["enc.k.b"])
        vs[aid] = dn.linear(normed, params["enc.v.W"], params["enc.v.b"])
    ids = [t.agent_id for t in episode.agents]
    key_stack = dn.stack_rows([ks[a] for a in ids])
    value_stack = dn.stack_rows([vs[a] for a in ids])
    h_tilde = {}
    for aid in ids:
        attended = dn.scaled_dot_attention(qs[aid], key_stack, value_stack)
        h_tilde[aid] = dn.add(h0[aid], attended)
    return AgentEncoding(ids, h0, h_tilde)


# ---------------------------------------------------------------------------
# scene backbone

@dataclass
class SceneFeatures:
    """Backbone outputs: global grid, local grid, and local metric extent."""

    gamma_g: dn.DiffTensor    # (gg_hw, gg_hw, gg_ch)
    gamma_l: dn.DiffTensor    # (gl_hw, gl_hw, gl_ch)
    local_extent: float


def scene_backbone(ctx64, params: dn.ParamStore, cfg: ModelConfig,
                   mode: str = "eval",
                   rng: np.random.Generator | None = None) -> SceneFeatures:
    """Convolutional stack over the pooled scene context.

    Every convolution is same-padded and followed by batch norm and
    ReLU; the global head applies dropout (train mode only) and the
    local head is upsampled bilinearly.
    """
    x = dn.as_tensor(ctx64)
    if x.shape != (cfg.ctx_hw, cfg.ctx_hw, 3):
        raise ShapeError(
            f"scene context shape {x.shape}, expected ({cfg.ctx_hw}, {cfg.ctx_hw}, 3)")
    if mode == "train" and rng is None:
        raise ValidationError("train-mode backbone needs an rng for dropout")

    def block(inp, name):
        bn = name.replace("conv", "bn")
        conv = dn.conv2d(inp, params[f"cnn.{name}.K"], params[f"cnn.{name}.b"])
        normed = dn.batch_norm2d(conv, params[f"cnn.{bn}.gain"],
                                 params[f"cnn.{bn}.shift"],
                                 params.buffers[f"cnn.{bn}.mean"],
                                 params.buffers[f"cnn.{bn}.var"], mode)
        return dn.relu(normed)

    c1 = block(x, "conv1")
    c2 = block(c1, "conv2")
    p2 = dn.maxpool2x2(c2)
    c3 = block(p2, "conv3")
    c4 = block(c3, "conv4")
    gamma_g = dn.dropout(c3, cfg.dropout_p, rng, mode)
    gamma_l = dn.upsample_bilinear(c4, (cfg.gl_hw, cfg.gl_hw))
    return SceneFeatures(gamma_g, gamma_l, cfg.gl_extent)


@dataclass
class SceneCache:
    """Per-episode decoder inputs hoisted out of the step loop."""

    gg_flat: dn.DiffTensor    # (P, gg_ch)
    f_grid: dn.DiffTensor     # (P, attn2_dim) projected global feature
    gamma_l: dn.DiffTensor


def build_scene_cache(scene: SceneFeatures, params: dn.ParamStore,
                      cfg: ModelConfig) -> SceneCache:
    gg_flat = dn.reshape(scene.gamma_g, (cfg.gg_hw * cfg.gg_hw, cfg.gg_ch))
    f_grid = dn.linear(gg_flat, params["dec.fgamma.W"], params["dec.fgamma.b"])
    return SceneCache(gg_flat, f_grid, scene.gamma_l)


# ---------------------------------------------------------------------------
# decoder

@dataclass
class DecoderState:
    """Recurrent decoder state; zeros before the first step."""

    h_hat: dn.DiffTensor
    t: int = 1
    gamma_tilde: dn.DiffTensor | None = None
    lc: dn.DiffTensor | None = None

    @classmethod
    def initial(cls, cfg: ModelConfig) -> "DecoderState":
        return cls(dn.DiffTensor(np.zeros(cfg.gru_hidden)))


@dataclass
class FlowStep:
    """Affine flow parameters for one decode step."""

    mu_hat: dn.DiffTensor     # (2,)
    sigma_hat: dn.DiffTensor  # (2, 2)
    mu: dn.DiffTensor         # (2,)
    sigma: dn.DiffTensor      # (2, 2)
    z: np.ndarray             # (2,)
    alpha: float


def _grid_coords(xy, cfg: ModelConfig):
    """Meters -> fractional (row, col) on the local feature grid."""
    px_per_m = cfg.gl_hw / cfg.gl_extent
    center = (cfg.gl_hw - 1) / 2.0
    x = dn.slice_vec(xy, 0, 1)
    y = dn.slice_vec(xy, 1, 2)
    row = dn.affine_const(y, -px_per_m, center)
    col = dn.affine_const(x, px_per_m, center)
    return dn.concat([row, col])


def _flow_params(prev, state: DecoderState, h_tilde, cache: SceneCache,
                 s0, s_m1, params: dn.ParamStore, cfg: ModelConfig,
                 alpha: float):
    """Shared context -> (mu, sigma, flat 6-vector, new state).

    ``prev`` holds the conditioning positions for steps 1..t-1 (nodes or
    constants); the present and t=-1 positions anchor the first steps.
    """
    t = state.t
    flat_parts = list(prev)
    pad = cfg.flat_slots - 2 * len(prev)
    if pad > 0:
        flat_parts.append(dn.DiffTensor(np.zeros(pad)))
    flat = dn.concat(flat_parts) if len(flat_parts) > 1 else flat_parts[0]
    h_hat = dn.gru_cell(flat, state.h_hat, params["dec.gru.Wx"],
                        params["dec.gru.Wh"], params["dec.gru.bx"],
                        params["dec.gru.bh"])

    fh = dn.linear(h_hat, params["dec.fh.W"], params["dec.fh.b"])
    alpha_map = dn.additive_attention(fh, cache.f_grid, params["dec.score.w"])
    gamma_tilde = dn.attention_pool(cache.gg_flat, alpha_map)

    anchor1 = prev[-1] if prev else s0
    anchor2 = prev[-2] if len(prev) >= 2 else (s0 if prev else s_m1)
    gathered = dn.bilinear_sample(cache.gamma_l, _grid_coords(anchor1, cfg))
    loc_in = dn.concat([h_tilde, gathered])
    lc = dn.softplus(dn.linear(loc_in, params["loc.fc1.W"], params["loc.fc1.b"]))
    lc = dn.softplus(dn.linear(lc, params["loc.fc2.W"], params["loc.fc2.b"]))

    gc = dn.concat([gamma_tilde, h_hat, lc])
    u = dn.softplus(dn.linear(gc, params["flow.fc1.W"], params["flow.fc1.b"]))
    u = dn.tanh(dn.linear(u, params["flow.fc2.W"], params["flow.fc2.b"]))
    out6 = dn.linear(u, params["flow.fc3.W"], params["flow.fc3.b"])

    mu_hat = dn.slice_vec(out6, 0, 2)
    sigma_hat = dn.reshape(dn.slice_vec(out6, 2, 6), (2, 2))
    sigma = dn.expm2x2(sigma_hat)
    velocity = dn.scale(dn.sub(anchor1, anchor2), alpha)
    mu = dn.add(dn.add(anchor1, velocity), mu_hat)
    if not np.isfinite(mu.data).all() or not np.isfinite(sigma.data).all():
        raise NumericalFault(f"non-finite flow parameters at decode step {t}")
    new_state = DecoderState(h_hat, t + 1, gamma_tilde, lc)
    return mu, sigma, mu_hat, sigma_hat, out6, new_state


def decode_step(prev, state: DecoderState, h_tilde, cache: SceneCache,
                s0, s_m1, z_t, params: dn.ParamStore, cfg: ModelConfig,
                alpha: float | None = None):
    """One sampling step: push z_t through the step's affine flow.

    Returns (position node, new state, FlowStep).
    """
    alpha = cfg.alpha if alpha is None else alpha
    if state.t > cfg.pred_len:
        raise ValidationError(f"decode step {state.t} beyond horizon {cfg.pred_len}")
    z_t = np.asarray(z_t, dtype=np.float64)
    mu, sigma, mu_hat, sigma_hat, _, new_state = _flow_params(
        prev, state, h_tilde, cache, s0, s_m1, params, cfg, alpha)
    position = dn.add(dn.matvec(sigma, dn.DiffTensor(z_t)), mu)
    return position, new_state, FlowStep(mu_hat, sigma_hat, mu, sigma, z_t, alpha)


def _density_step(prev, state, h_tilde, cache, s0, s_m1, target,
                  params, cfg, alpha):
    """One teacher-forced step: invert the flow at the target position.

    Returns (log-density node, recovered z node, new state, FlowStep).
    """
    mu, sigma, mu_hat, sigma_hat, out6, new_state = _flow_params(
        prev, state, h_tilde, cache, s0, s_m1, params, cfg, alpha)
    det = float(sigma.data[0, 0] * sigma.data[1, 1]
                - sigma.data[0, 1] * sigma.data[1, 0])
    if abs(det) < 1e-300:
        raise NumericalFault(f"singular flow scale at decode step {state.t}")
    z = dn.matvec(dn.inverse2x2(sigma), dn.sub(target, mu))
    # log q = log N(z; 0, I) - log|det sigma|, and log|det expm(M)| = tr M
    trace = dn.vsum(dn.concat([dn.slice_vec(out6, 2, 3), dn.slice_vec(out6, 5, 6)]))
    quad = dn.scale(dn.vsum(dn.mul(z, z)), -0.5)
    const = dn.DiffTensor(np.asarray(-LOG_2PI))
    logq = dn.add(dn.add(quad, dn.scale(trace, -1.0)), const)
    step = FlowStep(mu_hat, sigma_hat, mu, sigma, z.data.copy(), alpha)
    return logq, z, new_state, step


def _agent_anchors(episode: Episode, agent_id: int):
    past, pred = split_past_pred(episode, agent_id)
    s0 = dn.DiffTensor(past[-1])
    s_m1 = dn.DiffTensor(past[-2])
    return past, pred, s0, s_m1


def log_density(episode: Episode, cache: SceneCache, enc: AgentEncoding,
                params: dn.ParamStore, cfg: ModelConfig,
                alpha: float | None = None):
    """Teacher-forced log q of the ground-truth future, per agent/step.

    Conditioning at step t (GRU input, local gather, velocity anchor)
    uses the ground-truth positions for steps 1..t-1. Returns
    ``(logq, steps)`` where ``logq[agent_id]`` is the list of per-step
    scalar nodes.
    """
    alpha = cfg.alpha if alpha is None else alpha
    logq: dict[int, list] = {}
    steps: dict[int, list[FlowStep]] = {}
    for aid in enc.agent_ids:
        _, pred, s0, s_m1 = _agent_anchors(episode, aid)
        if len(pred) != cfg.pred_len:
            raise ValidationError(
                f"agent {aid}: {len(pred)} prediction frames, expected {cfg.pred_len}")
        state = DecoderState.initial(cfg)
        prev: list = []
        logq[aid] = []
        steps[aid] = []
        for t in range(cfg.pred_len):
            target = dn.DiffTensor(pred[t])
            node, _, state, step = _density_step(
                prev, state, enc.h_tilde[aid], cache, s0, s_m1, target,
                params, cfg, alpha)
            logq[aid].append(node)
            steps[aid].append(step)
            prev.append(dn.DiffTensor(pred[t]))
    return logq, steps


def rollout(episode: Episode, cache: SceneCache, enc: AgentEncoding,
            params: dn.ParamStore, cfg: ModelConfig,
            rng: np.random.Generator, alpha: float | None = None):
    """Sample one future per agent; returns position nodes per agent."""
    alpha = cfg.alpha if alpha is None else alpha
    sampled: dict[int, list] = {}
    for aid in enc.agent_ids:
        _, _, s0, s_m1 = _agent_anchors(episode, aid)
        state = DecoderState.initial(cfg)
        prev: list = []
        sampled[aid] = []
        for _ in range(cfg.pred_len):
            z = rng.standard_normal(2)
            pos, state, _ = decode_step(prev, state, enc.h_tilde[aid], cache,
                                        s0, s_m1, z, params, cfg, alpha)
            sampled[aid].append(pos)
            prev.append(pos)
    return sampled


def sample_k(episode: Episode, ctx64: np.ndarray, params: dn.ParamStore,
             cfg: ModelConfig, k: int, seed: int,
             alpha: float | None = None) -> PredictionSet:
    """Draw k independent hypotheses per agent; deterministic in seed."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    alpha = cfg.alpha if alpha is None else alpha
    rng = np.random.default_rng(seed)
    with dn.no_grad():
        scene = scene_backbone(ctx64, params, cfg, mode="eval")
        cache = build_scene_cache(scene, params, cfg)
        enc = encode_agents(episode, params, cfg)
        hypotheses: dict[int, np.ndarray] = {}
        for aid in enc.agent_ids:
            _, _, s0, s_m1 = _agent_anchors(episode, aid)
            draws = np.zeros((k, cfg.pred_len, 2))
            for j in range(k):
                state = DecoderState.initial(cfg)
                prev: list = []
                for t in range(cfg.pred_len):
                    z = rng.standard_normal(2)
                    pos, state, _ = decode_step(prev, state, enc.h_tilde[aid],
                                                cache, s0, s_m1, z, params,
                                                cfg, alpha)
                    draws[j, t] = pos.data
                    prev.append(pos)
            hypotheses[aid] = draws
    return PredictionSet(episode.episode_id, hypotheses)


def constant_velocity_baseline(episode: Episode, pred_len: int | None = None) -> PredictionSet:
    """Single-hypothesis straight-line extrapolation of the past velocity."""
    hypotheses = {}
    for traj in episode.agents:
        past, pred = split_past_pred(episode, traj.agent_id)
        horizon = pred_len if pred_len is not None else len(pred)
        velocity = past[-1] - past[-2]
        future = past[-1] + np.outer(np.arange(1, horizon + 1), velocity)
        hypotheses[traj.agent_id] = future[None]
    return PredictionSet(episode.episode_id, hypotheses)
