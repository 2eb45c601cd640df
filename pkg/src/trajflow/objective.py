"""Symmetric cross-entropy training objective.

The loss couples two terms: the forward cross-entropy drives the model
density toward the ground-truth future (teacher-forced change of
variable through the affine flow), and the reverse cross-entropy scores
freshly sampled rollouts under the map prior, penalizing probability
mass that strays off the drivable area. ``total = forward + beta *
reverse``; gradients for both flow through the same tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet as dn
from . import model as mdl
from .episodes import Episode
from .errors import ValidationError
from .scenemap import PTilde, log_p_tilde_with_penalty


@dataclass
class LossTerms:
    """Scalar views of one training-step loss; nodes drive backward()."""

    forward_ce: float
    reverse_ce: float
    beta: float
    total: float
    total_node: dn.DiffTensor


@dataclass
class PreparedEpisode:
    """Episode bundled with its precomputed map products."""

    episode: Episode
    ctx64: np.ndarray         # pooled, standardized scene context
    p_tilde: PTilde


def _forward_node(episode, cache, enc, params, cfg, alpha):
    logq, _ = mdl.log_density(episode, cache, enc, params, cfg, alpha)
    nodes = [node for aid in enc.agent_ids for node in logq[aid]]
    return dn.scale(dn.mean_of(nodes), -1.0)


def _reverse_node(episode, p_tilde, cache, enc, params, cfg, rng, n_samples, alpha):
    lookups = []
    for _ in range(n_samples):
        sampled = mdl.rollout(episode, cache, enc, params, cfg, rng, alpha)
        for aid in enc.agent_ids:
            for pos in sampled[aid]:
                def lookup(xy, p=p_tilde):
                    value, grad, _ = log_p_tilde_with_penalty(p, xy)
                    return value, grad
                lookups.append(dn.external_lookup(pos, lookup))
    return dn.scale(dn.mean_of(lookups), -1.0)


def forward_ce(prepared: PreparedEpisode, params: dn.ParamStore,
               cfg: mdl.ModelConfig, seed: int = 0, mode: str = "train",
               alpha: float | None = None) -> LossTerms:
    """Mean negative log q of the ground-truth future (beta = 0 loss)."""
    return symmetric_loss(prepared, params, cfg, beta=0.0, seed=seed,
                          mode=mode, alpha=alpha)


def reverse_ce(prepared: PreparedEpisode, params: dn.ParamStore,
               cfg: mdl.ModelConfig, n_samples: int = 2, seed: int = 0,
               mode: str = "train", alpha: float | None = None):
    """Mean negative log p-tilde over sampled waypoints, as a node."""
    rng = np.random.default_rng(seed)
    episode = prepared.episode
    scene = mdl.scene_backbone(prepared.ctx64, params, cfg, mode, rng)
    cache = mdl.build_scene_cache(scene, params, cfg)
    enc = mdl.encode_agents(episode, params, cfg)
    return _reverse_node(episode, prepared.p_tilde, cache, enc, params, cfg,
                         rng, n_samples, cfg.alpha if alpha is None else alpha)


def symmetric_loss(prepared: PreparedEpisode, params: dn.ParamStore,
                   cfg: mdl.ModelConfig, beta: float, seed: int,
                   n_samples: int = 2, mode: str = "train",
                   alpha: float | None = None) -> LossTerms:
    """Forward plus beta-weighted reverse cross-entropy for one episode.

    The scene backbone, its cache, and the agent encodings are built
    once and shared by both terms. Reverse samples are drawn fresh from
    the seeded generator; with beta = 0 the reverse term is skipped
    entirely and reported as NaN.
    """
    if beta < 0:
        raise ValidationError("beta must be >= 0")
    alpha = cfg.alpha if alpha is None else alpha
    rng = np.random.default_rng(seed)
    episode = prepared.episode
    scene = mdl.scene_backbone(prepared.ctx64, params, cfg, mode, rng)
    cache = mdl.build_scene_cache(scene, params, cfg)
    enc = mdl.encode_agents(episode, params, cfg)
    fwd = _forward_node(episode, cache, enc, params, cfg, alpha)
    if beta > 0:
        rev = _reverse_node(episode, prepared.p_tilde, cache, enc, params,
                            cfg, rng, n_samples, alpha)
        total = dn.add(fwd, dn.scale(rev, beta))
        rev_value = float(rev.data)
    else:
        total = fwd
        rev_value = float("nan")
    return LossTerms(float(fwd.data), rev_value, beta, float(total.data), total)
