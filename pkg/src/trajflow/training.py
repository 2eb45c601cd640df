"""Optimizer, learning-rate schedule, and the per-episode training loop.

Training runs one episode per optimizer step (gradients are per-episode
means, so the objective is unchanged in expectation). Validation after
every epoch scores k-sample rollouts by avgADE + avgFDE; that sum
drives a halve-on-plateau schedule and early stopping, and the best
validation checkpoint is retained.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from . import model as mdl
from .episodes import Episode
from .errors import ValidationError
from .metrics import displacement_errors
from .objective import PreparedEpisode, symmetric_loss
from .scenemap import (build_p_tilde, build_scene_context, context_stats,
                       distance_transform, pool_context, value_stats)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def derive_seed(*parts: int) -> int:
    """Deterministically combine seed components into one integer."""
    out = 0
    for part in parts:
        out = (out * 1000003 + int(part)) % (2**63)
    return out


@dataclass
class OptimState:
    """Adam accumulators plus the plateau-schedule bookkeeping."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    lr: float
    patience: int
    bad_validations: int = 0
    best_score: float = float("inf")

    @classmethod
    def initial(cls, params: dn.ParamStore, lr: float = 1e-4,
                patience: int = 3) -> "OptimState":
        if lr <= 0:
            raise ValidationError("learning rate must be positive")
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.params.items()},
            step=0, lr=lr, patience=patience)


def adam_step(opt: OptimState, params: dn.ParamStore) -> None:
    """Standard Adam update with bias correction."""
    opt.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** opt.step
    bc2 = 1.0 - ADAM_BETA2 ** opt.step
    for name, p in params.params.items():
        g = p.grad
        opt.m[name] = ADAM_BETA1 * opt.m[name] + (1 - ADAM_BETA1) * g
        opt.v[name] = ADAM_BETA2 * opt.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        p.data -= opt.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def plateau_schedule(opt: OptimState, val_score: float) -> bool:
    """Halve the learning rate after ``patience`` non-improving scores.

    Mirrors the usual reduce-on-plateau semantics: ``patience`` bad
    validations are tolerated; one more halves the rate and resets the
    counter. Returns True when a halving occurred.
    """
    if val_score < opt.best_score:
        opt.best_score = val_score
        opt.bad_validations = 0
        return False
    opt.bad_validations += 1
    if opt.bad_validations > opt.patience:
        opt.lr *= 0.5
        opt.bad_validations = 0
        return True
    return False


# ---------------------------------------------------------------------------
# dataset preparation

def prepare_episodes(episodes: list[Episode], ctx_hw: int = 64, stats=None):
    """Attach map products to episodes; stats default to this corpus.

    Returns (prepared, stats) where stats is the pair of normalization
    statistics (p-tilde scalar stats, per-channel context stats) to
    reuse for validation/test corpora.
    """
    dists = [distance_transform(ep.road_mask) for ep in episodes]
    if stats is None:
        stats = (value_stats(dists), context_stats(dists))
    pt_stats, ctx_stats = stats
    prepared = []
    for ep, dist in zip(episodes, dists):
        p_tilde = build_p_tilde(dist, pt_stats)
        ctx = build_scene_context(dist, ctx_stats)
        prepared.append(PreparedEpisode(ep, pool_context(ctx, ctx_hw), p_tilde))
    return prepared, stats


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainSettings:
    """Knobs of one training run (the config-file surface)."""

    seed: int
    alpha: float = 0.5
    beta: float = 0.1
    lr: float = 1e-4
    epochs: int = 100
    patience: int = 3
    k: int = 12
    n_samples: int = 2
    early_stop: int = 10


@dataclass
class TrainResult:
    best_values: dict[str, np.ndarray]
    log: list[dict]
    steps: int
    best_score: float
    aborted: bool = False
    stopped_early: bool = False
    history: list[float] = field(default_factory=list)


def validation_score(val_set: list[PreparedEpisode], params: dn.ParamStore,
                     cfg: mdl.ModelConfig, k: int, seed: int,
                     alpha: float | None = None):
    """Corpus-mean (avgADE, avgFDE) of k-sample rollouts."""
    ades, fdes = [], []
    for i, prep in enumerate(val_set):
        preds = mdl.sample_k(prep.episode, prep.ctx64, params, cfg, k,
                             seed=derive_seed(seed, i), alpha=alpha)
        per_agent = displacement_errors(preds, prep.episode)
        for row in per_agent.values():
            ades.append(row[1])
            fdes.append(row[3])
    return float(np.mean(ades)), float(np.mean(fdes))


def train(train_set: list[PreparedEpisode], val_set: list[PreparedEpisode],
          params: dn.ParamStore, cfg: mdl.ModelConfig,
          settings: TrainSettings) -> TrainResult:
    """Epoch loop with per-episode steps, validation, and best retention.

    A non-finite loss aborts the run; the last good (best-validation)
    parameter values are restored into ``params`` before returning.
    """
    if not train_set:
        raise ValidationError("training set is empty")
    opt = OptimState.initial(params, settings.lr, settings.patience)
    rng = np.random.default_rng([settings.seed, 0x5EED])
    best_values = params.copy_values()
    best_score = float("inf")
    log: list[dict] = []
    history: list[float] = []
    non_improving = 0
    aborted = False
    stopped_early = False

    for epoch in range(settings.epochs):
        order = rng.permutation(len(train_set))
        totals, fwds, revs = [], [], []
        for idx in order:
            params.zero_grad()
            step_seed = derive_seed(settings.seed, epoch, int(idx))
            terms = symmetric_loss(train_set[idx], params, cfg,
                                   beta=settings.beta, seed=step_seed,
                                   n_samples=settings.n_samples,
                                   alpha=settings.alpha)
            if not np.isfinite(terms.total):
                aborted = True
                break
            terms.total_node.backward()
            adam_step(opt, params)
            totals.append(terms.total)
            fwds.append(terms.forward_ce)
            revs.append(terms.reverse_ce)
        if aborted:
            break
        val_ade, val_fde = validation_score(
            val_set, params, cfg, settings.k, seed=settings.seed + 7777,
            alpha=settings.alpha)
        score = val_ade + val_fde
        history.append(score)
        finite_revs = [r for r in revs if np.isfinite(r)]
        log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(totals)),
            "forward_ce": float(np.mean(fwds)),
            "reverse_ce": (float(np.mean(finite_revs)) if finite_revs
                           else float("nan")),
            "val_avgADE": val_ade,
            "val_avgFDE": val_fde,
            "lr": opt.lr,
        })
        if score < best_score:
            best_score = score
            best_values = params.copy_values()
            non_improving = 0
        else:
            non_improving += 1
        plateau_schedule(opt, score)
        if non_improving >= settings.early_stop:
            stopped_early = True
            break

    params.load_values(best_values)
    return TrainResult(best_values, log, opt.step, best_score,
                       aborted=aborted, stopped_early=stopped_early,
                       history=history)


# ---------------------------------------------------------------------------
# evaluation and sweep harness

def predict_corpus(prepared: list[PreparedEpisode], params: dn.ParamStore,
                   cfg: mdl.ModelConfig, k: int, seed: int,
                   alpha: float | None = None):
    """Sample k hypotheses per agent for every prepared episode."""
    return [mdl.sample_k(p.episode, p.ctx64, params, cfg, k,
                         seed=derive_seed(seed, i), alpha=alpha)
            for i, p in enumerate(prepared)]


def evaluate_model(prepared: list[PreparedEpisode], params: dn.ParamStore,
                   cfg: mdl.ModelConfig, k: int, seed: int,
                   alpha: float | None = None):
    """Metrics report of k-sample predictions over a prepared corpus."""
    from .metrics import evaluate
    predictions = predict_corpus(prepared, params, cfg, k, seed, alpha)
    return evaluate([p.episode for p in prepared], predictions)


def alpha_sweep(train_set: list[PreparedEpisode],
                val_set: list[PreparedEpisode], settings: TrainSettings,
                alphas=(0.25, 0.5, 0.75, 1.0)) -> list[dict]:
    """Train one model per degradation coefficient and tabulate metrics.

    Every run shares the data, seed, and schedule; only alpha varies.
    Returns one row per alpha with the standard report columns.
    """
    rows = []
    for alpha in alphas:
        cfg = mdl.ModelConfig(alpha=alpha)
        params = mdl.init_params(cfg, settings.seed)
        run_settings = TrainSettings(
            seed=settings.seed, alpha=alpha, beta=settings.beta,
            lr=settings.lr, epochs=settings.epochs,
            patience=settings.patience, k=settings.k,
            n_samples=settings.n_samples, early_stop=settings.early_stop)
        train(train_set, val_set, params, cfg, run_settings)
        report, _ = evaluate_model(val_set, params, cfg, settings.k,
                                   seed=derive_seed(settings.seed, 4242),
                                   alpha=alpha)
        rows.append({"alpha": alpha, "minADE": report.min_ade,
                     "minFDE": report.min_fde, "rF": report.rf,
                     "DAO": report.dao, "DAC": report.dac})
    return rows


def alpha_sweep_table(rows: list[dict]) -> str:
    """Aligned text table of the sweep, one row per alpha."""
    headers = ["alpha", "minADE", "minFDE", "rF", "DAO", "DAC"]
    lines = ["  ".join(h.rjust(8) for h in headers)]
    for row in rows:
        lines.append("  ".join(f"{row[h]:8.3f}" for h in headers))
    return "\n".join(lines)


LOG_COLUMNS = ["epoch", "train_loss", "forward_ce", "reverse_ce",
               "val_avgADE", "val_avgFDE", "lr"]


def write_log(log: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
