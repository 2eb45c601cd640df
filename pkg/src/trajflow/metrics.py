"""Precision, diversity, and admissibility metrics.

Displacement errors score precision of the best and the average
hypothesis; rF (avgFDE over minFDE) measures how spread out the
hypotheses are; DAO counts the unique drivable pixels the prediction
set touches (normalized x10,000); DAC counts the fraction of hypotheses
that never leave the drivable area. All are computed per agent and then
averaged over the corpus.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .episodes import Episode, PredictionSet, RoadMask, split_past_pred
from .errors import ValidationError
from .scenemap import rasterize

RF_EPS = 1e-9
DAO_NORMALIZATION = 10_000.0
RI_AGENT_COUNTS = (1, 3, 5, 10)


def displacement_errors(preds: PredictionSet, episode: Episode):
    """Per-agent (minADE, avgADE, minFDE, avgFDE) against the GT future."""
    out: dict[int, tuple[float, float, float, float]] = {}
    for aid, hyp in preds.hypotheses.items():
        _, gt = split_past_pred(episode, aid)
        if hyp.shape[1] != gt.shape[0]:
            raise ValidationError(
                f"agent {aid}: hypothesis length {hyp.shape[1]} != GT length "
                f"{gt.shape[0]}")
        dists = np.linalg.norm(hyp - gt[None], axis=2)   # (k, L)
        ades = dists.mean(axis=1)
        fdes = dists[:, -1]
        out[aid] = (float(ades.min()), float(ades.mean()),
                    float(fdes.min()), float(fdes.mean()))
    return out


def rf(avg_fde: float, min_fde: float) -> float:
    """Ratio of avgFDE to minFDE with a small guard on the denominator."""
    if min_fde < 0:
        raise ValidationError("minFDE must be >= 0")
    return avg_fde / (min_fde + RF_EPS)


def dao(preds: PredictionSet, mask: RoadMask):
    """Per-agent drivable-area occupancy, normalized by x10,000.

    The numerator is the number of unique drivable pixels covered by the
    agent's hypotheses' waypoints; the denominator is the drivable pixel
    count of the mask.
    """
    denominator = mask.drivable_count()
    if denominator == 0:
        raise ValidationError("mask has no drivable pixels")
    out: dict[int, float] = {}
    for aid, hyp in preds.hypotheses.items():
        pixels, _ = rasterize(hyp.reshape(-1, 2), mask)
        on_road = sum(1 for (r, c) in pixels if mask.grid[r, c])
        out[aid] = DAO_NORMALIZATION * on_road / denominator
    return out


def dac(preds: PredictionSet, mask: RoadMask):
    """Per-agent fraction of hypotheses that stay on the drivable area."""
    out: dict[int, float] = {}
    for aid, hyp in preds.hypotheses.items():
        k = hyp.shape[0]
        violating = 0
        for j in range(k):
            _, offroad = rasterize(hyp[j], mask)
            if offroad.any():
                violating += 1
        out[aid] = (k - violating) / k
    return out


def offroad_waypoint_fraction(preds: PredictionSet, mask: RoadMask) -> float:
    """Fraction of all predicted waypoints on non-drivable/off-grid pixels."""
    total = 0
    offroad = 0
    for hyp in preds.hypotheses.values():
        _, flags = rasterize(hyp.reshape(-1, 2), mask)
        total += flags.size
        offroad += int(flags.sum())
    return offroad / total if total else 0.0


@dataclass
class MetricsReport:
    """Corpus-mean metrics plus the per-agent rows they aggregate."""

    min_ade: float
    avg_ade: float
    min_fde: float
    avg_fde: float
    rf: float
    dao: float
    dac: float
    k: int
    per_agent: list[dict] = field(default_factory=list)

    COLUMNS = ["minADE", "avgADE", "minFDE", "avgFDE", "rF", "DAO", "DAC"]

    def row(self) -> dict:
        return {"minADE": self.min_ade, "avgADE": self.avg_ade,
                "minFDE": self.min_fde, "avgFDE": self.avg_fde,
                "rF": self.rf, "DAO": self.dao, "DAC": self.dac}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(
            buf, fieldnames=["episode_id", "agent_id"] + self.COLUMNS)
        writer.writeheader()
        for row in self.per_agent:
            writer.writerow(row)
        mean_row = {"episode_id": "corpus", "agent_id": "mean"}
        mean_row.update(self.row())
        writer.writerow(mean_row)
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table in the reporting column order."""
        headers = ["minADE", "minFDE", "rF", "DAO", "DAC"]
        values = [self.min_ade, self.min_fde, self.rf, self.dao, self.dac]
        cells = [f"{v:.3f}" for v in values]
        widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
        head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
        body = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return head + "\n" + body


@dataclass
class RITable:
    """minFDE per surrounding-agent bucket and the relative improvement."""

    min_fde: dict[int, float]
    ri: float   # (FDE_1 - FDE_10) / FDE_1; NaN when a bucket is empty

    def to_table(self) -> str:
        headers = [f"{n} agents" for n in RI_AGENT_COUNTS] + ["RI(1-10)"]
        cells = [f"{self.min_fde.get(n, float('nan')):.3f}"
                 for n in RI_AGENT_COUNTS] + [f"{self.ri * 100:.1f}%"]
        widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
        head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
        body = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return head + "\n" + body


def evaluate(episodes: list[Episode], predictions: list[PredictionSet]):
    """Score a prediction corpus; returns (MetricsReport, RITable).

    Every prediction record must match an episode by id. Per-agent
    metrics are averaged over the corpus; the RI table buckets each
    episode by its surrounding-agent count (episodes with at least N
    surrounding agents contribute the ego minFDE to bucket N).
    """
    by_id = {ep.episode_id: ep for ep in episodes}
    rows = []
    bucket_fdes: dict[int, list[float]] = {n: [] for n in RI_AGENT_COUNTS}
    ks = set()
    for pset in predictions:
        if pset.episode_id not in by_id:
            raise ValidationError(
                f"prediction for unknown episode {pset.episode_id!r}")
        episode = by_id[pset.episode_id]
        ks.add(pset.k)
        errors = displacement_errors(pset, episode)
        daos = dao(pset, episode.road_mask)
        dacs = dac(pset, episode.road_mask)
        for aid in pset.agent_ids:
            min_ade, avg_ade, min_fde, avg_fde = errors[aid]
            rows.append({
                "episode_id": episode.episode_id,
                "agent_id": aid,
                "minADE": min_ade, "avgADE": avg_ade,
                "minFDE": min_fde, "avgFDE": avg_fde,
                "rF": rf(avg_fde, min_fde),
                "DAO": daos[aid], "DAC": dacs[aid],
            })
        surrounding = episode.n_agents - 1
        if episode.ego_agent_id in errors:
            ego_fde = errors[episode.ego_agent_id][2]
            for n in RI_AGENT_COUNTS:
                if surrounding >= n:
                    bucket_fdes[n].append(ego_fde)
    if not rows:
        raise ValidationError("no predictions to evaluate")

    def mean(key):
        return float(np.mean([r[key] for r in rows]))

    report = MetricsReport(mean("minADE"), mean("avgADE"), mean("minFDE"),
                           mean("avgFDE"), mean("rF"), mean("DAO"),
                           mean("DAC"), k=max(ks), per_agent=rows)
    fde_buckets = {n: (float(np.mean(v)) if v else float("nan"))
                   for n, v in bucket_fdes.items()}
    first, last = fde_buckets[RI_AGENT_COUNTS[0]], fde_buckets[RI_AGENT_COUNTS[-1]]
    ri = (first - last) / first if np.isfinite(first) and np.isfinite(last) and first else float("nan")
    return report, RITable(fde_buckets, ri)
