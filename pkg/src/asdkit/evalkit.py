"""Official challenge metrics: domain-wise AUC, machine-wise pAUC, harmonic mean."""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyClass, KeyMismatch, UsageError

log = logging.getLogger(__name__)

GROUPINGS = ("challenge", "same_domain")


def _check(normal, anomaly):
    normal = np.asarray(normal, dtype=np.float64).ravel()
    anomaly = np.asarray(anomaly, dtype=np.float64).ravel()
    if normal.size == 0 or anomaly.size == 0:
        raise EmptyClass("AUC needs at least one normal and one anomalous score")
    return normal, anomaly


def auc(normal_scores, anomaly_scores) -> float:
    """P(anomaly > normal) + 0.5 P(tie), via midranks."""
    normal, anomaly = _check(normal_scores, anomaly_scores)
    ranks = rankdata(np.concatenate([anomaly, normal]))
    m, n = anomaly.size, normal.size
    u = ranks[:m].sum() - m * (m + 1) / 2
    return float(u / (m * n))


def _roc_counts(normal: np.ndarray, anomaly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (false, true) positive counts, one vertex per distinct score, from (0, 0)."""
    scores = np.concatenate([anomaly, normal])
    is_anomaly = np.concatenate([np.ones(anomaly.size), np.zeros(normal.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_anomaly = scores[order], is_anomaly[order]
    last_of_group = np.r_[np.diff(scores) != 0, True]
    tp = np.cumsum(is_anomaly)[last_of_group]
    fp = np.cumsum(1 - is_anomaly)[last_of_group]
    return np.r_[0.0, fp], np.r_[0.0, tp]


def roc_curve(normal_scores, anomaly_scores) -> tuple[np.ndarray, np.ndarray]:
    """ROC polyline (fpr, tpr) from (0, 0) to (1, 1)."""
    normal, anomaly = _check(normal_scores, anomaly_scores)
    fp, tp = _roc_counts(normal, anomaly)
    return fp / normal.size, tp / anomaly.size


def pauc(normal_scores, anomaly_scores, p: float = 0.1) -> float:
    """Area under the ROC curve over FPR in [0, p], divided by p.

    Integrated in count space, so p=1 reproduces the rank-based AUC bit for bit.
    """
    if not 0 < p <= 1:
        raise UsageError(f"p must lie in (0, 1], got {p}")
    normal, anomaly = _check(normal_scores, anomaly_scores)
    fp, tp = _roc_counts(normal, anomaly)
    limit = p * normal.size
    k = int(np.searchsorted(fp, limit, side="left"))  # first vertex at or beyond the limit
    x0, x1, y0, y1 = fp[k - 1], fp[k], tp[k - 1], tp[k]
    y_end = y1 if x1 == limit else y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
    x = np.r_[fp[:k], limit]
    y = np.r_[tp[:k], y_end]
    area = math.fsum(np.diff(x) * (y[1:] + y[:-1])) / 2
    return float(area / (limit * anomaly.size))


def hmean(values) -> float:
    values = [float(v) for v in values]
    if not values:
        raise UsageError("harmonic mean of nothing")
    if any(v < 0 for v in values):
        raise UsageError("harmonic mean needs non-negative values")
    if any(v == 0 for v in values):
        log.warning("a component metric is 0; the harmonic mean collapses to 0")
        return 0.0
    return len(values) / math.fsum(1.0 / v for v in values)


@dataclass
class ScoredRecord:
    clip_id: str
    machine: str
    domain: str
    condition: str
    score: float


@dataclass
class EvalReport:
    auc: dict[tuple[str, str], float]
    pauc: dict[str, float]
    machine_hmean: dict[str, float]
    official: float
    grouping: str = "challenge"
    p: float = 0.1
    meta: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        """Flat metric map used for trial aggregation."""
        out = {f"auc/{m}/{d}": v for (m, d), v in sorted(self.auc.items())}
        out.update({f"pauc/{m}": v for m, v in sorted(self.pauc.items())})
        out.update({f"hmean/{m}": v for m, v in sorted(self.machine_hmean.items())})
        out["official"] = self.official
        return out

    def to_dict(self) -> dict:
        return {
            "official": self.official,
            "grouping": self.grouping,
            "p": self.p,
            "machines": {
                m: {
                    "auc": {d: v for (mm, d), v in sorted(self.auc.items()) if mm == m},
                    "pauc": self.pauc[m],
                    "hmean": self.machine_hmean[m],
                }
                for m in sorted(self.pauc)
            },
            "meta": self.meta,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def official_score(records: list[ScoredRecord], grouping: str = "challenge", p: float = 0.1) -> EvalReport:
    """Per-(machine, domain) AUC, per-machine pAUC and their harmonic mean.

    grouping="challenge" pits each domain's normal clips against the anomalies
    of both domains; "same_domain" uses only that domain's anomalies.
    """
    if grouping not in GROUPINGS:
        raise UsageError(f"unknown grouping {grouping!r}")
    by_machine: dict[str, list[ScoredRecord]] = {}
    for r in records:
        if r.condition not in ("normal", "anomaly"):
            raise UsageError(f"{r.clip_id}: cannot evaluate condition {r.condition!r}")
        if not math.isfinite(r.score):
            raise UsageError(f"{r.clip_id}: non-finite score")
        by_machine.setdefault(r.machine, []).append(r)
    aucs, paucs, per_machine = {}, {}, {}
    for machine in sorted(by_machine):
        recs = by_machine[machine]
        anomalies = [r for r in recs if r.condition == "anomaly"]
        if not anomalies:
            raise EmptyClass(f"{machine}: no anomalous test clips")
        components = []
        for domain in sorted({r.domain for r in recs}):
            normal = [r.score for r in recs if r.domain == domain and r.condition == "normal"]
            anom = [r.score for r in anomalies if grouping == "challenge" or r.domain == domain]
            if not normal:
                raise EmptyClass(f"{machine}/{domain}: no normal test clips")
            aucs[(machine, domain)] = auc(normal, anom)
            components.append(aucs[(machine, domain)])
        paucs[machine] = pauc([r.score for r in recs if r.condition == "normal"], [r.score for r in anomalies], p)
        per_machine[machine] = hmean(components + [paucs[machine]])
    official = hmean(list(aucs.values()) + list(paucs.values()))
    return EvalReport(aucs, paucs, per_machine, official, grouping, p)


def aggregate_trials(reports: list) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation (n - 1) per metric across trials.

    Accepts EvalReports or plain metric dicts; a single trial has std 0.
    """
    if not reports:
        raise UsageError("no reports to aggregate")
    maps = [r.metrics() if isinstance(r, EvalReport) else dict(r) for r in reports]
    keys = set(maps[0])
    for mp in maps[1:]:
        if set(mp) != keys:
            raise KeyMismatch(f"reports disagree on metrics: {sorted(keys.symmetric_difference(mp))[:5]}")
    out = {}
    for k in sorted(keys):
        vals = [float(mp[k]) for mp in maps]
        out[k] = (statistics.fmean(vals), statistics.stdev(vals) if len(vals) > 1 else 0.0)
    return out


def format_cell(mean: float, std: float, scale: float = 1.0) -> str:
    return f"{mean * scale:.2f} ({std * scale:.2f})"


def render_table(aggregated: dict[str, tuple[float, float]], scale: float = 100.0) -> str:
    """Text table of "mean (std)" cells, one row per metric."""
    width = max(len(k) for k in aggregated)
    return "\n".join(f"{k:<{width}}  {format_cell(m, s, scale)}" for k, (m, s) in aggregated.items())
