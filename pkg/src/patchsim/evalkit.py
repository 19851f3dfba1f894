"""Scoring protocols: 2AFC agreement, human ceiling, JND precision-recall
mAP, rank correlations, and report emission.

All scores are rank-style or credit-style aggregates over labeled records;
reduction happens in record-id order so parallel scoring stays deterministic.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LabeledJndPair, LabeledTriplet
from .errors import ConfigurationError, MissingLabelError, UndefinedResultError


def format_sig(x: float) -> str:
    """6 significant digits (IEEE round-half-even), the byte-stable report format."""
    if x != x:
        return "nan"
    if x == float("inf"):
        return "inf"
    if x == float("-inf"):
        return "-inf"
    return f"{x:.6g}"


# ---------------------------------------------------------------------------
# 2AFC agreement
# ---------------------------------------------------------------------------

@dataclass
class TwoAfcResult:
    score: float
    n: int
    per_provenance: dict[str, tuple[float, int]] = field(default_factory=dict)


def two_afc_credits(d0: np.ndarray, d1: np.ndarray, p0: np.ndarray) -> np.ndarray:
    """Per-triplet credit: the vote fraction of whichever side the metric picks;
    exact distance ties earn 0.5.
    """
    d0 = np.asarray(d0, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    return np.where(d0 < d1, p0, np.where(d0 > d1, 1.0 - p0, 0.5))


def two_afc_score(metric_fn, records: list[LabeledTriplet], jobs: int = 1) -> TwoAfcResult:
    """Agreement of a distance function with all collected judgments.

    metric_fn(a, b) -> distance; records supply patches and vote fractions.
    """
    if not records:
        raise MissingLabelError("2AFC scoring needs at least one labeled triplet")

    def one(rec: LabeledTriplet):
        x, x0, x1 = rec.load()
        return metric_fn(x, x0), metric_fn(x, x1)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            dists = list(pool.map(one, records))
    else:
        dists = [one(r) for r in records]
    d0 = np.array([d[0] for d in dists])
    d1 = np.array([d[1] for d in dists])
    p0 = np.array([r.p0 for r in records])
    credits = two_afc_credits(d0, d1, p0)
    per: dict[str, tuple[float, int]] = {}
    labels = np.array([r.provenance_label for r in records])
    for label in sorted(set(labels)):
        mask = labels == label
        per[label] = (float(np.mean(credits[mask], dtype=np.float64)), int(mask.sum()))
    return TwoAfcResult(score=float(np.mean(credits, dtype=np.float64)),
                        n=len(records), per_provenance=per)


def human_ceiling(p_list) -> float:
    """Expected agreement of a human with the vote pool: mean of p^2 + (1-p)^2."""
    p = np.asarray(list(p_list), dtype=np.float64)
    if p.size == 0:
        raise MissingLabelError("human ceiling needs at least one vote fraction")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ConfigurationError("vote fractions must lie in [0, 1]")
    return float(np.mean(p * p + (1.0 - p) * (1.0 - p), dtype=np.float64))


def oracle_max(p_list) -> float:
    """Theoretical maximum: always predict the majority vote, mean of max(p, 1-p)."""
    p = np.asarray(list(p_list), dtype=np.float64)
    return float(np.mean(np.maximum(p, 1.0 - p), dtype=np.float64))


# ---------------------------------------------------------------------------
# JND precision-recall
# ---------------------------------------------------------------------------

@dataclass
class PrCurve:
    points: list[tuple[float, float]]  # (recall, precision) at every rank
    map: float  # per-type average when types are present, else the overall AP
    overall_ap: float
    per_type: dict[str, float] = field(default_factory=dict)


def _average_precision(distances, positives, ids):
    """Non-interpolated AP: rank ascending by distance (stable on record id),
    AP = sum over ranks of (delta recall) * precision.
    """
    n = len(distances)
    order = sorted(range(n), key=lambda i: (distances[i], ids[i]))
    npos = int(sum(1 for i in range(n) if positives[i]))
    if npos == 0:
        raise UndefinedResultError("average precision undefined: no positive pairs")
    points = []
    tp = 0
    ap = 0.0
    for rank, i in enumerate(order, start=1):
        if positives[i]:
            tp += 1
            ap += tp / rank  # precision at this recall step, times delta-R = 1/npos
        points.append((tp / npos, tp / rank))
    return ap / npos, points


def jnd_map(distances, human_same, ids, types=None) -> PrCurve:
    """Rank pairs by ascending distance; positives are the human-"same" pairs.

    When type labels are present the reported mAP is the mean of per-type APs.
    """
    distances = list(distances)
    human_same = list(human_same)
    ids = list(ids)
    if not (len(distances) == len(human_same) == len(ids)):
        raise ConfigurationError("jnd_map inputs must have equal lengths")
    overall, points = _average_precision(distances, human_same, ids)
    per_type: dict[str, float] = {}
    if types is not None:
        types = list(types)
        for t in sorted(set(types)):
            sel = [i for i, ty in enumerate(types) if ty == t]
            if not any(human_same[i] for i in sel):
                continue  # a type with no positives contributes no AP
            ap, _ = _average_precision([distances[i] for i in sel],
                                       [human_same[i] for i in sel],
                                       [ids[i] for i in sel])
            per_type[t] = ap
    value = float(np.mean(list(per_type.values()))) if per_type else overall
    return PrCurve(points=points, map=value, overall_ap=overall, per_type=per_type)


def jnd_map_score(metric_fn, pairs: list[LabeledJndPair], jobs: int = 1) -> PrCurve:
    if not pairs:
        raise MissingLabelError("JND scoring needs at least one labeled pair")

    def one(p: LabeledJndPair):
        ref, probe = p.load()
        return metric_fn(ref, probe)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            dists = list(pool.map(one, pairs))
    else:
        dists = [one(p) for p in pairs]
    return jnd_map(dists, [p.human_same for p in pairs], [p.id for p in pairs],
                   types=[p.type_label for p in pairs])


# ---------------------------------------------------------------------------
# rank correlations
# ---------------------------------------------------------------------------

def midranks(x) -> np.ndarray:
    """Fractional ranks (1-based); tied values share the mean of their ranks."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ConfigurationError("correlation needs two equal-length vectors, n >= 2")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = np.sqrt(np.sum(xd * xd))
    sy = np.sqrt(np.sum(yd * yd))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedResultError("correlation undefined: zero variance")
    return float(np.sum(xd * yd) / (sx * sy))


def spearman(x, y) -> float:
    """Pearson correlation of mid-ranks; ties get averaged ranks."""
    return pearson(midranks(x), midranks(y))


def cross_task_correlation(table: dict[str, dict[str, float]],
                           method: str = "pearson") -> dict[str, dict[str, float]]:
    """Correlation between task columns over method rows.

    `table` maps task -> {method -> score}. Each task pair uses its
    pairwise-complete method rows; fewer than 2 shared rows is an error.
    """
    corr_fn = {"pearson": pearson, "spearman": spearman}[method]
    tasks = sorted(table)
    out: dict[str, dict[str, float]] = {t: {} for t in tasks}
    for a in tasks:
        for b in tasks:
            shared = sorted(set(table[a]) & set(table[b]))
            if len(shared) < 2:
                raise UndefinedResultError(
                    f"tasks {a!r} and {b!r} share {len(shared)} methods; need >= 2")
            out[a][b] = corr_fn([table[a][m] for m in shared],
                                [table[b][m] for m in shared])
    return out


def read_score_table(text: str) -> dict[str, dict[str, float]]:
    """CSV with method rows and task columns; first column holds method names.
    Empty cells mean the method was not evaluated on that task.
    """
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r]
    if len(rows) < 2:
        raise ConfigurationError("score table needs a header and at least one method row")
    tasks = [c.strip() for c in rows[0][1:]]
    table: dict[str, dict[str, float]] = {t: {} for t in tasks}
    for row in rows[1:]:
        name = row[0].strip()
        for t, cell in zip(tasks, row[1:]):
            cell = cell.strip()
            if cell:
                table[t][name] = float(cell)
    return table


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def evaluate_report(metrics, triplets: list[LabeledTriplet],
                    jnd_pairs: list[LabeledJndPair] | None = None,
                    jobs: int = 1) -> dict:
    """Score every named metric and assemble a deterministic report dict.

    `metrics` is a list of (name, metric_fn). The human ceiling row is computed
    from the votes alone.
    """
    report: dict = {"n_triplets": len(triplets),
                    "n_jnd_pairs": len(jnd_pairs) if jnd_pairs else 0}
    if triplets:
        p0s = [t.p0 for t in triplets]
        report["human_ceiling"] = human_ceiling(p0s)
        report["oracle_max"] = oracle_max(p0s)
    rows = {}
    for name, fn in metrics:
        entry: dict = {}
        if triplets:
            res = two_afc_score(fn, triplets, jobs=jobs)
            entry["two_afc"] = res.score
            entry["per_provenance"] = {k: {"score": v[0], "n": v[1]}
                                       for k, v in res.per_provenance.items()}
        if jnd_pairs:
            curve = jnd_map_score(fn, jnd_pairs, jobs=jobs)
            entry["jnd_map"] = curve.map
            entry["jnd_overall_ap"] = curve.overall_ap
            entry["jnd_per_type"] = dict(sorted(curve.per_type.items()))
        rows[name] = entry
    report["metrics"] = rows
    return report


def report_to_json(report: dict) -> str:
    return json.dumps(_round_floats(report), indent=2, sort_keys=True) + "\n"


def report_to_csv(report: dict, metric_order: list[str]) -> str:
    lines = ["name,two_afc,jnd_map"]
    if "human_ceiling" in report:
        lines.append(f"human_ceiling,{format_sig(report['human_ceiling'])},")
    for name in metric_order:
        entry = report["metrics"][name]
        two = format_sig(entry["two_afc"]) if "two_afc" in entry else ""
        jm = format_sig(entry["jnd_map"]) if "jnd_map" in entry else ""
        lines.append(f"{name},{two},{jm}")
    return "\n".join(lines) + "\n"


def _round_floats(obj):
    if isinstance(obj, float):
        return float(format_sig(obj))
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def write_report(report: dict, metric_order: list[str], out_json, out_csv) -> None:
    Path(out_json).write_text(report_to_json(report), "utf-8")
    Path(out_csv).write_text(report_to_csv(report, metric_order), "utf-8")


# ---------------------------------------------------------------------------
# MOS-style evaluation
# ---------------------------------------------------------------------------

def spearman_vs_mos(distances, mos) -> dict[str, float]:
    """Rank agreement between a metric and mean-opinion scores.

    Reported `rho` negates the distances first (higher quality should mean
    smaller distance), `rho_raw` is the uncorrected value.
    """
    d = np.asarray(list(distances), dtype=np.float64)
    m = np.asarray(list(mos), dtype=np.float64)
    return {"rho": spearman(-d, m), "rho_raw": spearman(d, m)}
