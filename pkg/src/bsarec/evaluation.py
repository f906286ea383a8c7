"""Full-ranking metrics, quartile grouping, seed aggregation and significance tests."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import stats

from .data import InteractionCorpus, SplitSet, history_before
from .model import BSARec
from .signal import PAD_ID, dense_category_encoding, scaled_dc_component

DEFAULT_KS = (5, 10, 20)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RankRecord:
    user_id: str
    rank: int
    scaled_dc: float = 0.0
    target_category_occurrence: int = 0
    categories_from_items: bool = False


def ranks_from_scores(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target; ties broken by ascending item id, pad column ignored."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets == PAD_ID):
        raise EvaluationError("pad id cannot be a ranking target")
    n = scores.shape[-1]
    target_scores = scores[np.arange(len(targets)), targets][:, None]
    ids = np.arange(n)[None, :]
    real = ids != PAD_ID
    better = (scores > target_scores) & real
    tied_before = (scores == target_scores) & (ids < targets[:, None]) & real
    return 1 + better.sum(axis=1) + tied_before.sum(axis=1)


@torch.no_grad()
def compute_ranks(model: BSARec, split: SplitSet, batch_size: int = 256) -> np.ndarray:
    """Rank the last-position target of every window against all items."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for start in range(0, len(split), batch_size):
            inputs = torch.from_numpy(split.inputs[start : start + batch_size])
            states = model.encode(inputs)[:, -1, :]
            scores = model.score(states).to(dtype).numpy()
            out.append(ranks_from_scores(scores, split.last_targets[start : start + batch_size]))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def frequency_features(corpus: InteractionCorpus, user_index: int, split: str = "test") -> tuple[float, int, bool]:
    """Scaled DC of the history before the target and the target category's count in it."""
    items, cats, target = history_before(corpus, user_index, split)
    flagged = cats is None
    if flagged:
        cats = [str(i) for i in items]
        target_cat = str(target)
    else:
        target_cat = corpus.users[user_index].categories[len(items)]
    dc = scaled_dc_component(dense_category_encoding(cats))
    return dc, sum(1 for c in cats if c == target_cat), flagged


def rank_all_items(model: BSARec, split: SplitSet, corpus: InteractionCorpus, split_name: str = "test") -> list[RankRecord]:
    ranks = compute_ranks(model, split)
    records = []
    for ui, rank in zip(split.user_index, ranks):
        dc, occ, flagged = frequency_features(corpus, int(ui), split_name)
        records.append(RankRecord(corpus.users[ui].user_id, int(rank), dc, occ, flagged))
    if records and records[0].categories_from_items:
        warnings.warn("corpus has no category map; scaled DC uses item ids as categories", stacklevel=2)
    return records


def _ranks(records) -> np.ndarray:
    ranks = np.asarray([r.rank if isinstance(r, RankRecord) else r for r in records], dtype=np.int64)
    if ranks.size == 0:
        raise EvaluationError("no records to evaluate")
    return ranks


def hit_rate_at_k(records, k: int) -> float:
    return float(np.mean(_ranks(records) <= k))


def ndcg_at_k(records, k: int) -> float:
    ranks = _ranks(records)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def metric_dict(records, ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    out = {f"HR@{k}": hit_rate_at_k(records, k) for k in ks}
    out.update({f"NDCG@{k}": ndcg_at_k(records, k) for k in ks})
    return out


# ---------------------------------------------------------------------------
# Quartiles


def _quartile_groups(records: list, values: np.ndarray) -> list[list]:
    if len(records) < 4:
        raise EvaluationError(f"need at least 4 records for quartiles, got {len(records)}")
    cuts = np.percentile(values, [25, 50, 75])
    # side='left': a value equal to a cut point belongs to the lower quartile
    labels = np.searchsorted(cuts, values, side="left")
    groups = [[r for r, q in zip(records, labels) if q == g] for g in range(4)]
    if any(not g for g in groups):
        warnings.warn("tied values left at least one quartile empty", stacklevel=3)
    return groups


def group_by_scaled_dc(records: list[RankRecord]) -> list[list[RankRecord]]:
    """Q1 = lowest scaled DC (long-term interest) ... Q4 = highest."""
    return _quartile_groups(records, np.array([r.scaled_dc for r in records], dtype=np.float64))


def group_by_target_occurrence(records: list[RankRecord]) -> list[list[RankRecord]]:
    """Q1 = targets from the most frequent categories ... Q4 = rarest."""
    return _quartile_groups(records, -np.array([r.target_category_occurrence for r in records], dtype=np.float64))


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    metrics: dict
    std: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[RankRecord], seed=None, ks: Sequence[int] = DEFAULT_KS) -> "MetricReport":
        groups = {}
        if len(records) >= 4:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                for key, fn in (("scaled_dc", group_by_scaled_dc), ("target_occurrence", group_by_target_occurrence)):
                    groups[key] = {
                        f"Q{i + 1}": ({"users": len(g), **metric_dict(g, ks)} if g else {"users": 0})
                        for i, g in enumerate(fn(records))
                    }
        metrics = metric_dict(records, ks)
        return cls(
            metrics=metrics,
            std={k: 0.0 for k in metrics},
            groups=groups,
            seeds=[] if seed is None else [seed],
        )

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "std": self.std, "groups": self.groups, "seeds": self.seeds}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["metrics"], d.get("std", {}), d.get("groups", {}), d.get("seeds", []))


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate_seeds(reports: list[MetricReport]) -> MetricReport:
    """Elementwise mean and sample standard deviation across seed reports."""
    if not reports:
        raise EvaluationError("no reports to aggregate")
    metrics, std = {}, {}
    for key in reports[0].metrics:
        metrics[key], std[key] = _mean_std([r.metrics[key] for r in reports])
    groups: dict = {}
    for gkey, quarts in reports[0].groups.items():
        groups[gkey] = {}
        for q, vals in quarts.items():
            agg = {}
            for mkey in vals:
                series = [r.groups[gkey][q].get(mkey) for r in reports]
                if all(v is not None for v in series):
                    agg[mkey], agg[f"{mkey}_std"] = _mean_std(series)
            groups[gkey][q] = agg
    seeds = [s for r in reports for s in r.seeds]
    return MetricReport(metrics, std, groups, seeds)


# ---------------------------------------------------------------------------
# Significance


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: float
    p: float


def welch_t_test(sample_a: Iterable[float], sample_b: Iterable[float]) -> TTestResult:
    """Two-sided Welch unequal-variance t-test."""
    a = np.asarray(list(sample_a), dtype=np.float64)
    b = np.asarray(list(sample_b), dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise EvaluationError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, float(a.size + b.size - 2), 1.0)
        return TTestResult(math.copysign(math.inf, diff), float(a.size + b.size - 2), 0.0)
    t = diff / math.sqrt(se2)
    dof = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(2.0 * stats.t.sf(abs(t), dof))
    return TTestResult(float(t), float(dof), min(p, 1.0))


def significance_table(report_a: list[MetricReport], report_b: list[MetricReport]) -> list[dict]:
    rows = []
    for key in report_a[0].metrics:
        res = welch_t_test([r.metrics[key] for r in report_a], [r.metrics[key] for r in report_b])
        mean_a = float(np.mean([r.metrics[key] for r in report_a]))
        mean_b = float(np.mean([r.metrics[key] for r in report_b]))
        rel = (mean_a - mean_b) / mean_b * 100.0 if mean_b else math.nan
        rows.append({"metric": key, "mean_a": mean_a, "mean_b": mean_b, "diff_pct": rel,
                     "t": res.t, "dof": res.dof, "p": res.p, "significant": res.p < 0.05})
    return rows


# ---------------------------------------------------------------------------
# Frequency profile of an embedded window


@torch.no_grad()
def lfc_hfc_norm_profile(model: BSARec, window: Sequence[int], layer: int = 0) -> np.ndarray:
    """Per-position ``(||LFC||, ||HFC||)`` of the embedded window using a layer's cutoff.

    Returns an array of shape ``(max_len, 2)``.
    """
    if not model.layers or model.layers[layer].rescaler is None:
        raise EvaluationError("model has no rescaler to define the band split")
    was_training = model.training
    model.eval()
    try:
        x = model.embed(torch.as_tensor([list(window)], dtype=torch.long))
        low, high = model.layers[layer].rescaler.split(x)
    finally:
        model.train(was_training)
    return torch.stack([low[0].norm(dim=-1), high[0].norm(dim=-1)], dim=-1).double().numpy()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
