"""Ranking evaluation (HR@K / NDCG@K with sampled negatives), new/repeat cohort
breakdown, dataset analyses, and the interval-response probe.

Ranking is deterministic: candidates sort by descending score with ties broken
by ascending item id.  Metric aggregation uses exact summation (integer hit
counts, fsum for gains), so cohort sums recombine to the overall sums exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureProvider, InteractionLog, TrainingInstance, sample_negatives

DEFAULT_KS = (5, 10, 20)


@dataclass
class RankedList:
    """Scored candidates for one instance; rank is 1-based."""

    item_ids: np.ndarray
    scores: np.ndarray
    truth_id: int
    rank: int


def rank_from_scores(item_ids, scores, truth_id: int) -> RankedList:
    """Rank candidates by (descending score, ascending id); truth must be present once."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(np.unique(item_ids)) != len(item_ids):
        raise ValueError("duplicate candidate item in ranking list")
    matches = np.flatnonzero(item_ids == truth_id)
    if len(matches) != 1:
        raise ValueError(f"ground truth {truth_id} not among candidates")
    order = np.lexsort((item_ids, -scores))
    rank = int(np.flatnonzero(order == matches[0])[0]) + 1
    return RankedList(item_ids, scores, truth_id, rank)


def rank_candidates(model, provider: FeatureProvider, instance: TrainingInstance,
                    negatives) -> RankedList:
    """Score the ground truth against sampled negatives with candidate-specific features."""
    negatives = np.asarray(negatives, dtype=np.int64)
    candidates = np.concatenate([[instance.target_item_id], negatives])
    rows = [(instance.user_id, instance.position, int(i), 0.0) for i in candidates]
    scores = model.score_rows(provider.assemble(rows))
    return rank_from_scores(candidates, scores, instance.target_item_id)


def hr_at_k(ranks, k: int) -> float:
    ranks = list(ranks)
    return sum(1 for r in ranks if r <= k) / len(ranks)


def ndcg_at_k(ranks, k: int) -> float:
    """Binary relevance with a single ground truth, so the ideal DCG is 1."""
    ranks = list(ranks)
    return math.fsum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / len(ranks)


def split_new_repeat(instances, new_bin: int) -> tuple:
    """Partition by whether the target item appears in the user's earlier history."""
    new = [ins for ins in instances if ins.target_interval_bin == new_bin]
    repeat = [ins for ins in instances if ins.target_interval_bin != new_bin]
    return new, repeat


@dataclass
class CohortMetrics:
    count: int
    hits: dict            # K -> integer hit count
    gains: dict           # K -> exact fsum of discounted gains

    def hr(self, k: int) -> float:
        return self.hits[k] / self.count if self.count else 0.0

    def ndcg(self, k: int) -> float:
        return self.gains[k] / self.count if self.count else 0.0


@dataclass
class MetricsReport:
    ks: tuple
    overall: CohortMetrics
    new: CohortMetrics
    repeat: CohortMetrics
    ranks: list = field(default=None, repr=False)

    def as_dict(self) -> dict:
        def block(c: CohortMetrics) -> dict:
            out = {"count": c.count}
            for k in self.ks:
                out[f"hr@{k}"] = c.hr(k)
                out[f"ndcg@{k}"] = c.ndcg(k)
            return out

        return {"overall": block(self.overall), "new": block(self.new),
                "repeat": block(self.repeat)}


def _cohort(ranks: list, ks) -> CohortMetrics:
    hits = {k: sum(1 for r in ranks if r <= k) for k in ks}
    gains = {k: math.fsum(1.0 / math.log2(r + 1) for r in ranks if r <= k) for k in ks}
    return CohortMetrics(len(ranks), hits, gains)


def _ranks_for_chunk(scorer, provider, chunk) -> list:
    ranks = []
    item_only = hasattr(scorer, "score_items")  # popularity-style ranker
    for ins, negatives in chunk:
        candidates = np.concatenate([[ins.target_item_id], negatives])
        if item_only:
            scores = scorer.score_items(candidates)
        else:
            rows = [(ins.user_id, ins.position, int(i), 0.0) for i in candidates]
            scores = scorer.score_rows(provider.assemble(rows))
        ranks.append(rank_from_scores(candidates, scores, ins.target_item_id).rank)
    return ranks


def evaluate_ranking(scorer, provider: FeatureProvider, instances,
                     n_negatives: int, seed: int, ks=DEFAULT_KS,
                     threads: int = 1) -> MetricsReport:
    """HR/NDCG over instances with per-instance fixed sampled negatives.

    The negative sets depend only on (seed, instance order), so different
    scorers evaluated with the same seed see identical candidate lists.
    Scoring parallelizes over instance chunks against frozen parameters;
    aggregation order is canonical regardless of thread count.
    """
    if not instances:
        raise ValueError("no instances to evaluate")
    rng = np.random.default_rng(seed)
    pairs = []
    for ins in instances:
        excl = provider.exclusion[ins.user_id]
        # small vocabularies cannot supply the full negative budget; ranking
        # against every non-interacted item is the strictly harder fallback
        k = min(n_negatives, provider.log.n_items - len(excl))
        pairs.append((ins, sample_negatives(excl, k, rng, provider.log.n_items)))
    if threads > 1:
        chunks = [pairs[i::threads] for i in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _ranks_for_chunk(scorer, provider, c),
                                    chunks))
        ranks = [0] * len(pairs)
        for t, chunk_ranks in enumerate(results):
            for j, r in enumerate(chunk_ranks):
                ranks[t + j * threads] = r
    else:
        ranks = _ranks_for_chunk(scorer, provider, pairs)

    new_bin = provider.cfg.new_bin
    new_idx = [i for i, ins in enumerate(instances) if ins.target_interval_bin == new_bin]
    rep_idx = [i for i, ins in enumerate(instances) if ins.target_interval_bin != new_bin]
    return MetricsReport(
        ks=tuple(ks),
        overall=_cohort(ranks, ks),
        new=_cohort([ranks[i] for i in new_idx], ks),
        repeat=_cohort([ranks[i] for i in rep_idx], ks),
        ranks=ranks)


# ---------------------------------------------------------------------------
# dataset analyses
# ---------------------------------------------------------------------------

def repeat_ratio(log: InteractionLog) -> float:
    """Fraction of events whose item already occurred earlier for that user."""
    repeats = 0
    for u in range(1, log.n_users + 1):
        items, _ = log.user_events(u)
        seen = set()
        for i in items:
            if int(i) in seen:
                repeats += 1
            seen.add(int(i))
    return repeats / log.n_events if log.n_events else 0.0


def jaccard_repeat_similarity(log: InteractionLog) -> float:
    """Mean Jaccard overlap between each repeat target's two context item sets.

    For every repeat position k with previous occurrence j, intersects the
    items strictly between j and k with the items strictly before j.  Pairs
    where both sets are empty are skipped.  Returns a fraction in [0, 1].
    """
    values = []
    for u in range(1, log.n_users + 1):
        items, _ = log.user_events(u)
        last_pos: dict = {}
        for k, it in enumerate(items):
            it = int(it)
            if it in last_pos:
                j = last_pos[it]
                sb = set(int(x) for x in items[j + 1:k])
                sl = set(int(x) for x in items[:j])
                if sb or sl:
                    values.append(len(sb & sl) / len(sb | sl))
            last_pos[it] = k
    return math.fsum(values) / len(values) if values else 0.0


def interval_histogram(log: InteractionLog, p_min: int,
                       item: int | None = None) -> dict:
    """Counts of discretized repeat gaps, over all items or one item."""
    from .data import discretize_intervals

    hist: dict = {}
    for u in range(1, log.n_users + 1):
        items, ts = log.user_events(u)
        for i in np.unique(items):
            if item is not None and int(i) != item:
                continue
            times = ts[items == i]
            if len(times) < 2:
                continue
            for b in discretize_intervals(times, p_min, bin_max=2 ** 31).bins:
                hist[int(b)] = hist.get(int(b), 0) + 1
    return hist


def avg_interactions(log: InteractionLog) -> float:
    return log.n_events / log.n_users if log.n_users else 0.0


def paired_permutation_pvalue(a, b, n_resamples: int = 10000,
                              seed: int = 0) -> float:
    """Two-sided sign-flip permutation test on paired mean difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    diff = a - b
    observed = abs(diff.mean())
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_resamples):
        signs = rng.choice([-1.0, 1.0], size=len(diff))
        if abs((diff * signs).mean()) >= observed - 1e-15:
            hits += 1
    return (hits + 1) / (n_resamples + 1)


# ---------------------------------------------------------------------------
# interval-response probe
# ---------------------------------------------------------------------------

def probe_interval_response(model, provider: FeatureProvider, user: int, item: int,
                            grid_bins, position: int | None = None) -> list:
    """Score one (user, item) context while sweeping the target interval bin.

    All other features (sequences, history, matrix) stay fixed at the chosen
    position (default: just past the user's last event).  Returns
    [(bin, score), ...] over the grid.
    """
    items, _ = provider.log.user_events(user)
    if position is None:
        position = len(items)
    rows = [(user, position, item, 0.0)] * len(list(grid_bins))
    batch = provider.assemble(rows)
    grid = np.asarray(list(grid_bins), dtype=np.int64)
    batch.target_bin = grid.copy()
    scores = model.score_rows(batch)
    return [(int(b), float(s)) for b, s in zip(grid, scores)]
