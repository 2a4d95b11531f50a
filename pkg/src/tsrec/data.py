"""Interaction-log ingestion, filtering, splitting, and feature construction.

All operations are pure functions of their inputs; the canonical event order
is (user id, timestamp, original file order) throughout, so results do not
depend on input row order beyond tie preservation.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig

PAD_ID = 0


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class InteractionLog:
    """Time-ordered (user, item, timestamp) events over dense id vocabularies.

    Events are stored as parallel arrays sorted stably by (user, timestamp).
    Id 0 is reserved for padding in both vocabularies; raw labels map dense
    ids back to the source file's identifiers.
    """

    user_ids: np.ndarray
    item_ids: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    user_raw: list = None
    item_raw: list = None
    _offsets: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        counts = np.bincount(self.user_ids, minlength=self.n_users + 1)
        self._offsets = np.concatenate([[0], np.cumsum(counts)])

    @property
    def n_events(self) -> int:
        return len(self.user_ids)

    def user_slice(self, u: int) -> slice:
        return slice(int(self._offsets[u]), int(self._offsets[u + 1]))

    def user_events(self, u: int):
        s = self.user_slice(u)
        return self.item_ids[s], self.timestamps[s]

    def users_present(self) -> np.ndarray:
        return np.unique(self.user_ids)

    def validate(self):
        if self.n_events == 0:
            raise DataError("log has no events")
        if (self.user_ids < 1).any() or (self.item_ids < 1).any():
            raise DataError("event references reserved padding id 0")
        if self.user_ids.max() > self.n_users or self.item_ids.max() > self.n_items:
            raise DataError("event id exceeds vocabulary size")
        for u in range(1, self.n_users + 1):
            _, ts = self.user_events(u)
            if len(ts) and (np.diff(ts) < 0).any():
                raise DataError(f"user {u} timestamps not sorted")
        if len(np.unique(self.user_ids)) != self.n_users:
            raise DataError("user vocabulary not dense")
        if len(np.unique(self.item_ids)) != self.n_items:
            raise DataError("item vocabulary not dense")
        return self


def make_log(users, items, times, user_raw=None, item_raw=None) -> InteractionLog:
    """Build a canonical log from parallel arrays (stable-sorted by user, time)."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    times = np.asarray(times, dtype=np.int64)
    order = np.lexsort((times, users))  # stable: ties keep input order
    n_users = int(users.max()) if len(users) else 0
    n_items = int(items.max()) if len(items) else 0
    if user_raw is None:
        user_raw = [""] + [str(u) for u in range(1, n_users + 1)]
    if item_raw is None:
        item_raw = [""] + [str(i) for i in range(1, n_items + 1)]
    return InteractionLog(users[order], items[order], times[order],
                          n_users, n_items, user_raw, item_raw)


@dataclass
class FixedSequence:
    """Length-L item id array, left-padded with id 0."""

    ids: np.ndarray
    content_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(len(self.ids), dtype=bool)
        if self.content_len:
            m[-self.content_len:] = True
        return m

    def __eq__(self, other):
        return (isinstance(other, FixedSequence)
                and self.content_len == other.content_len
                and np.array_equal(self.ids, other.ids))


@dataclass
class IntervalSequence:
    """Discretized gaps between consecutive consumptions of one item."""

    bins: np.ndarray

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64)

    @property
    def content_len(self) -> int:
        return len(self.bins)

    def fixed(self, n: int) -> tuple:
        """Most recent n bins, left-padded with 0; returns (bins, valid mask)."""
        out = np.zeros(n, dtype=np.int64)
        m = np.zeros(n, dtype=bool)
        tail = self.bins[-n:] if len(self.bins) > n else self.bins
        if len(tail):
            out[-len(tail):] = tail
            m[-len(tail):] = True
        return out, m

    def __eq__(self, other):
        return isinstance(other, IntervalSequence) and np.array_equal(self.bins, other.bins)


@dataclass
class RepeatIntervalMatrix:
    """Per-item grid of discretized repeat gaps for its top repeat consumers."""

    grid: np.ndarray          # (m, n) interval bins, rows left-padded with 0
    user_ids: np.ndarray      # (m,) ordered by descending repeat count, then user id
    validity_mask: np.ndarray # (m, n) True on real cells

    @property
    def m(self) -> int:
        return self.grid.shape[0]


@dataclass
class TrainingInstance:
    """One scoring context: a (user, position) with candidate-item features."""

    user_id: int
    position: int             # 0-based index of the target event in the user's sequence
    target_item_id: int
    target_time: int
    target_interval_bin: int  # new_bin sentinel when the item was never seen
    behavior_seq: FixedSequence
    last_repeat_seq: FixedSequence
    history_intervals: IntervalSequence
    label: int


# ---------------------------------------------------------------------------
# ingestion and persistence
# ---------------------------------------------------------------------------

def _raw_sort_key(raw: str):
    try:
        return (0, int(raw), "")
    except ValueError:
        return (1, 0, raw)


def ingest(path, columns: str = "user_id,item_id,timestamp",
           delimiter: str = ",") -> InteractionLog:
    """Parse a delimited event file into a canonical log.

    `columns` names the (user, item, timestamp) fields: header names, or
    0-based indices for headerless files.  Raw ids are remapped to dense ids
    1..V in sorted raw-id order; the mapping is kept on the log for
    persistence.  Lines starting with '#' are ignored.
    """
    cols = [c.strip() for c in columns.split(",")]
    if len(cols) != 3:
        raise DataError(f"columns must name 3 fields, got {columns!r}")
    positional = all(c.isdigit() for c in cols)

    rows = []
    idx = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = [p.strip() for p in line.split(delimiter)]
            if idx is None:
                if positional:
                    idx = [int(c) for c in cols]
                    if max(idx) < len(parts):
                        try:
                            int(parts[idx[2]])
                        except ValueError:
                            continue  # header row over positional columns
                    else:
                        raise DataError(f"{path}:{lineno}: row has {len(parts)} fields, "
                                        f"need index {max(idx)}")
                else:
                    if not set(cols) <= set(parts):
                        raise DataError(f"{path}:{lineno}: header {parts} does not "
                                        f"contain required columns {cols}")
                    idx = [parts.index(c) for c in cols]
                    continue
            if max(idx) >= len(parts):
                raise DataError(f"{path}:{lineno}: row has {len(parts)} fields, "
                                f"need index {max(idx)}")
            try:
                ts = int(parts[idx[2]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {parts[idx[2]]!r} "
                                "is not an integer") from None
            rows.append((parts[idx[0]], parts[idx[1]], ts))
    if not rows:
        raise DataError(f"{path}: no event rows found")

    raw_users = sorted({r[0] for r in rows}, key=_raw_sort_key)
    raw_items = sorted({r[1] for r in rows}, key=_raw_sort_key)
    umap = {raw: i + 1 for i, raw in enumerate(raw_users)}
    imap = {raw: i + 1 for i, raw in enumerate(raw_items)}
    users = np.array([umap[r[0]] for r in rows], dtype=np.int64)
    items = np.array([imap[r[1]] for r in rows], dtype=np.int64)
    times = np.array([r[2] for r in rows], dtype=np.int64)
    return make_log(users, items, times, [""] + raw_users, [""] + raw_items)


def write_events(log: InteractionLog, path, header_lines=()):
    """Write a log in the canonical event format (re-ingestable)."""
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write("user_id,item_id,timestamp\n")
        for u, i, t in zip(log.user_ids, log.item_ids, log.timestamps):
            f.write(f"{u},{i},{t}\n")


def write_id_map(raw_labels: list, path, header_lines=()):
    """Persist a dense-id mapping as two-column text (raw <TAB> dense)."""
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        for dense, raw in enumerate(raw_labels):
            if dense == 0:
                continue
            f.write(f"{raw}\t{dense}\n")


def read_id_map(path) -> list:
    labels = [""]
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            raw, dense = line.rstrip("\n").split("\t")
            if int(dense) != len(labels):
                raise DataError(f"{path}: dense ids not contiguous at {dense}")
            labels.append(raw)
    return labels


# ---------------------------------------------------------------------------
# filtering and splitting
# ---------------------------------------------------------------------------

def filter_cold_start(log: InteractionLog, min_item_interactions: int = 10) -> InteractionLog:
    """One pass: drop items seen fewer than the threshold, then users left with <= 1 event.

    Vocabularies are re-densified.  Deliberately not iterated to a fixpoint.
    """
    if min_item_interactions < 1:
        raise DataError("min_item_interactions must be >= 1")
    item_counts = np.bincount(log.item_ids, minlength=log.n_items + 1)
    keep_item = item_counts >= min_item_interactions
    keep_item[0] = False
    mask = keep_item[log.item_ids]

    users = log.user_ids[mask]
    user_counts = np.bincount(users, minlength=log.n_users + 1)
    keep_user = user_counts >= 2
    keep_user[0] = False
    mask2 = keep_user[log.user_ids] & mask

    if not mask2.any():
        raise DataError("cold-start filtering removed every event")

    old_users = log.user_ids[mask2]
    old_items = log.item_ids[mask2]
    times = log.timestamps[mask2]
    u_kept = np.flatnonzero(keep_user)
    i_kept = np.unique(old_items)
    u_remap = np.zeros(log.n_users + 1, dtype=np.int64)
    u_remap[u_kept] = np.arange(1, len(u_kept) + 1)
    i_remap = np.zeros(log.n_items + 1, dtype=np.int64)
    i_remap[i_kept] = np.arange(1, len(i_kept) + 1)
    user_raw = [""] + [log.user_raw[u] for u in u_kept] if log.user_raw else None
    item_raw = [""] + [log.item_raw[i] for i in i_kept] if log.item_raw else None
    return make_log(u_remap[old_users], i_remap[old_items], times, user_raw, item_raw)


@dataclass
class SplitLogs:
    """Per-user chronological split; boundaries index into the full log's arrays."""

    full: InteractionLog
    train_end: np.ndarray  # (n_users + 1,) absolute event index ending the train range
    val_end: np.ndarray

    def _subset(self, lo_of, hi_of) -> InteractionLog:
        keep = np.zeros(self.full.n_events, dtype=bool)
        for u in range(1, self.full.n_users + 1):
            keep[lo_of(u):hi_of(u)] = True
        return InteractionLog(self.full.user_ids[keep], self.full.item_ids[keep],
                              self.full.timestamps[keep], self.full.n_users,
                              self.full.n_items, self.full.user_raw, self.full.item_raw)

    @property
    def train(self) -> InteractionLog:
        return self._subset(lambda u: self.full.user_slice(u).start,
                            lambda u: self.train_end[u])

    @property
    def val(self) -> InteractionLog:
        return self._subset(lambda u: self.train_end[u], lambda u: self.val_end[u])

    @property
    def test(self) -> InteractionLog:
        return self._subset(lambda u: self.val_end[u],
                            lambda u: self.full.user_slice(u).stop)

    def segment_range(self, u: int, segment: str) -> tuple:
        """Local (start, stop) position range of a segment within user u's events."""
        base = self.full.user_slice(u).start
        stop = self.full.user_slice(u).stop
        if segment == "train":
            return 0, int(self.train_end[u] - base)
        if segment == "val":
            return int(self.train_end[u] - base), int(self.val_end[u] - base)
        if segment == "test":
            return int(self.val_end[u] - base), stop - base
        raise ValueError(f"unknown segment {segment!r}")


def chronological_split(log: InteractionLog,
                        fractions=(0.70, 0.10, 0.20)) -> SplitLogs:
    """Per-user split: first floor(f0*len) events train, next floor(f1*len) val, rest test.

    Users with fewer than 3 events go entirely to train.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError(f"fractions must be 3 positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {fractions}")
    train_end = np.zeros(log.n_users + 1, dtype=np.int64)
    val_end = np.zeros(log.n_users + 1, dtype=np.int64)
    for u in range(1, log.n_users + 1):
        s = log.user_slice(u)
        n = s.stop - s.start
        if n < 3:
            n_train, n_val = n, 0
        else:
            n_train = int(np.floor(fractions[0] * n))
            n_val = int(np.floor(fractions[1] * n))
        train_end[u] = s.start + n_train
        val_end[u] = s.start + n_train + n_val
    return SplitLogs(log, train_end, val_end)


# ---------------------------------------------------------------------------
# sequence / interval features
# ---------------------------------------------------------------------------

def truncate_or_pad(items, L: int) -> FixedSequence:
    """Keep the most recent L ids, left-padding with id 0 when shorter."""
    if L < 1:
        raise DataError("L must be >= 1")
    items = np.asarray(items, dtype=np.int64)
    out = np.zeros(L, dtype=np.int64)
    tail = items[-L:] if len(items) > L else items
    if len(tail):
        out[-len(tail):] = tail
    return FixedSequence(out, len(tail))


def discretize_intervals(timestamps, p_min: int, bin_max: int) -> IntervalSequence:
    """Floor-divide consecutive gaps by p_min; bins capped at bin_max."""
    if p_min <= 0:
        raise DataError("p_min must be positive")
    ts = np.asarray(timestamps, dtype=np.int64)
    if len(ts) < 1:
        raise DataError("need at least one timestamp")
    if len(ts) == 1:
        return IntervalSequence(np.zeros(0, dtype=np.int64))
    gaps = np.diff(ts)
    bins = np.minimum(gaps // p_min, bin_max)
    return IntervalSequence(bins)


def default_p_min(log: InteractionLog) -> int:
    """Smallest positive gap between consecutive events of any user (fallback 1)."""
    best = None
    for u in range(1, log.n_users + 1):
        _, ts = log.user_events(u)
        if len(ts) < 2:
            continue
        gaps = np.diff(ts)
        gaps = gaps[gaps > 0]
        if len(gaps):
            g = int(gaps.min())
            best = g if best is None else min(best, g)
    return best if best is not None else 1


def build_repeat_interval_matrix(train_log: InteractionLog, item_id: int, M: int,
                                 n: int, p_min: int, bin_max: int) -> RepeatIntervalMatrix:
    """Interval rows for the M users with the most repeat consumptions of an item.

    Repeat count is occurrences - 1; ties break by ascending user id.  Rows
    hold the most recent n discretized gaps, left-padded with bin 0 and a
    validity mask.  Items nobody repeated yield an empty (m = 0) matrix.
    """
    if not 1 <= item_id <= train_log.n_items:
        raise DataError(f"item {item_id} outside vocabulary")
    consumers = []
    for u in range(1, train_log.n_users + 1):
        items, ts = train_log.user_events(u)
        times = ts[items == item_id]
        if len(times) >= 2:
            consumers.append((len(times) - 1, u, times))
    consumers.sort(key=lambda c: (-c[0], c[1]))
    consumers = consumers[:M]
    m = len(consumers)
    grid = np.zeros((m, n), dtype=np.int64)
    mask = np.zeros((m, n), dtype=bool)
    users = np.zeros(m, dtype=np.int64)
    for r, (_, u, times) in enumerate(consumers):
        bins, valid = discretize_intervals(times, p_min, bin_max).fixed(n)
        grid[r] = bins
        mask[r] = valid
        users[r] = u
    return RepeatIntervalMatrix(grid, users, mask)


@dataclass
class RtimCache:
    """Stacked repeat-interval matrices for every item, padded to M rows."""

    bins: np.ndarray   # (n_items + 1, M, n)
    valid: np.ndarray  # (n_items + 1, M, n)
    users: np.ndarray  # (n_items + 1, M); 0 marks an absent row
    p_min: int
    bin_max: int


def build_rtim_cache(train_log: InteractionLog, M: int, n: int,
                     p_min: int, bin_max: int) -> RtimCache:
    I = train_log.n_items
    bins = np.zeros((I + 1, M, n), dtype=np.int64)
    valid = np.zeros((I + 1, M, n), dtype=bool)
    users = np.zeros((I + 1, M), dtype=np.int64)
    per_item_times: dict = {}
    for u in range(1, train_log.n_users + 1):
        items, ts = train_log.user_events(u)
        for i in np.unique(items):
            times = ts[items == i]
            if len(times) >= 2:
                per_item_times.setdefault(int(i), []).append((len(times) - 1, u, times))
    for i, consumers in per_item_times.items():
        consumers.sort(key=lambda c: (-c[0], c[1]))
        for r, (_, u, times) in enumerate(consumers[:M]):
            row_bins, row_valid = discretize_intervals(times, p_min, bin_max).fixed(n)
            bins[i, r] = row_bins
            valid[i, r] = row_valid
            users[i, r] = u
    return RtimCache(bins, valid, users, p_min, bin_max)


def write_rtim_cache(cache: RtimCache, path, header_lines=()):
    M, n = cache.bins.shape[1], cache.bins.shape[2]
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write(f"meta\tM={M}\tn={n}\tp_min={cache.p_min}\tbin_max={cache.bin_max}"
                f"\tn_items={cache.bins.shape[0] - 1}\n")
        for i in range(1, cache.bins.shape[0]):
            for r in range(M):
                if cache.users[i, r] == 0:
                    continue
                f.write(f"{i}\t{cache.users[i, r]}\t"
                        f"{';'.join(map(str, cache.bins[i, r]))}\t"
                        f"{';'.join('1' if v else '0' for v in cache.valid[i, r])}\n")


def read_rtim_cache(path) -> RtimCache:
    with open(path, encoding="utf-8") as f:
        meta = None
        rows = []
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "meta":
                meta = dict(p.split("=", 1) for p in parts[1:])
                continue
            rows.append(parts)
    if meta is None:
        raise DataError(f"{path}: missing meta line")
    M, n = int(meta["M"]), int(meta["n"])
    n_items = int(meta["n_items"])
    cache = RtimCache(np.zeros((n_items + 1, M, n), dtype=np.int64),
                      np.zeros((n_items + 1, M, n), dtype=bool),
                      np.zeros((n_items + 1, M), dtype=np.int64),
                      int(meta["p_min"]), int(meta["bin_max"]))
    row_of: dict = {}
    for item_s, user_s, bins_s, valid_s in rows:
        i = int(item_s)
        r = row_of.get(i, 0)
        row_of[i] = r + 1
        cache.bins[i, r] = [int(x) for x in bins_s.split(";")]
        cache.valid[i, r] = [x == "1" for x in valid_s.split(";")]
        cache.users[i, r] = int(user_s)
    return cache


@dataclass
class RepeatContext:
    behavior_seq: FixedSequence
    last_repeat_seq: FixedSequence
    history_intervals: IntervalSequence
    target_interval_bin: int


def extract_repeat_context(items, times, k: int, *, L: int, n_width: int,
                           p_min: int, bin_max: int) -> RepeatContext:
    """Split a user's prefix around the previous occurrence of the item at position k.

    With j = last position before k holding the same item: the behavior
    sequence is positions j+1..k-1, the last-repeat sequence is positions
    0..j-1, the interval history covers the item's consumptions up to j, and
    the target bin discretizes t_k - t_j.  Without such a j everything is
    empty and the target bin is the NEW sentinel (bin_max + 1).
    """
    items = np.asarray(items)
    times = np.asarray(times)
    target = items[k]
    prior = np.flatnonzero(items[:k] == target)
    if len(prior) == 0:
        return RepeatContext(truncate_or_pad([], L), truncate_or_pad([], L),
                             IntervalSequence(np.zeros(0, dtype=np.int64)), bin_max + 1)
    j = int(prior[-1])
    behavior = truncate_or_pad(items[j + 1:k], L)
    last_repeat = truncate_or_pad(items[:j], L)
    hist = discretize_intervals(times[prior], p_min, bin_max)
    tbin = int(min((times[k] - times[j]) // p_min, bin_max))
    return RepeatContext(behavior, last_repeat, hist, tbin)


def sliding_window_instances(split: SplitLogs, segment: str,
                             cfg: ModelConfig, p_min: int) -> list:
    """One positive instance per predictable target position in a segment.

    Features come only from events strictly before the target position.  For
    the train segment, positions at or below seq_len are included only when
    cfg.train_on_short is set; evaluation segments keep every position.
    """
    out = []
    log = split.full
    for u in range(1, log.n_users + 1):
        items, times = log.user_events(u)
        lo, hi = split.segment_range(u, segment)
        first = 1 if (segment != "train" or cfg.train_on_short) else cfg.seq_len
        start = max(lo, first)
        for k in range(start, hi):
            ctx = extract_repeat_context(items, times, k, L=cfg.seq_len,
                                         n_width=cfg.matrix_n, p_min=p_min,
                                         bin_max=cfg.bin_max)
            out.append(TrainingInstance(
                user_id=u, position=k, target_item_id=int(items[k]),
                target_time=int(times[k]), target_interval_bin=ctx.target_interval_bin,
                behavior_seq=ctx.behavior_seq, last_repeat_seq=ctx.last_repeat_seq,
                history_intervals=ctx.history_intervals, label=1))
    return out


def sample_negatives(exclusion, k: int, rng: np.random.Generator,
                     n_items: int) -> np.ndarray:
    """k distinct items drawn uniformly from the vocabulary minus the exclusion set."""
    excl = np.asarray(sorted(exclusion), dtype=np.int64)
    candidates = np.setdiff1d(np.arange(1, n_items + 1, dtype=np.int64), excl,
                              assume_unique=True)
    if len(candidates) < k:
        raise DataError(f"cannot sample {k} negatives from {len(candidates)} candidates")
    return rng.choice(candidates, size=k, replace=False)


# ---------------------------------------------------------------------------
# instance files
# ---------------------------------------------------------------------------

def _join(arr) -> str:
    return ";".join(map(str, arr)) if len(arr) else "-"


def _split_ids(s: str) -> np.ndarray:
    return np.zeros(0, dtype=np.int64) if s == "-" else np.array(
        [int(x) for x in s.split(";")], dtype=np.int64)


INSTANCE_COLUMNS = ("user", "position", "target", "target_time", "target_bin",
                    "label", "behavior", "behavior_len", "last_repeat",
                    "last_repeat_len", "history_bins")


def write_instances(instances, path, header_lines=()):
    """Columnar tab-separated instance file; sequences are ';'-joined."""
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write("\t".join(INSTANCE_COLUMNS) + "\n")
        for ins in instances:
            f.write("\t".join([
                str(ins.user_id), str(ins.position), str(ins.target_item_id),
                str(ins.target_time), str(ins.target_interval_bin), str(ins.label),
                _join(ins.behavior_seq.ids), str(ins.behavior_seq.content_len),
                _join(ins.last_repeat_seq.ids), str(ins.last_repeat_seq.content_len),
                _join(ins.history_intervals.bins),
            ]) + "\n")


def read_instances(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        header = None
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            if header is None:
                header = line.rstrip("\n").split("\t")
                if tuple(header) != INSTANCE_COLUMNS:
                    raise DataError(f"{path}: unexpected instance columns {header}")
                continue
            p = line.rstrip("\n").split("\t")
            out.append(TrainingInstance(
                user_id=int(p[0]), position=int(p[1]), target_item_id=int(p[2]),
                target_time=int(p[3]), target_interval_bin=int(p[4]), label=int(p[5]),
                behavior_seq=FixedSequence(_split_ids(p[6]), int(p[7])),
                last_repeat_seq=FixedSequence(_split_ids(p[8]), int(p[9])),
                history_intervals=IntervalSequence(_split_ids(p[10]))))
    return out


# ---------------------------------------------------------------------------
# batched feature assembly
# ---------------------------------------------------------------------------

@dataclass
class FeatureBatch:
    """Dense arrays for one forward pass; one row per (instance, candidate)."""

    user: np.ndarray          # (R,)
    item: np.ndarray          # (R,) candidate item
    target_bin: np.ndarray    # (R,)
    behavior: np.ndarray      # (R, L)
    behavior_mask: np.ndarray
    last_repeat: np.ndarray   # (R, L)
    last_repeat_mask: np.ndarray
    hist_bins: np.ndarray     # (R, n)
    hist_mask: np.ndarray
    rtim_bins: np.ndarray     # (R, M, n)
    rtim_mask: np.ndarray
    label: np.ndarray         # (R,) float 0/1

    @property
    def rows(self) -> int:
        return len(self.user)


class FeatureProvider:
    """Candidate-feature assembly over a split log, with the per-item matrix cache.

    Holds per-user event arrays and a per-(user, item) occurrence index so a
    feature row for any (user, position, candidate item) triple is a handful
    of array slices.
    """

    def __init__(self, split: SplitLogs, cfg: ModelConfig, p_min: int | None = None,
                 rtim: RtimCache | None = None):
        self.split = split
        self.cfg = cfg
        self.log = split.full
        self.p_min = p_min if p_min is not None else (
            cfg.p_min if cfg.p_min is not None else default_p_min(self.log))
        self.rtim = rtim if rtim is not None else build_rtim_cache(
            split.train, cfg.matrix_m, cfg.matrix_n, self.p_min, cfg.bin_max)
        self._user_items: dict = {}
        self._user_times: dict = {}
        self._occ: dict = {}           # (u, i) -> (positions list, times array)
        self.exclusion: dict = {}      # u -> set of items the user ever touched
        for u in range(1, self.log.n_users + 1):
            items, times = self.log.user_events(u)
            self._user_items[u] = items
            self._user_times[u] = times
            self.exclusion[u] = set(int(i) for i in np.unique(items))
            for pos, i in enumerate(items):
                self._occ.setdefault((u, int(i)), []).append(pos)

    def instances(self, segment: str) -> list:
        return sliding_window_instances(self.split, segment, self.cfg, self.p_min)

    def context_for(self, u: int, position: int, item: int,
                    target_time: int | None = None) -> RepeatContext:
        """Features of candidate `item` at a user position (prefix-only).

        `position` may equal the sequence length to score a hypothetical next
        event (the probe does this); the target time then defaults to one
        quantum past the last event.
        """
        cfg = self.cfg
        items = self._user_items[u]
        times = self._user_times[u]
        occ = self._occ.get((u, item), ())
        hi = bisect.bisect_left(occ, position)
        if hi == 0:
            empty = truncate_or_pad([], cfg.seq_len)
            return RepeatContext(empty, empty,
                                 IntervalSequence(np.zeros(0, dtype=np.int64)),
                                 cfg.new_bin)
        j = occ[hi - 1]
        behavior = truncate_or_pad(items[j + 1:position], cfg.seq_len)
        last_repeat = truncate_or_pad(items[:j], cfg.seq_len)
        prior_times = times[list(occ[:hi])]
        hist = discretize_intervals(prior_times, self.p_min, cfg.bin_max)
        if target_time is None:
            target_time = int(times[position]) if position < len(times) else (
                int(times[-1]) + self.p_min)
        tbin = int(min((target_time - times[j]) // self.p_min, cfg.bin_max))
        return RepeatContext(behavior, last_repeat, hist, tbin)

    def assemble(self, rows) -> FeatureBatch:
        """rows: iterable of (user, position, candidate item, label)."""
        cfg = self.cfg
        R = len(rows)
        L, n, M = cfg.seq_len, cfg.matrix_n, cfg.matrix_m
        batch = FeatureBatch(
            user=np.zeros(R, dtype=np.int64), item=np.zeros(R, dtype=np.int64),
            target_bin=np.zeros(R, dtype=np.int64),
            behavior=np.zeros((R, L), dtype=np.int64),
            behavior_mask=np.zeros((R, L), dtype=bool),
            last_repeat=np.zeros((R, L), dtype=np.int64),
            last_repeat_mask=np.zeros((R, L), dtype=bool),
            hist_bins=np.zeros((R, n), dtype=np.int64),
            hist_mask=np.zeros((R, n), dtype=bool),
            rtim_bins=np.zeros((R, M, n), dtype=np.int64),
            rtim_mask=np.zeros((R, M, n), dtype=bool),
            label=np.zeros(R, dtype=np.float64))
        for r, (u, pos, item, label) in enumerate(rows):
            ctx = self.context_for(u, pos, item)
            batch.user[r] = u
            batch.item[r] = item
            batch.target_bin[r] = ctx.target_interval_bin
            batch.behavior[r] = ctx.behavior_seq.ids
            batch.behavior_mask[r] = ctx.behavior_seq.mask
            batch.last_repeat[r] = ctx.last_repeat_seq.ids
            batch.last_repeat_mask[r] = ctx.last_repeat_seq.mask
            batch.hist_bins[r], batch.hist_mask[r] = ctx.history_intervals.fixed(n)
            batch.rtim_bins[r] = self.rtim.bins[item]
            batch.rtim_mask[r] = self.rtim.valid[item]
            batch.label[r] = label
        return batch

    def assemble_instances(self, instances, negatives_per: dict | None = None) -> FeatureBatch:
        """Positives plus optional per-instance negative candidate rows."""
        rows = []
        for idx, ins in enumerate(instances):
            rows.append((ins.user_id, ins.position, ins.target_item_id, 1.0))
            if negatives_per:
                for neg in negatives_per[idx]:
                    rows.append((ins.user_id, ins.position, int(neg), 0.0))
        return self.assemble(rows)
