"""Interaction logs: ingestion, filtering, windowing, chronological splits and
synthetic data with planted long-range structure."""

from __future__ import annotations

import json
import logging
import warnings
from bisect import bisect_left
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .vocab import ItemVocabulary

log = logging.getLogger(__name__)

SHORT_WINDOW = 10
MAX_SEQ = 100
DAY = 86400
# 2017-01-01T00:00:00Z
EPOCH_2017 = 1483228800


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    user: str
    item: str
    ts: int


@dataclass
class UserSequence:
    user: str
    events: list

    def __len__(self):
        return len(self.events)

    @property
    def items(self):
        return [e.item for e in self.events]


@dataclass(frozen=True)
class Sample:
    sample_id: str
    user: str
    cut: int  # history length; events[:cut] all precede the target in time
    target: str
    target_ts: int
    window: tuple  # h_t as 1-based positions
    candidates: tuple  # memory candidate positions, 1-based

    def to_json(self):
        d = asdict(self)
        d["window"] = list(self.window)
        d["candidates"] = list(self.candidates)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(d["sample_id"], d["user"], d["cut"], d["target"], d["target_ts"],
                   tuple(d["window"]), tuple(d["candidates"]))


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    boundaries: tuple
    sequences: dict = field(default_factory=dict)

    def part(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


# -- ingestion --------------------------------------------------------------


def ingest(path):
    """Parse a JSON-lines log with keys user, item, ts. Order is preserved."""
    events = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected an object")
            for key in ("user", "item", "ts"):
                if key not in obj:
                    raise DataError(f"line {lineno}: missing field {key!r}")
            ts = obj["ts"]
            if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
                raise DataError(f"line {lineno}: field 'ts' must be a non-negative integer")
            events.append(InteractionEvent(str(obj["user"]), str(obj["item"]), ts))
    return events


def write_events(path, events):
    with open(path, "w") as f:
        for e in events:
            f.write(json.dumps({"user": e.user, "item": e.item, "ts": e.ts}) + "\n")


# -- filtering ----------------------------------------------------------------


def sequence_events(events):
    """Group by user, sort each by timestamp (stable for ties)."""
    by_user = {}
    for e in events:
        by_user.setdefault(e.user, []).append(e)
    return [UserSequence(u, sorted(evs, key=lambda e: e.ts)) for u, evs in sorted(by_user.items())]


def filter_and_sequence(events, min_item_interactions=5, min_seq_len=20):
    """Drop rare items and short users until neither rule removes anything."""
    events = list(events)
    while True:
        counts = Counter(e.item for e in events)
        kept = [e for e in events if counts[e.item] >= min_item_interactions]
        lengths = Counter(e.user for e in kept)
        kept = [e for e in kept if lengths[e.user] >= min_seq_len]
        if len(kept) == len(events):
            break
        events = kept
    if not events:
        raise EmptyDatasetError("every event was removed by filtering")
    sequences = sequence_events(events)
    vocab = ItemVocabulary(sorted({e.item for e in events}))
    return sequences, vocab


# -- windowing ----------------------------------------------------------------


def window(cut, short=SHORT_WINDOW, max_len=MAX_SEQ):
    """Split a history of ``cut`` events into (h_t, memory candidates).

    Only the most recent ``min(cut, max_len)`` events count. Both results are
    ranges of 1-based positions.
    """
    if cut < 1:
        raise DataError("cut must be at least 1")
    first = max(1, cut - max_len + 1)
    split = max(first, cut - short + 1)
    return range(split, cut + 1), range(first, split)


def memory_window(m, short=SHORT_WINDOW):
    """Positions of h_m, the window of up to ``short`` events ending at m."""
    return range(max(1, m - short + 1), m + 1)


# -- splitting ------------------------------------------------------------------


def split_chronological(sequences, boundaries, short=SHORT_WINDOW, max_len=MAX_SEQ, train_start=None):
    """Emit one sample per (user, event) whose target time falls in a split.

    Intervals are closed-open: train [train_start, b0), val [b0, b1),
    test [b1, b2). The history of a sample is every event strictly earlier than
    its target.
    """
    b0, b1, b2 = boundaries
    if not b0 < b1 < b2:
        raise DataError(f"boundaries must be strictly increasing, got {boundaries}")
    lo = -np.inf if train_start is None else train_start
    parts = {"train": [], "val": [], "test": []}
    for seq in sorted(sequences, key=lambda s: s.user):
        stamps = [e.ts for e in seq.events]
        for j, e in enumerate(seq.events):
            if lo <= e.ts < b0:
                name = "train"
            elif b0 <= e.ts < b1:
                name = "val"
            elif b1 <= e.ts < b2:
                name = "test"
            else:
                continue
            cut = bisect_left(stamps, e.ts)
            if cut < 1:
                continue
            h, cands = window(cut, short, max_len)
            parts[name].append(Sample(f"{seq.user}@{j + 1}", seq.user, cut, e.item, e.ts, tuple(h), tuple(cands)))
    for name, samples in parts.items():
        if not samples:
            warnings.warn(f"{name} split is empty", stacklevel=2)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], (b0, b1, b2),
                        {s.user: s for s in sequences})


def default_boundaries(events):
    """Last 360 days of the log split 10/1/1 months (30-day months)."""
    end = max(e.ts for e in events) + 1
    start = end - 360 * DAY
    return start, (start + 300 * DAY, start + 330 * DAY, end)


# -- synthetic data -------------------------------------------------------------


@dataclass
class SyntheticConfig:
    n_users: int = 2000
    n_item_pairs: int = 200
    n_filler: int = 300
    seq_len: int = 60
    anchor_range: tuple = (1, 20)
    p_long: float = 0.7
    branching: int = 3
    seed: int = 0

    def validate(self, short=SHORT_WINDOW):
        lo, hi = self.anchor_range
        if not 1 <= lo <= hi:
            raise DataError(f"bad anchor range {self.anchor_range}")
        if self.seq_len <= short + hi:
            raise DataError("seq_len must exceed short window + anchor range")
        if not 0.0 <= self.p_long <= 1.0:
            raise DataError("p_long must lie in [0, 1]")
        if min(self.n_users, self.n_item_pairs, self.n_filler, self.branching) < 1:
            raise DataError("counts must be positive")
        if self.branching > self.n_filler:
            raise DataError("branching exceeds filler vocabulary")

    def boundaries(self):
        """(train_start, (train_end, val_end, test_end)) for the generated log."""
        return EPOCH_2017, (EPOCH_2017 + 300 * DAY, EPOCH_2017 + 330 * DAY, EPOCH_2017 + 360 * DAY)


@dataclass
class SyntheticTruth:
    """Ground truth kept alongside a generated log (for audits and tests)."""
    anchor_pos: dict  # user -> 1-based position of the anchor
    anchor: dict  # user -> anchor item
    payoff: dict  # user -> paired item
    long_target: dict  # user -> whether the final event is the paired item


def anchor_item(i):
    return f"a{i:04d}"


def payoff_item(i):
    return f"b{i:04d}"


def filler_item(i):
    return f"f{i:04d}"


def _transition_table(cfg):
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    succ = np.stack([rng.choice(cfg.n_filler, size=cfg.branching, replace=False) for _ in range(cfg.n_filler)])
    w = 0.5 ** np.arange(cfg.branching)
    return succ, w / w.sum()


def pair_map(cfg):
    """Fixed bijection anchor index -> payoff index."""
    return np.random.default_rng([cfg.seed, 0xBA1]).permutation(cfg.n_item_pairs)


def generate_synthetic(cfg, return_truth=False):
    """Users whose final event is predictable only from an early anchor.

    Every event but the last sits in a warm-up year before the split window;
    the last lands uniformly inside the 360-day split window.
    """
    cfg.validate()
    succ, probs = _transition_table(cfg)
    pairs = pair_map(cfg)
    # balanced pair assignment: each pair serves ~n_users/n_pairs users
    assign = np.random.default_rng([cfg.seed, 0xA55]).permutation(np.arange(cfg.n_users) % cfg.n_item_pairs)
    start, _ = cfg.boundaries()
    lo, hi = cfg.anchor_range
    events = []
    truth = SyntheticTruth({}, {}, {}, {})
    width = len(str(cfg.n_users - 1))
    for u in range(cfg.n_users):
        rng = np.random.default_rng([cfg.seed, u])
        user = f"u{u:0{width}d}"
        pair = int(assign[u])
        pos = int(rng.integers(lo, hi + 1))
        n_hist = cfg.seq_len - 1
        stamps = start - 360 * DAY + np.sort(rng.choice(360 * DAY, size=n_hist, replace=False))
        state = int(rng.integers(cfg.n_filler))
        branch = rng.choice(cfg.branching, size=n_hist, p=probs)
        items = []
        for k in range(1, n_hist + 1):
            if k == pos:
                items.append(anchor_item(pair))
                continue
            items.append(filler_item(state))
            state = int(succ[state, branch[k - 1]])
        is_long = bool(rng.random() < cfg.p_long)
        final = payoff_item(int(pairs[pair])) if is_long else filler_item(state)
        final_ts = start + int(rng.integers(360 * DAY))
        events.extend(InteractionEvent(user, it, int(ts)) for it, ts in zip(items, stamps))
        events.append(InteractionEvent(user, final, final_ts))
        truth.anchor_pos[user] = pos
        truth.anchor[user] = anchor_item(pair)
        truth.payoff[user] = payoff_item(int(pairs[pair]))
        truth.long_target[user] = is_long
    return (events, truth) if return_truth else events


# -- manifest i/o -------------------------------------------------------------------


def split_to_json(split, vocab=None):
    return {
        "boundaries": list(split.boundaries),
        "sequences": {u: [[e.item, e.ts] for e in s.events] for u, s in sorted(split.sequences.items())},
        "train": [s.to_json() for s in split.train],
        "val": [s.to_json() for s in split.val],
        "test": [s.to_json() for s in split.test],
    }


def split_from_json(obj):
    seqs = {u: UserSequence(u, [InteractionEvent(u, it, ts) for it, ts in evs]) for u, evs in obj["sequences"].items()}
    return DatasetSplit(
        [Sample.from_json(d) for d in obj["train"]],
        [Sample.from_json(d) for d in obj["val"]],
        [Sample.from_json(d) for d in obj["test"]],
        tuple(obj["boundaries"]),
        seqs,
    )
