"""Memory banks: pooled layer-L states of every long-term interaction window."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container
from .backbone import HiddenSeq, encode_lower, pack, tokenize_prompt
from .data import MAX_SEQ, SHORT_WINDOW, DataError, memory_window, window

log = logging.getLogger(__name__)

BANK_MAGIC = b"MRGRMEMB"
# rows per batched encoder call; fixed so results never depend on worker count
CHUNK = 256


class EmptyStatesError(ValueError):
    pass


class StaleMemoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    index: int  # 1-based position m in the user's history
    ts: int
    vector: np.ndarray


@dataclass
class MemoryBank:
    user: str
    cut: int
    entries: list = field(default_factory=list)
    d_model: int = 0

    def __len__(self):
        return len(self.entries)

    @property
    def vectors(self):
        if not self.entries:
            return np.zeros((0, self.d_model))
        return np.stack([e.vector for e in self.entries])

    @property
    def indices(self):
        return [e.index for e in self.entries]

    @property
    def timestamps(self):
        return [e.ts for e in self.entries]

    def __eq__(self, other):
        return (isinstance(other, MemoryBank) and (self.user, self.cut, self.indices, self.timestamps)
                == (other.user, other.cut, other.indices, other.timestamps)
                and np.array_equal(self.vectors, other.vectors))


def pool_states(states, mode="last"):
    """One vector per window: the PRED-position state, or the mean over item rows."""
    rows = states.states if isinstance(states, HiddenSeq) else np.asarray(states)
    if rows.shape[0] == 0:
        raise EmptyStatesError("cannot pool an empty state sequence")
    if mode == "last":
        return rows[-1].copy()
    if mode == "mean":
        # row 0 is the prefix slot, which carries no interaction
        body = rows[1:] if rows.shape[0] > 1 else rows
        return body.mean(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def window_items(items, m, short=SHORT_WINDOW, single_item=False):
    if single_item:
        return [items[m - 1]]
    return [items[k - 1] for k in memory_window(m, short)]


def encode_one(model, items, m, short=SHORT_WINDOW, single_item=False, pooling="last"):
    """z_m recomputed from scratch for one interaction (reference path)."""
    toks = tokenize_prompt(window_items(items, m, short, single_item), model.vocab, short)
    return pool_states(encode_lower(model, toks), pooling)


class MemoryEncoder:
    """Encodes and caches z_m per (user, m) for one backbone checkpoint."""

    def __init__(self, model, short=SHORT_WINDOW, single_item=False, pooling="last", workers=1):
        self.model = model
        self.short = short
        self.single_item = single_item
        self.pooling = pooling
        self.workers = max(1, int(workers))
        self.cache = {}

    def _encode_batch(self, prompts):
        cfg = self.model.config
        ids, lengths = pack(prompts, cfg.max_seq_len, self.model.vocab.pad)
        if self.pooling == "last":
            return self.model.pooled(ids, lengths).data
        x = self.model.lower(ids).data
        return np.stack([pool_states(x[b, :lengths[b]], "mean") for b in range(len(prompts))])

    def encode(self, sequences, keys):
        """Fill the cache for (user, m) keys; encoding order is the sorted key order."""
        todo = sorted(set(k for k in keys if k not in self.cache))
        if not todo:
            return
        prompts = []
        for user, m in todo:
            items = sequences[user].items
            prompts.append(tokenize_prompt(window_items(items, m, self.short, self.single_item),
                                           self.model.vocab, self.short))
        chunks = [range(s, min(s + CHUNK, len(todo))) for s in range(0, len(todo), CHUNK)]
        run = lambda r: self._encode_batch([prompts[i] for i in r])
        if self.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(r) for r in chunks]
        for r, vecs in zip(chunks, parts):
            for i, v in zip(r, vecs):
                self.cache[todo[i]] = v.copy()

    def queries(self, sequences, samples):
        """z_t for each sample: h_t is the window ending at the cut, so it shares the cache."""
        if self.single_item:
            raise ValueError("queries need full windows; single-item encoding applies to memories only")
        keys = [(s.user, s.cut) for s in samples]
        self.encode(sequences, keys)
        return np.stack([self.cache[k] for k in keys]) if keys else np.zeros((0, self.model.config.d_model))


def bank_positions(cut, short=SHORT_WINDOW, max_len=MAX_SEQ):
    return list(window(cut, short, max_len)[1])


def build_bank(sequence, cut, model, short=SHORT_WINDOW, max_len=MAX_SEQ, encoder=None, **flags):
    """Bank of z_m for every memory candidate m of ``sequence`` at history length ``cut``."""
    if cut > len(sequence):
        raise DataError(f"cut {cut} beyond sequence of length {len(sequence)}")
    enc = encoder or MemoryEncoder(model, short, **flags)
    positions = bank_positions(cut, short, max_len)
    seqs = {sequence.user: sequence}
    enc.encode(seqs, [(sequence.user, m) for m in positions])
    entries = [MemoryEntry(m, sequence.events[m - 1].ts, enc.cache[(sequence.user, m)]) for m in positions]
    return MemoryBank(sequence.user, cut, entries, model.config.d_model)


def build_banks(samples, sequences, model, short=SHORT_WINDOW, max_len=MAX_SEQ, encoder=None, workers=1, **flags):
    """Banks for many samples, keyed by (user, cut); shared windows are encoded once."""
    enc = encoder or MemoryEncoder(model, short, workers=workers, **flags)
    wanted = {}
    for s in samples:
        wanted.setdefault((s.user, s.cut), bank_positions(s.cut, short, max_len))
    enc.encode(sequences, [(u, m) for (u, _), ms in wanted.items() for m in ms])
    banks = {}
    for (user, cut), ms in sorted(wanted.items()):
        events = sequences[user].events
        banks[(user, cut)] = MemoryBank(user, cut, [MemoryEntry(m, events[m - 1].ts, enc.cache[(user, m)]) for m in ms],
                                        model.config.d_model)
    return banks


def save_banks(path, banks, checkpoint_hash):
    """Write banks keyed by (user, cut) with the backbone hash they were built from."""
    keys = sorted(banks)
    d = max((b.d_model for b in banks.values()), default=0)
    meta = []
    vectors = []
    for key in keys:
        b = banks[key]
        meta.append({"user": b.user, "cut": b.cut, "count": len(b), "indices": b.indices, "timestamps": b.timestamps})
        vectors.extend(e.vector for e in b.entries)
    payload = np.stack(vectors) if vectors else np.zeros((0, d))
    manifest = {"checkpoint_hash": checkpoint_hash, "d_model": d, "banks": meta}
    return container.write(path, BANK_MAGIC, manifest, {"vectors": payload})


def load_banks(path, checkpoint_hash=None):
    """Inverse of ``save_banks``; refuses banks built against another checkpoint."""
    manifest, arrays = container.read(path, BANK_MAGIC)
    if checkpoint_hash is not None and manifest.get("checkpoint_hash") != checkpoint_hash:
        raise StaleMemoryError(
            f"memory bank was built from checkpoint {manifest.get('checkpoint_hash', '?')[:12]}, "
            f"current backbone is {checkpoint_hash[:12]}; rebuild memory")
    try:
        d = manifest["d_model"]
        vectors = arrays["vectors"]
        banks = {}
        row = 0
        for m in manifest["banks"]:
            n = m["count"]
            entries = [MemoryEntry(i, ts, vectors[row + k]) for k, (i, ts) in enumerate(zip(m["indices"], m["timestamps"]))]
            if len(entries) != n:
                raise container.FormatError("bank count disagrees with its index list")
            row += n
            banks[(m["user"], m["cut"])] = MemoryBank(m["user"], m["cut"], entries, d)
    except (KeyError, TypeError, IndexError) as e:
        raise container.FormatError(f"corrupt bank store: {e}") from None
    if row != len(vectors):
        raise container.FormatError("bank store payload size disagrees with manifest")
    return banks, manifest
