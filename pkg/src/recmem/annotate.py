"""Relevance labels from the change in target probability under each memory prefix."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import container
from . import numerics as nx
from .backbone import pack, tokenize_prompt

log = logging.getLogger(__name__)

TAU_GRID = (10.0, 1.0, 0.1, 0.01)


@dataclass
class AnnotatedSample:
    sample_id: str
    user: str
    cut: int  # with user, keys the memory bank
    target: str
    baseline: float  # P(y | null prefix), or its log in log-space mode
    deltas: np.ndarray
    labels: np.ndarray
    tau_label: float

    def to_json(self, checkpoint_hash):
        return {"sample_id": self.sample_id, "user": self.user, "cut": self.cut, "target": self.target,
                "checkpoint_hash": checkpoint_hash, "tau_label": self.tau_label, "baseline": self.baseline,
                "deltas": self.deltas.tolist(), "labels": self.labels.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(d["sample_id"], d["user"], d["cut"], d["target"], d["baseline"],
                   np.array(d["deltas"], dtype=np.float64), np.array(d["labels"], dtype=np.float64), d["tau_label"])


class BackboneScorer:
    """Teacher-forced per-token target probabilities under a batch of prefixes.

    Lower layers run once with the null prefix; rows 1.. of the layer-L
    states never see the prefix slot, so each prefix only swaps row 0 before
    the upper layers. ``passes`` counts upper-decoder evaluations.
    """

    def __init__(self, model, window_items, target_tokens, short=10):
        self.model = model
        self.target = [int(t) for t in target_tokens]
        prompt = tokenize_prompt(window_items, model.vocab, short)
        ids, _ = pack([prompt + self.target[:-1]], model.config.max_seq_len, model.vocab.pad)
        self.states = model.lower(ids).data
        self.pred = len(prompt) - 1
        self.passes = 0

    def __call__(self, prefixes=None):
        """(n, |y|) token probabilities; ``None`` means the null prefix alone."""
        x = self.states
        if prefixes is not None:
            prefixes = np.asarray(prefixes, dtype=np.float64)
            x = np.repeat(self.states, len(prefixes), axis=0)
            x[:, 0, :] = prefixes
        k = len(self.target)
        pos = np.broadcast_to(np.arange(self.pred, self.pred + k), (x.shape[0], k))
        logits = self.model.upper(x, np.ascontiguousarray(pos)).data
        self.passes += x.shape[0]
        probs = nx._softmax_array(logits, axis=-1)
        return probs[:, np.arange(k), self.target]


def delta_from_probs(with_probs, base_probs, log_space=False):
    """prod(with) - prod(base) over target tokens, or the log-ratio in log space."""
    w = np.asarray(with_probs, dtype=np.float64)
    b = np.asarray(base_probs, dtype=np.float64)
    if log_space:
        return np.log(np.maximum(w, nx.PROB_FLOOR)).sum(axis=-1) - np.log(np.maximum(b, nx.PROB_FLOOR)).sum(axis=-1)
    return np.prod(w, axis=-1) - np.prod(b, axis=-1)


def delta_for_element(scorer, z_m, baseline_probs=None, log_space=False):
    """delta_m for one memory vector; pass ``baseline_probs`` to reuse the null run."""
    if baseline_probs is None:
        baseline_probs = scorer(None)[0]
    return float(delta_from_probs(scorer(np.asarray(z_m)[None, :])[0], baseline_probs, log_space))


def labels_from_deltas(deltas, tau_label=1.0):
    if tau_label <= 0:
        raise ValueError("tau_label must be positive")
    return nx._softmax_array(np.asarray(deltas, dtype=np.float64), temperature=tau_label)


def annotate_sample(sample, bank, scorer, tau_label=1.0, log_space=False):
    """Deltas and labels over the bank, or None (logged) when the bank is empty."""
    if bank is None or len(bank) == 0:
        log.info("skip %s: empty memory bank", sample.sample_id)
        return None
    base = scorer(None)[0]
    probs = scorer(bank.vectors)
    deltas = delta_from_probs(probs, base[None, :], log_space)
    baseline = float(np.log(np.maximum(base, nx.PROB_FLOOR)).sum()) if log_space else float(np.prod(base))
    return AnnotatedSample(sample.sample_id, sample.user, sample.cut, sample.target, baseline,
                           deltas, labels_from_deltas(deltas, tau_label), float(tau_label))


# -- dataset level -----------------------------------------------------------------


def _read_cache(path):
    records = {}
    if path is None or not os.path.exists(path):
        return records
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                key = (d["sample_id"], d["checkpoint_hash"], float(d["tau_label"]))
                AnnotatedSample.from_json(d)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise container.FormatError(f"{path}: corrupt annotation cache at line {lineno} ({e})") from None
            records[key] = d
    return records


def _write_cache(path, records):
    lines = [json.dumps(records[k], sort_keys=True) for k in sorted(records)]
    container.atomic_write(path, "".join(line + "\n" for line in lines))


def annotate_dataset(samples, sequences, banks, model, tau_label=1.0, cache_path=None, checkpoint_hash=None,
                     log_space=False, workers=1, short=10):
    """Annotate every sample with a non-empty bank.

    Records are cached by (sample id, checkpoint hash, tau_label). Returns the
    annotated samples in input order and stats with the number of
    upper-decoder passes spent.
    """
    checkpoint_hash = checkpoint_hash or model.fingerprint()
    cache = _read_cache(cache_path)
    tau_label = float(tau_label)
    out = [None] * len(samples)
    todo = []
    skipped = 0
    for i, s in enumerate(samples):
        bank = banks.get((s.user, s.cut))
        if bank is None or len(bank) == 0:
            log.info("skip %s: empty memory bank", s.sample_id)
            skipped += 1
            continue
        rec = cache.get((s.sample_id, checkpoint_hash, tau_label))
        if rec is not None and len(rec["deltas"]) == len(bank):
            out[i] = AnnotatedSample.from_json(rec)
        else:
            todo.append(i)
    cached = sum(a is not None for a in out)

    def work(i):
        s = samples[i]
        items = sequences[s.user].items
        scorer = BackboneScorer(model, [items[m - 1] for m in s.window], model.vocab.tokens(s.target), short)
        return annotate_sample(s, banks[(s.user, s.cut)], scorer, tau_label, log_space), scorer.passes

    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(i) for i in todo]
    passes = 0
    for i, (ann, n) in zip(todo, results):
        out[i] = ann
        passes += n
        cache[(ann.sample_id, checkpoint_hash, tau_label)] = ann.to_json(checkpoint_hash)
    if cache_path is not None and todo:
        _write_cache(cache_path, cache)
    stats = {"forward_passes": passes, "computed": len(todo), "cached": cached, "skipped": skipped}
    return [a for a in out if a is not None], stats
