"""Full-ranking evaluation of retrieval variants, comparison tables and audit export."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import container
from . import numerics as nx
from .annotate import BackboneScorer, delta_from_probs
from .backbone import pack, tokenize_prompt
from .ranking import ndcg_at_k, recall_at_k, target_ranks
from .retriever import Retriever

log = logging.getLogger(__name__)

VARIANTS = ("no_memory", "random", "semantic", "oracle", "learned")
MEMORY_VARIANTS = VARIANTS[1:]
CHUNK = 256


class VariantError(ValueError):
    pass


@dataclass
class MetricsReport:
    variant: str
    seed: int
    ks: tuple
    metrics: dict
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def sample_ids(self):
        return [r["sample_id"] for r in self.rows]

    def to_json(self):
        return {"variant": self.variant, "seed": self.seed, "ks": list(self.ks), "metrics": self.metrics,
                "meta": self.meta, "rows": self.rows}

    @classmethod
    def from_json(cls, d):
        return cls(d["variant"], d["seed"], tuple(d["ks"]), d["metrics"], d["rows"], d.get("meta", {}))

    def save(self, path):
        blob = json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"
        container.atomic_write(path, blob)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def _cosine_pick(z, vecs):
    num = vecs @ z
    den = np.linalg.norm(vecs, axis=1) * np.linalg.norm(z)
    sim = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return int(np.argmax(sim))


def _item_scores(model, logits):
    """Per-item scores: logits for single-token items, negative L2 otherwise."""
    vocab = model.vocab
    if vocab.single_token:
        return logits[:, [seq[0] for seq in vocab.token_seqs]]
    # expected next-token embedding, grounded to item embeddings by L2
    emb = model.params["tok_emb"].data
    items = np.stack([emb[list(seq)].mean(axis=0) for seq in vocab.token_seqs])
    gen = nx._softmax_array(logits, axis=-1) @ emb
    return -np.sqrt(((gen[:, None, :] - items[None, :, :]) ** 2).sum(axis=-1))


def pick_entry(variant, sample, z_t, bank, model, sequences, retriever=None, rng=None, short=10):
    """Position in ``bank`` chosen by a variant, or None for the null prefix."""
    if variant == "no_memory" or bank is None or len(bank) == 0:
        return None
    vecs = bank.vectors
    if variant == "random":
        return int(rng.integers(len(bank)))
    if variant == "semantic":
        return _cosine_pick(z_t, vecs)
    if variant == "oracle":
        items = sequences[sample.user].items
        scorer = BackboneScorer(model, [items[m - 1] for m in sample.window], model.vocab.tokens(sample.target), short)
        deltas = delta_from_probs(scorer(vecs), scorer(None))
        return int(np.argmax(deltas))
    if variant == "learned":
        dots = retriever.logits(z_t[None, :], vecs[None, :, :]).data[0]
        return int(np.argmax(dots))
    raise VariantError(f"unknown variant {variant!r}")


def _scores_for(model, sequences, samples, prefixes, short):
    vocab = model.vocab
    prompts = [tokenize_prompt([sequences[s.user].items[m - 1] for m in s.window], vocab, short) for s in samples]
    ids, lengths = pack(prompts, model.config.max_seq_len, vocab.pad)
    states = model.lower(ids, prefixes)
    logits = model.upper(states, (lengths - 1)[:, None]).data[:, 0, :]
    return _item_scores(model, logits)


def run_eval(samples, sequences, variant, model, banks, encoder, retriever=None, seed=0, ks=(1, 5), workers=1,
             short=10):
    """Rank every sample's target over the full item set under one retrieval variant."""
    if variant not in VARIANTS:
        raise VariantError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if variant == "learned" and not isinstance(retriever, Retriever):
        raise VariantError("variant 'learned' needs a trained retriever")
    if variant != "learned":
        retriever = None
    samples = list(samples)
    queries = encoder.queries(sequences, samples)
    null = model.null_prefix_vector()
    targets = np.array([model.vocab.index(s.target) for s in samples], dtype=np.int64)

    def work(r):
        picks, prefixes = [], []
        for i in r:
            s = samples[i]
            bank = banks.get((s.user, s.cut))
            rng = np.random.default_rng([seed, i]) if variant == "random" else None
            p = pick_entry(variant, s, queries[i], bank, model, sequences, retriever, rng, short)
            picks.append(p)
            prefixes.append(null if p is None else bank.entries[p].vector)
        chunk = [samples[i] for i in r]
        ranks = target_ranks(_scores_for(model, sequences, chunk, np.stack(prefixes), short), targets[list(r)])
        base = ranks if variant == "no_memory" else target_ranks(
            _scores_for(model, sequences, chunk, np.repeat(null[None, :], len(chunk), axis=0), short), targets[list(r)])
        return picks, ranks, base

    chunks = [range(s, min(s + CHUNK, len(samples))) for s in range(0, len(samples), CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(r) for r in chunks]

    rows = []
    for r, (picks, ranks, base) in zip(chunks, parts):
        for i, p, rank, b in zip(r, picks, ranks, base):
            s = samples[i]
            entry = None if p is None else banks[(s.user, s.cut)].entries[p]
            rows.append({
                "sample_id": s.sample_id, "user": s.user, "target": s.target, "history_len": s.cut,
                "target_rank": int(rank), "no_memory_rank": int(b),
                "retrieved_index": None if entry is None else entry.index,
                "retrieved_ts": None if entry is None else entry.ts,
                "improved": bool(rank < b),
            })
    metrics = {}
    for k in ks:
        metrics[f"recall@{k}"] = float(np.mean([recall_at_k(r["target_rank"], k) for r in rows])) if rows else 0.0
        metrics[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r["target_rank"], k) for r in rows])) if rows else 0.0
    return MetricsReport(variant, seed if variant == "random" else 0, tuple(ks), metrics, rows)


# -- comparison ---------------------------------------------------------------------


def percentiles(values, qs=(25, 50, 75)):
    """Linear-interpolation percentiles (numpy's default rule)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {f"p{q}": None for q in qs}
    return {f"p{q}": float(np.percentile(v, q, method="linear")) for q in qs}


def compare(reports, reference="no_memory"):
    """Metric table with deltas against the reference variant plus distribution summaries.

    Reports may span several seeds; every report must cover the same samples.
    """
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    ids = reports[0].sample_ids
    for r in reports[1:]:
        if r.sample_ids != ids:
            raise ValueError(f"report {r.variant!r} (seed {r.seed}) covers a different split")
    ref = next((r for r in reports if r.variant == reference), reports[0])
    table = []
    for r in reports:
        row = {"variant": r.variant, "seed": r.seed, "run": r.meta.get("run_seed")}
        for k, v in r.metrics.items():
            row[k] = v
            row[f"delta_{k}"] = v - ref.metrics.get(k, 0.0)
        table.append(row)
    per_sample = {}
    for r in reports:
        gains = [row["no_memory_rank"] - row["target_rank"] for row in r.rows]
        per_sample[f"{r.variant}/{r.seed}"] = percentiles(gains)
    per_seed = {}
    for variant in dict.fromkeys(r.variant for r in reports):
        group = [r for r in reports if r.variant == variant]
        per_seed[variant] = {k: percentiles([r.metrics[k] for r in group]) for k in group[0].metrics}
    return {"reference": ref.variant, "table": table, "per_sample_rank_gain": per_sample, "per_seed": per_seed}


def write_table_csv(path, comparison):
    rows = comparison["table"]
    cols = list(dict.fromkeys(k for row in rows for k in row))
    _write_csv(path, cols, rows)


# -- timestamp audit ------------------------------------------------------------------

AUDIT_FIELDS = ("variant", "seed", "sample_id", "history_len", "retrieved_index", "retrieved_ts",
                "relative_position", "improved")

AUDIT_ROW_SCHEMA = {
    "type": "object",
    "required": list(AUDIT_FIELDS),
    "additionalProperties": False,
    "properties": {
        "variant": {"enum": list(MEMORY_VARIANTS)},
        "seed": {"type": "integer"},
        "sample_id": {"type": "string", "minLength": 1},
        "history_len": {"type": "integer", "minimum": 1},
        "retrieved_index": {"type": ["integer", "null"], "minimum": 1},
        "retrieved_ts": {"type": ["integer", "null"], "minimum": 0},
        "relative_position": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "improved": {"type": "boolean"},
    },
}


def audit_rows(reports):
    """One row per evaluated sample of every memory-using report."""
    out = []
    for r in reports:
        if r.variant not in MEMORY_VARIANTS:
            continue
        for row in r.rows:
            m = row["retrieved_index"]
            out.append({
                "variant": r.variant, "seed": r.seed, "sample_id": row["sample_id"], "history_len": row["history_len"],
                "retrieved_index": m, "retrieved_ts": row["retrieved_ts"],
                "relative_position": None if m is None else m / row["history_len"],
                "improved": row["improved"],
            })
    return out


def _write_csv(path, cols, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in cols})
    container.atomic_write(path, buf.getvalue())


def write_audit_csv(path, reports):
    rows = audit_rows(reports)
    for row in rows:
        jsonschema.validate(row, AUDIT_ROW_SCHEMA)
    _write_csv(path, AUDIT_FIELDS, rows)
    return len(rows)


def read_audit_csv(path):
    """Parse an audit export back into typed rows and validate each one."""
    conv = {"seed": int, "history_len": int, "retrieved_index": int, "retrieved_ts": int, "relative_position": float}
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != AUDIT_FIELDS:
            raise jsonschema.ValidationError(f"audit header {reader.fieldnames} != {list(AUDIT_FIELDS)}")
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k == "improved":
                    row[k] = {"True": True, "False": False}.get(v, v)
                elif k in conv:
                    row[k] = None if v == "" else conv[k](v)
                else:
                    row[k] = v
            jsonschema.validate(row, AUDIT_ROW_SCHEMA)
            rows.append(row)
    return rows


def early_share(rows, variant="learned", third=1 / 3):
    """Fraction of improved samples whose retrieved entry lies in the earliest third of the history."""
    improved = [r for r in rows if r["variant"] == variant and r["improved"] and r["retrieved_index"] is not None]
    if not improved:
        return 0.0
    return sum(r["relative_position"] <= third for r in improved) / len(improved)
