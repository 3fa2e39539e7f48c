"""Query MLP that scores memory entries, top-1 selection and KL training."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import numerics as nx
from .backbone import CKPT_MAGIC, decode_upper, encode_lower, tokenize_prompt
from .memory import MemoryBank, pool_states
from .ranking import ground

log = logging.getLogger(__name__)


class EmptyMemoryError(ValueError):
    pass


class Retriever:
    """q = W2 act(W1 z + b1) + b2; entry scores are softmax(q . z_m)."""

    def __init__(self, d_model, hidden=256, seed=0, activation="relu", bias=True, params=None):
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.d_model, self.hidden = d_model, hidden
        self.activation, self.bias = activation, bias
        self.params = params if params is not None else self._init(seed)

    def _init(self, seed):
        rng = np.random.default_rng(seed)
        d, h = self.d_model, self.hidden

        def uniform(fan_in, *shape):
            bound = 1.0 / math.sqrt(fan_in)
            return nx.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        params = {"w1": uniform(d, d, h), "w2": uniform(h, h, d)}
        if self.bias:
            params["b1"] = uniform(d, h)
            params["b2"] = uniform(h, d)
        return params

    def param_list(self):
        return [self.params[k] for k in sorted(self.params)]

    def query(self, z):
        p = self.params
        x = nx.matmul(z, p["w1"])
        if self.bias:
            x = nx.add(x, p["b1"])
        if self.activation == "relu":
            x = nx.relu(x)
        x = nx.matmul(x, p["w2"])
        return nx.add(x, p["b2"]) if self.bias else x

    def logits(self, z_t, vectors):
        """(B, d) queries against (B, n, d) banks -> (B, n) dot products."""
        q = self.query(z_t)
        B, n, d = np.shape(vectors.data if isinstance(vectors, nx.Tensor) else vectors)
        return nx.reshape(nx.matmul(vectors, nx.reshape(q, (B, d, 1))), (B, n))

    # -- persistence --------------------------------------------------------

    def to_bytes(self):
        manifest = {"role": "retriever", "config": {"d_model": self.d_model, "hidden": self.hidden,
                                                    "activation": self.activation, "bias": self.bias}}
        return container.encode(CKPT_MAGIC, manifest, {k: self.params[k].data for k in sorted(self.params)})

    def save(self, path):
        blob = self.to_bytes()
        container.atomic_write(path, blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path):
        manifest, arrays = container.read(path, CKPT_MAGIC)
        if manifest.get("role") != "retriever":
            raise container.FormatError(f"checkpoint role is {manifest.get('role')!r}, expected 'retriever'")
        params = {k: nx.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(params=params, **manifest["config"])


def _bank_array(bank):
    vecs = bank.vectors if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)
    if vecs.ndim != 2 or vecs.shape[0] == 0:
        raise EmptyMemoryError("memory bank is empty")
    return vecs


def score(z_t, bank, retriever, temperature=1.0):
    """Softmax over bank entries of MLP(z_t) . z_m."""
    vecs = _bank_array(bank)
    z = np.asarray(z_t, dtype=np.float64)
    if z.shape != (vecs.shape[1],) or vecs.shape[1] != retriever.d_model:
        raise nx.ShapeError(f"query of shape {z.shape} against bank vectors of width {vecs.shape[1]}")
    dots = retriever.logits(z[None, :], vecs[None, :, :]).data[0]
    return nx._softmax_array(dots, temperature=temperature)


def select_top(scores):
    """Index of the highest score; ties go to the earliest entry."""
    s = np.asarray(scores)
    if s.size == 0:
        raise EmptyMemoryError("no scores to select from")
    return int(np.argmax(s))


def recommend_with_memory(window_items, bank, model, retriever, short=10):
    """(ranked item indices, retrieved entry position or None) for one short window."""
    toks = tokenize_prompt(window_items, model.vocab, short)
    hs = encode_lower(model, toks)
    picked = None
    if bank is not None and len(bank):
        picked = select_top(score(pool_states(hs), bank, retriever))
        hs = encode_lower(model, toks, prefix_vector=bank.entries[picked].vector)
    logits = decode_upper(model, hs)[:model.vocab.n_item_tokens]
    return ground(logits), picked


# -- training -------------------------------------------------------------------


@dataclass
class RetrieverTrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    hidden: int = 256
    log_every: int = 10


@dataclass
class RetrieverResult:
    retriever: Retriever
    best_epoch: int
    history: list = field(default_factory=list)


def pad_banks(vectors, labels=None):
    """Stack ragged banks into (B, n_max, d) with a validity mask."""
    n = max(len(v) for v in vectors)
    d = vectors[0].shape[1]
    Z = np.zeros((len(vectors), n, d))
    mask = np.zeros((len(vectors), n), dtype=bool)
    P = np.zeros((len(vectors), n))
    for b, v in enumerate(vectors):
        Z[b, :len(v)] = v
        mask[b, :len(v)] = True
        if labels is not None:
            P[b, :len(v)] = labels[b]
    return Z, mask, P


def kl_loss(retriever, queries, Z, mask, P):
    """Mean KL(S' || S) over rows; padded slots have zero label and zero score."""
    S = nx.softmax(retriever.logits(queries, Z), mask=mask)
    return nx.kl_div(P, S)


def train_retriever(queries, banks, labels, d_model, seed=0, cfg=None, val_fn=None, callback=None):
    """Fit the scorer to annotated labels by Adam on mean KL(S' || S).

    ``queries[i]`` is z_t, ``banks[i]`` the (n_i, d) memory matrix and
    ``labels[i]`` the n_i label distribution. ``val_fn(retriever)`` returns the
    validation Recall@1 used for early stopping (patience in epochs).
    """
    cfg = cfg or RetrieverTrainConfig()
    if len(queries) == 0:
        raise ValueError("no annotated samples to train on")
    for i, (v, y) in enumerate(zip(banks, labels)):
        if len(v) == 0:
            raise EmptyMemoryError(f"sample {i} has an empty bank")
        if len(v) != len(y):
            raise nx.ShapeError(f"sample {i}: {len(y)} labels for a bank of {len(v)}")
    retriever = Retriever(d_model, cfg.hidden, seed=seed)
    params = retriever.param_list()
    opt = nx.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([seed, 1])
    queries = np.asarray(queries, dtype=np.float64)
    best, best_epoch, best_params, stale = -np.inf, 0, None, 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(queries))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Z, mask, P = pad_banks([banks[i] for i in idx], [labels[i] for i in idx])
            with nx.Tape() as tape:
                loss = kl_loss(retriever, queries[idx], Z, mask, P)
            opt.step(tape.backward(loss, params))
            total += float(loss.data) * len(idx)
        entry = {"epoch": epoch, "loss": total / len(queries)}
        if val_fn is not None:
            entry["val_recall1"] = metric = float(val_fn(retriever))
        else:
            metric = -entry["loss"]
        history.append(entry)
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("retriever epoch %d %s", epoch, entry)
        if callback:
            callback(retriever, entry)
        if metric > best:
            best, best_epoch, stale = metric, epoch, 0
            best_params = {k: v.data.copy() for k, v in retriever.params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, v in best_params.items():
        retriever.params[k].data = v
    return RetrieverResult(retriever, best_epoch, history)
