"""Decoder-only causal transformer over item tokens, split at ``split_layer``.

Prompt layout is ``[SLOT, item tokens..., PRED]``. The lower stack runs the
slot as the NULL_PREFIX token; at the split layer row 0 is overwritten with the
prefix vector (a retrieved memory, or the NULL_PREFIX embedding row when no
memory is used). The upper stack then reads every position, including row 0.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import numerics as nx
from .vocab import ItemVocabulary

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MRGRCKPT"


class ConfigError(ValueError):
    pass


class LayerError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    split_layer: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    max_seq_len: int = 12
    dropout: float = 0.0

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 1 <= self.split_layer < self.n_layers:
            raise ConfigError(f"split_layer must lie in [1, {self.n_layers}), got {self.split_layer}")
        if self.max_seq_len < 12:
            raise ConfigError("max_seq_len must be at least 12")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size too small")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self


@dataclass
class HiddenSeq:
    layer: int
    states: np.ndarray  # (positions, d_model)
    tokens: tuple
    offset: int = 0


def tokenize_prompt(window_items, vocab, short=10):
    """[SLOT] + item tokens in chronological order + [PRED]."""
    window_items = list(window_items)
    if len(window_items) > short:
        raise ValueError(f"window of {len(window_items)} items exceeds short window {short}")
    out = [vocab.null_prefix]
    for item in window_items:
        out.extend(vocab.tokens(item))
    out.append(vocab.pred)
    return out


def pack(token_lists, length, pad):
    """Right-pad token lists into an (B, length) id matrix; returns (ids, lengths)."""
    ids = np.full((len(token_lists), length), pad, dtype=np.int64)
    lengths = np.empty(len(token_lists), dtype=np.int64)
    for b, toks in enumerate(token_lists):
        if len(toks) > length:
            raise ValueError(f"sequence of length {len(toks)} exceeds max_seq_len {length}")
        ids[b, :len(toks)] = toks
        lengths[b] = len(toks)
    return ids, lengths


class Backbone:
    def __init__(self, config, vocab, params=None, seed=0):
        self.config = config.validate()
        self.vocab = vocab
        if config.vocab_size != vocab.size:
            raise ConfigError(f"config vocab_size {config.vocab_size} != vocabulary size {vocab.size}")
        self.params = params if params is not None else init_params(config, seed)
        self._frozen = False
        self._mask = np.tril(np.ones((config.max_seq_len, config.max_seq_len), dtype=bool))

    # -- parameters -----------------------------------------------------------

    @property
    def frozen(self):
        return self._frozen

    @frozen.setter
    def frozen(self, value):
        self._frozen = bool(value)
        for p in self.params.values():
            p.requires_grad = not self._frozen

    def param_list(self):
        return [self.params[k] for k in sorted(self.params)]

    def null_prefix_vector(self):
        return self.params["tok_emb"].data[self.vocab.null_prefix].copy()

    def fingerprint(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    # -- blocks -----------------------------------------------------------------

    def _block(self, i, x, rng=None):
        p = self.params
        cfg = self.config
        B, T, d = x.shape
        H = cfg.n_heads
        dh = d // H
        h = nx.layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])

        def heads(w):
            return nx.transpose(nx.reshape(nx.matmul(h, p[w]), (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(f"h{i}.wq"), heads(f"h{i}.wk"), heads(f"h{i}.wv")
        att = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = nx.softmax(att, mask=self._mask[:T, :T])
        y = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        y = nx.matmul(y, p[f"h{i}.wo"])
        x = nx.add(x, self._dropout(y, rng))
        h = nx.layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        f = nx.relu(nx.add(nx.matmul(h, p[f"h{i}.w1"]), p[f"h{i}.b1"]))
        f = nx.add(nx.matmul(f, p[f"h{i}.w2"]), p[f"h{i}.b2"])
        return nx.add(x, self._dropout(f, rng))

    def _dropout(self, y, rng):
        rate = self.config.dropout
        if rng is None or rate == 0.0:
            return y
        keep = (rng.random(y.shape) >= rate) / (1.0 - rate)
        return nx.mul(y, keep)

    def _embed(self, ids):
        T = ids.shape[1]
        return nx.add(nx.embedding(self.params["tok_emb"], ids), self.params["pos_emb"][:T])

    def _inject(self, x, prefix):
        """Replace row 0 of (B, T, d) states with ``prefix`` (B, d)."""
        B, T, d = x.shape
        return nx.concat([nx.reshape(prefix, (B, 1, d)), x[:, 1:, :]], axis=1)

    def _null_rows(self, B):
        return nx.take(self.params["tok_emb"], np.full(B, self.vocab.null_prefix))

    def _head(self, x, positions):
        """Logits at ``positions`` (B, k) -> (B, k, V)."""
        p = self.params
        B = x.shape[0]
        distinct = positions.shape[1] == 1 or bool((np.diff(np.sort(positions, axis=1), axis=1) != 0).all())
        rows = nx.take(x, (np.arange(B)[:, None], positions), unique=distinct)
        rows = nx.layer_norm(rows, p["ln_f.g"], p["ln_f.b"])
        return nx.matmul(rows, p["out.w"])

    # -- batched forward ----------------------------------------------------------

    def lower(self, ids, prefix=None, rng=None):
        """Layers 1..L on (B, T) ids; row 0 of the result holds the prefix."""
        x = self._embed(ids)
        for i in range(self.config.split_layer):
            x = self._block(i, x, rng)
        if prefix is None:
            prefix = self._null_rows(ids.shape[0])
        return self._inject(x, prefix)

    def upper(self, states, positions, rng=None):
        x = states
        for i in range(self.config.split_layer, self.config.n_layers):
            x = self._block(i, x, rng)
        return self._head(x, positions)

    def forward(self, ids, lengths, prefix=None):
        """Monolithic pass over all layers; logits (B, V) at each PRED position."""
        x = self._embed(ids)
        for i in range(self.config.n_layers):
            if i == self.config.split_layer:
                x = self._inject(x, self._null_rows(ids.shape[0]) if prefix is None else prefix)
            x = self._block(i, x)
        return self._head(x, (lengths - 1)[:, None])[:, 0, :]

    def pooled(self, ids, lengths):
        """Layer-L state at the PRED position of each row (null prefix)."""
        x = self.lower(ids)
        return nx.take(x, (np.arange(ids.shape[0]), lengths - 1), unique=True)

    # -- checkpointing --------------------------------------------------------------

    def to_bytes(self, extra=None):
        manifest = {"role": "backbone", "config": asdict(self.config), "vocab": self.vocab.to_json()}
        if extra:
            manifest["extra"] = extra
        return container.encode(CKPT_MAGIC, manifest, {k: self.params[k].data for k in sorted(self.params)})

    def save(self, path):
        blob = self.to_bytes()
        container.atomic_write(path, blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path):
        manifest, arrays = container.read(path, CKPT_MAGIC)
        if manifest.get("role") != "backbone":
            raise container.FormatError(f"checkpoint role is {manifest.get('role')!r}, expected 'backbone'")
        config = ModelConfig(**manifest["config"])
        vocab = ItemVocabulary.from_json(manifest["vocab"])
        params = {k: nx.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(config, vocab, params)


def init_params(config, seed):
    rng = np.random.default_rng(seed)
    d, f, V = config.d_model, config.ff_dim, config.vocab_size
    resid_std = 0.02 / math.sqrt(2 * config.n_layers)

    def normal(*shape, std=0.02):
        return nx.Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def const(value, n):
        return nx.Tensor(np.full(n, value), requires_grad=True)

    params = {"tok_emb": normal(V, d), "pos_emb": normal(config.max_seq_len, d)}
    for i in range(config.n_layers):
        params.update({
            f"h{i}.ln1.g": const(1.0, d), f"h{i}.ln1.b": const(0.0, d),
            f"h{i}.wq": normal(d, d), f"h{i}.wk": normal(d, d), f"h{i}.wv": normal(d, d),
            f"h{i}.wo": normal(d, d, std=resid_std),
            f"h{i}.ln2.g": const(1.0, d), f"h{i}.ln2.b": const(0.0, d),
            f"h{i}.w1": normal(d, f), f"h{i}.b1": const(0.0, f),
            f"h{i}.w2": normal(f, d, std=resid_std), f"h{i}.b2": const(0.0, d),
        })
    params.update({"ln_f.g": const(1.0, d), "ln_f.b": const(0.0, d), "out.w": normal(d, V)})
    return params


# -- single-sequence API --------------------------------------------------------------


def encode_lower(model, tokens, prefix_vector=None):
    """Layer-L states for one prompt; row 0 holds the prefix vector."""
    cfg = model.config
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) > cfg.max_seq_len:
        raise ValueError(f"sequence of length {len(tokens)} exceeds max_seq_len {cfg.max_seq_len}")
    ids, _ = pack([tokens], cfg.max_seq_len, model.vocab.pad)
    prefix = None if prefix_vector is None else np.asarray(prefix_vector, dtype=np.float64).reshape(1, -1)
    x = model.lower(ids, prefix)
    return HiddenSeq(cfg.split_layer, x.data[0, :len(tokens)].copy(), tokens)


def _repack(model, hs):
    if hs.layer != model.config.split_layer:
        raise LayerError(f"states come from layer {hs.layer}, model splits at {model.config.split_layer}")
    T = model.config.max_seq_len
    ids, _ = pack([hs.tokens], T, model.vocab.pad)
    # rows past the sequence only feed padded positions, which nothing reads
    full = model.lower(ids).data.copy()
    full[0, :len(hs.tokens)] = hs.states
    return full


def decode_upper(model, hs):
    """Next-token logits at the last (PRED) position of ``hs``."""
    full = _repack(model, hs)
    logits = model.upper(full, np.array([[len(hs.tokens) - 1]]))
    return logits.data[0, 0].copy()


def forward(model, tokens):
    """Monolithic (un-split) pass; logits at the last position."""
    ids, lengths = pack([tuple(tokens)], model.config.max_seq_len, model.vocab.pad)
    return model.forward(ids, lengths).data[0].copy()


def sequence_prob(model, hs, target):
    """Teacher-forced probability of the target token sequence after PRED."""
    target = [int(t) for t in target]
    if not target:
        raise ValueError("target must be non-empty")
    V = model.config.vocab_size
    for t in target:
        if not 0 <= t < V:
            raise IndexError(f"target token {t} outside vocabulary [0, {V})")
    if hs.layer != model.config.split_layer:
        raise LayerError(f"states come from layer {hs.layer}, model splits at {model.config.split_layer}")
    if len(target) == 1:
        logits = decode_upper(model, hs)
        return float(nx._softmax_array(logits)[target[0]])
    toks = tuple(hs.tokens) + tuple(target[:-1])
    ext = encode_lower(model, toks, prefix_vector=hs.states[0])
    ext.states[:len(hs.tokens)] = hs.states
    full = _repack(model, ext)
    start = len(hs.tokens) - 1
    pos = np.arange(start, start + len(target))[None, :]
    logits = model.upper(full, pos).data[0]
    probs = nx._softmax_array(logits, axis=-1)
    return float(np.prod(probs[np.arange(len(target)), target]))


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    p_prefix: float = 0.5
    min_epochs: int = 0
    log_every: int = 10
    # validation prefixes: "best" past window per sample, or "random" as in training
    val_prefix: str = "best"


@dataclass
class TrainResult:
    model: Backbone
    best_epoch: int
    history: list = field(default_factory=list)


class PromptSet:
    """Pre-tokenized samples: prompt ids, targets and prefix-window ids."""

    def __init__(self, samples, sequences, vocab, length, short=10):
        self.samples = list(samples)
        prompts, targets, cands = [], [], []
        for s in self.samples:
            items = sequences[s.user].items
            prompts.append(tokenize_prompt([items[m - 1] for m in s.window], vocab, short))
            targets.append(vocab.tokens(s.target))
            cands.append([tokenize_prompt([items[k - 1] for k in _hm(m, short)], vocab, short) for m in s.candidates])
        kmax = max((len(t) for t in targets), default=1)
        # teacher forcing: target tokens y_<k follow PRED
        forced = [p + list(t[:-1]) for p, t in zip(prompts, targets)]
        self.ids, self.lengths = pack(forced, length, vocab.pad)
        self.pred_pos = np.array([len(p) - 1 for p in prompts], dtype=np.int64)
        self.targets = np.full((len(targets), kmax), -1, dtype=np.int64)
        for b, t in enumerate(targets):
            self.targets[b, :len(t)] = t
        self.cands = []
        for c in cands:
            if c:
                ids, lens = pack(c, length, vocab.pad)
                self.cands.append((ids, lens))
            else:
                self.cands.append(None)

    def __len__(self):
        return len(self.samples)


def _hm(m, short):
    return range(max(1, m - short + 1), m + 1)


def _batch_loss(model, data, idx, prefix_pick, rng=None):
    """NLL of target tokens for rows ``idx``; prefix_pick[b] is a candidate index or -1."""
    ids = data.ids[idx]
    prefix = model._null_rows(len(idx))
    use = [(b, prefix_pick[b]) for b in range(len(idx)) if prefix_pick[b] >= 0]
    if use:
        win_ids = np.stack([data.cands[idx[b]][0][c] for b, c in use])
        win_len = np.array([data.cands[idx[b]][1][c] for b, c in use])
        pooled = model.lower(win_ids, rng=rng)
        pooled = nx.take(pooled, (np.arange(len(use)), win_len - 1), unique=True)
        sel = np.zeros(len(idx), dtype=np.int64)
        for j, (b, _) in enumerate(use):
            sel[b] = j + 1
        prefix = nx.take(nx.concat([model._null_rows(1), pooled], axis=0), sel)
    states = model.lower(ids, prefix, rng=rng)
    k = data.targets.shape[1]
    pos = data.pred_pos[idx][:, None] + np.arange(k)[None, :]
    pos = np.minimum(pos, ids.shape[1] - 1)
    logits = model.upper(states, pos, rng=rng)
    tg = data.targets[idx]
    valid = tg >= 0
    rows = nx.take(logits, valid)
    return nx.cross_entropy_nll(rows, tg[valid])


def pick_prefixes(data, idx, p_prefix, rng):
    out = np.full(len(idx), -1, dtype=np.int64)
    for b, i in enumerate(idx):
        c = data.cands[i]
        if c is not None and rng.random() < p_prefix:
            out[b] = rng.integers(len(c[0]))
    return out


def predict_logits(model, data, prefix_pick=None, chunk=512):
    """Item logits at PRED for every sample, in chunks of fixed size."""
    n_items = model.vocab.n_item_tokens
    out = np.empty((len(data), n_items))
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        prefix = None
        if prefix_pick is not None and (prefix_pick[idx] >= 0).any():
            rows = np.repeat(model.null_prefix_vector()[None, :], len(idx), axis=0)
            use = [b for b in range(len(idx)) if prefix_pick[idx[b]] >= 0]
            win_ids = np.stack([data.cands[idx[b]][0][prefix_pick[idx[b]]] for b in use])
            win_len = np.array([data.cands[idx[b]][1][prefix_pick[idx[b]]] for b in use])
            rows[use] = model.pooled(win_ids, win_len).data
            prefix = rows
        states = model.lower(data.ids[idx], prefix)
        logits = model.upper(states, data.pred_pos[idx][:, None])
        out[idx] = logits.data[:, 0, :n_items]
    return out


def best_window_logits(model, data, chunk=1024):
    """Item logits under the past window that maximizes the target probability.

    Samples without candidate windows use the null prefix. Ties go to the
    earliest window. Windows of all samples are scored together in fixed chunks.
    """
    n_items = model.vocab.n_item_tokens
    k = data.targets.shape[1]
    owner, win_ids, win_len = [], [], []
    for i in range(len(data)):
        if data.cands[i] is not None:
            ids_i, len_i = data.cands[i]
            owner.append(np.full(len(len_i), i))
            win_ids.append(ids_i)
            win_len.append(len_i)
    lower = model.lower(data.ids).data
    pos = np.minimum(data.pred_pos[:, None] + np.arange(k)[None, :], data.ids.shape[1] - 1)
    out = model.upper(lower, pos).data[:, 0, :n_items].copy()
    if not owner:
        return out
    owner = np.concatenate(owner)
    width = max(w.shape[1] for w in win_ids)
    win_ids = np.concatenate([np.pad(w, ((0, 0), (0, width - w.shape[1])), constant_values=model.vocab.pad)
                              for w in win_ids])
    win_len = np.concatenate(win_len)
    targets = data.targets[owner]
    best_score = np.full(len(data), -np.inf)
    for s in range(0, len(owner), chunk):
        sl = slice(s, s + chunk)
        o = owner[sl]
        states = lower[o].copy()
        states[:, 0, :] = model.pooled(win_ids[sl], win_len[sl]).data
        logits = model.upper(states, pos[o]).data
        top = logits.max(-1, keepdims=True)
        logp = logits - top - np.log(np.exp(logits - top).sum(-1, keepdims=True))
        tg = targets[sl]
        picked = np.take_along_axis(logp, np.maximum(tg, 0)[:, :, None], axis=-1)[:, :, 0]
        score = np.where(tg >= 0, picked, 0.0).sum(axis=1)
        # first strictly better window wins, so ties keep the earliest
        for j in range(len(o)):
            if score[j] > best_score[o[j]]:
                best_score[o[j]] = score[j]
                out[o[j]] = logits[j, 0, :n_items]
    return out


def recall_at_1(logits, targets):
    """Fraction of rows whose target ranks first (ties go to the smaller id)."""
    top = np.argmax(logits, axis=1)
    return float(np.mean(top == targets))


def train_backbone(train, val, vocab, config, seed=0, tcfg=None, callback=None):
    """Minimize target-token NLL with random true-past-window prefix exposure.

    Early stopping on validation Recall@1. With ``val_prefix="best"`` each
    validation sample reads its most helpful past window; with "random" the
    prefixes follow the training rule from a fixed validation stream.
    """
    tcfg = tcfg or TrainConfig()
    if len(train) == 0:
        raise ValueError("empty training set")
    model = Backbone(config, vocab, seed=seed)
    rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2]) if config.dropout > 0 else None
    params = model.param_list()
    opt = nx.Adam(params, lr=tcfg.lr)
    val_data = val if val is not None and len(val) else train
    val_targets = val_data.targets[:, 0]
    best, best_epoch, best_params = -1.0, 0, None
    history = []
    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            pick = pick_prefixes(train, idx, tcfg.p_prefix, rng)
            with nx.Tape() as tape:
                loss = _batch_loss(model, train, idx, pick, drop_rng)
            opt.step(tape.backward(loss, params))
            total += float(loss.data) * len(idx)
        if tcfg.val_prefix == "best":
            score = recall_at_1(best_window_logits(model, val_data), val_targets)
        else:
            vrng = np.random.default_rng([seed, 3])
            vpick = pick_prefixes(val_data, np.arange(len(val_data)), tcfg.p_prefix, vrng)
            score = recall_at_1(predict_logits(model, val_data, vpick), val_targets)
        history.append({"epoch": epoch, "loss": total / len(train), "val_recall1": score})
        if tcfg.log_every and epoch % tcfg.log_every == 0:
            log.info("epoch %d loss %.4f val R@1 %.4f", epoch, total / len(train), score)
        if callback:
            callback(model, history[-1])
        if score > best:
            best, best_epoch = score, epoch
            best_params = {k: v.data.copy() for k, v in model.params.items()}
        elif epoch - best_epoch >= tcfg.patience and epoch >= tcfg.min_epochs:
            break
    for k, v in best_params.items():
        model.params[k].data = v
    return TrainResult(model, best_epoch, history)
