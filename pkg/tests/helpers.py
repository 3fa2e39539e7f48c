"""Small shared fixtures: a tiny backbone and a tiny planted dataset."""

import numpy as np

from recmem import data as D
from recmem.backbone import Backbone, ModelConfig


def tiny_split(n_users=40, seed=1, **kw):
    cfg = D.SyntheticConfig(n_users=n_users, n_item_pairs=5, n_filler=20, branching=1, seed=seed, **kw)
    events = D.generate_synthetic(cfg)
    seqs, vocab = D.filter_and_sequence(events)
    start, bounds = cfg.boundaries()
    return D.split_chronological(seqs, bounds, train_start=start), vocab


def tiny_model(vocab, seed=0, d_model=16):
    cfg = ModelConfig(vocab_size=vocab.size, d_model=d_model, n_heads=2, ff_dim=32)
    return Backbone(cfg, vocab, seed=seed)


def user_sequence(user, items, start=0):
    return D.UserSequence(user, [D.InteractionEvent(user, it, start + k) for k, it in enumerate(items)])


def rng(seed=0):
    return np.random.default_rng(seed)
