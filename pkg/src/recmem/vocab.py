from __future__ import annotations

import json

NULL_PREFIX = "<null_prefix>"
PRED = "<pred>"
PAD = "<pad>"
SPECIALS = (NULL_PREFIX, PRED, PAD)


class UnknownItemError(KeyError):
    pass


class ItemVocabulary:
    """Bidirectional item-id <-> token-sequence map.

    Items get one token each unless ``token_seqs`` is given. Special tokens are
    allocated after every item token.
    """

    def __init__(self, item_ids, token_seqs=None):
        self.items = list(item_ids)
        if len(set(self.items)) != len(self.items):
            raise ValueError("duplicate item ids")
        if token_seqs is None:
            token_seqs = [(i,) for i in range(len(self.items))]
        token_seqs = [tuple(int(t) for t in seq) for seq in token_seqs]
        if len(token_seqs) != len(self.items):
            raise ValueError("one token sequence per item required")
        if any(len(s) == 0 for s in token_seqs):
            raise ValueError("token sequences must be non-empty")
        if len(set(token_seqs)) != len(token_seqs):
            raise ValueError("token sequences must be unique per item")
        self.token_seqs = token_seqs
        self.n_item_tokens = 1 + max(t for s in token_seqs for t in s) if token_seqs else 0
        self.null_prefix = self.n_item_tokens
        self.pred = self.n_item_tokens + 1
        self.pad = self.n_item_tokens + 2
        self.size = self.n_item_tokens + len(SPECIALS)
        self._index = {item: i for i, item in enumerate(self.items)}
        self._by_tokens = {seq: item for item, seq in zip(self.items, token_seqs)}

    def __len__(self):
        return len(self.items)

    def __contains__(self, item):
        return item in self._index

    @property
    def single_token(self):
        return all(len(s) == 1 for s in self.token_seqs)

    def index(self, item):
        try:
            return self._index[item]
        except KeyError:
            raise UnknownItemError(f"unknown item id {item!r}") from None

    def tokens(self, item):
        return self.token_seqs[self.index(item)]

    def item_for_tokens(self, tokens):
        return self._by_tokens[tuple(tokens)]

    def to_json(self):
        return {
            "items": self.items,
            "tokens": [list(s) for s in self.token_seqs],
            "specials": {NULL_PREFIX: self.null_prefix, PRED: self.pred, PAD: self.pad},
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["items"], obj["tokens"])

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))

    def __eq__(self, other):
        return isinstance(other, ItemVocabulary) and self.items == other.items and self.token_seqs == other.token_seqs
