import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recmem import annotate as A
from recmem import container
from recmem.data import Sample
from recmem.memory import MemoryBank, MemoryEntry, build_banks
from recmem.vocab import ItemVocabulary

from helpers import tiny_model, tiny_split, user_sequence


class FixedScorer:
    """Stands in for the backbone: fixed token probabilities per prefix."""

    def __init__(self, base, table):
        self.base, self.table, self.passes = np.asarray(base), table, 0

    def __call__(self, prefixes=None):
        if prefixes is None:
            self.passes += 1
            return self.base[None, :]
        self.passes += len(prefixes)
        return np.array([self.table[int(p[0])] for p in prefixes])


def bank_of(n, d=2):
    return MemoryBank("u", n + 10, [MemoryEntry(m + 1, m, np.array([m] + [0.0] * (d - 1))) for m in range(n)], d)


def sample_for(bank):
    return Sample("u@x", "u", bank.cut, "t", bank.cut, tuple(range(bank.cut - 9, bank.cut + 1)), ())


def test_delta_fixture():
    scorer = FixedScorer([0.6, 0.5], {0: [0.9, 0.8]})
    assert A.delta_for_element(scorer, [0.0, 0.0]) == pytest.approx(0.42, abs=1e-12)
    assert A.delta_from_probs([0.9, 0.8], [0.6, 0.5]) == pytest.approx(0.72 - 0.30, abs=1e-15)


def test_annotate_sample_fixture():
    # token probs chosen so the deltas come out as [0.42, 0, -0.1]
    table = {0: [0.9, 0.8], 1: [0.6, 0.5], 2: [0.4, 0.5]}
    bank = bank_of(3)
    ann = A.annotate_sample(sample_for(bank), bank, FixedScorer([0.6, 0.5], table), tau_label=1.0)
    assert ann.deltas == pytest.approx([0.42, 0.0, -0.1], abs=1e-12)
    assert ann.labels == pytest.approx([0.444135, 0.291818, 0.264047], abs=1e-6)
    assert ann.labels == pytest.approx([0.4441, 0.2918, 0.2640], abs=1e-4)


def test_labels_uniform_and_sharp():
    assert A.labels_from_deltas([0.3, 0.3, 0.3]) == pytest.approx([1 / 3] * 3, abs=1e-15)
    sharp = A.labels_from_deltas([0.42, 0.0, 0.32], tau_label=0.01)
    assert sharp.argmax() == 0 and sharp.max() > 0.999
    with pytest.raises(ValueError):
        A.labels_from_deltas([0.1], tau_label=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-0.99, 0.99), min_size=1, max_size=12), st.floats(-5, 5),
       st.sampled_from(A.TAU_GRID), st.randoms(use_true_random=False))
def test_label_properties(deltas, shift, tau, rnd):
    d = np.array(deltas)
    s = A.labels_from_deltas(d, tau)
    assert s.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(A.labels_from_deltas(d + shift, tau), s, atol=1e-12)
    top2 = np.sort(d)[-2:]
    if len(d) == 1 or top2[1] - top2[0] > 1e-9:
        assert s.argmax() == d.argmax()
    perm = list(range(len(d)))
    rnd.shuffle(perm)
    assert np.allclose(A.labels_from_deltas(d[perm], tau), s[perm], atol=1e-15)


@pytest.fixture(scope="module")
def real():
    vocab = ItemVocabulary([f"i{k}" for k in range(30)])
    model = tiny_model(vocab, seed=4)
    model.frozen = True
    seq = user_sequence("u", [f"i{(7 * k) % 30}" for k in range(16)])
    return model, seq


def test_null_prefix_gives_zero_delta(real):
    model, seq = real
    scorer = A.BackboneScorer(model, seq.items[5:15], model.vocab.tokens(seq.items[15]))
    assert abs(A.delta_for_element(scorer, model.null_prefix_vector())) < 1e-12
    assert abs(A.delta_for_element(scorer, model.null_prefix_vector(), log_space=True)) < 1e-12


def test_scorer_matches_sequence_prob(real):
    from recmem.backbone import encode_lower, sequence_prob, tokenize_prompt
    model, seq = real
    z = np.random.default_rng(0).normal(size=16)
    target = model.vocab.tokens(seq.items[15])
    scorer = A.BackboneScorer(model, seq.items[5:15], target)
    hs = encode_lower(model, tokenize_prompt(seq.items[5:15], model.vocab), prefix_vector=z)
    assert np.prod(scorer(z[None, :])[0]) == pytest.approx(sequence_prob(model, hs, target), rel=1e-10)


def test_bank_permutation_equivariance(real):
    model, seq = real
    banks = build_banks([_sample(seq)], {"u": seq}, model)
    bank = banks[("u", 15)]
    perm = np.random.default_rng(1).permutation(len(bank))
    shuffled = MemoryBank("u", 15, [bank.entries[i] for i in perm], bank.d_model)
    scorer = A.BackboneScorer(model, seq.items[5:15], model.vocab.tokens(seq.items[15]))
    a = A.annotate_sample(_sample(seq), bank, scorer)
    b = A.annotate_sample(_sample(seq), shuffled, scorer)
    assert np.allclose(b.deltas, a.deltas[perm], atol=1e-15)
    assert np.allclose(b.labels, a.labels[perm], atol=1e-15)


def _sample(seq, cut=15):
    return Sample(f"u@{cut}", "u", cut, seq.items[cut], seq.events[cut].ts,
                  tuple(range(cut - 9, cut + 1)), tuple(range(1, cut - 9)))


def test_pass_count_for_bank_of_five(real):
    model, seq = real
    s = _sample(seq)
    assert len(s.candidates) == 5
    banks = build_banks([s], {"u": seq}, model)
    _, stats = A.annotate_dataset([s], {"u": seq}, banks, model)
    assert stats["forward_passes"] == 6 and stats["computed"] == 1


def test_empty_bank_is_skipped(real, caplog):
    model, seq = real
    bank = MemoryBank("u", 15, [], 16)
    assert A.annotate_sample(_sample(seq), bank, None) is None
    with caplog.at_level("INFO"):
        out, stats = A.annotate_dataset([_sample(seq)], {"u": seq}, {("u", 15): bank}, model)
    assert out == [] and stats["skipped"] == 1 and "empty memory bank" in caplog.text


def test_cache_reuse_stale_and_corrupt(tmp_path):
    split, vocab = tiny_split(n_users=20)
    model = tiny_model(vocab)
    model.frozen = True
    samples = split.train
    banks = build_banks(samples, split.sequences, model)
    cache = tmp_path / "ann.jsonl"
    first, s1 = A.annotate_dataset(samples, split.sequences, banks, model, cache_path=cache, checkpoint_hash="h1")
    assert s1["computed"] == len(first) > 0
    again, s2 = A.annotate_dataset(samples, split.sequences, banks, model, cache_path=cache, checkpoint_hash="h1",
                                   workers=3)
    assert s2["computed"] == 0 and s2["forward_passes"] == 0 and s2["cached"] == len(first)
    assert all(np.array_equal(a.labels, b.labels) and np.array_equal(a.deltas, b.deltas) for a, b in zip(first, again))
    _, s3 = A.annotate_dataset(samples, split.sequences, banks, model, cache_path=cache, checkpoint_hash="h2")
    assert s3["computed"] == len(first)
    _, s4 = A.annotate_dataset(samples, split.sequences, banks, model, tau_label=0.1, cache_path=cache,
                               checkpoint_hash="h1")
    assert s4["computed"] == len(first)
    lines = cache.read_text().splitlines()
    json.loads(lines[0])
    cache.write_text(lines[0] + "\n{broken\n")
    with pytest.raises(container.FormatError, match="line 2"):
        A.annotate_dataset(samples, split.sequences, banks, model, cache_path=cache, checkpoint_hash="h1")


def test_workers_do_not_change_labels():
    split, vocab = tiny_split(n_users=30)
    model = tiny_model(vocab)
    banks = build_banks(split.train, split.sequences, model)
    a, _ = A.annotate_dataset(split.train, split.sequences, banks, model, workers=1)
    b, _ = A.annotate_dataset(split.train, split.sequences, banks, model, workers=4)
    assert all(np.array_equal(x.deltas, y.deltas) for x, y in zip(a, b))
