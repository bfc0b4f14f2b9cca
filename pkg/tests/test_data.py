"""Corpus loading, splitting, tokenization, and batching."""

import numpy as np
import pytest

from komet.data import (
    Corpus,
    Dataset,
    Vocab,
    batches,
    load_corpus,
    load_labeled_tsv,
    split_corpus,
    tokenize,
    tokenize_corpus,
)
from komet.errors import ConfigError, DataError


# ---------------------------------------------------------------------------
# loading


def test_load_corpus_counts_lines(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("one\ntwo\nthree\n")
    corpus = load_corpus([f])
    assert corpus.sequences == ["one", "two", "three"]
    assert corpus.dropped == 0


def test_load_corpus_preserves_file_order(tmp_path):
    a = tmp_path / "a.txt"
    b = tmp_path / "b.txt"
    a.write_text("1\n2\n")
    b.write_text("3\n4\n5\n")
    corpus = load_corpus([a, b])
    assert corpus.sequences == ["1", "2", "3", "4", "5"]


def test_load_corpus_drops_and_counts_empty_lines(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("one\n\ntwo\nthree\n")
    corpus = load_corpus([f])
    assert corpus.sequences == ["one", "two", "three"]
    assert corpus.dropped == 1


def test_load_corpus_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.txt"
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        load_corpus([missing])


def test_load_corpus_invalid_utf8_reports_line(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_bytes(b"fine\n\xff\xfe broken\n")
    with pytest.raises(DataError, match="line 2"):
        load_corpus([f])


def test_load_corpus_per_file_cap_and_tags(tmp_path):
    f = tmp_path / "sw.txt"
    f.write_text("a\nb\nc\nd\n")
    corpus = load_corpus([f], max_sequences=[2], tags=["sw"])
    assert corpus.sequences == ["a", "b"]
    assert corpus.tags == ["sw", "sw"]


# ---------------------------------------------------------------------------
# splitting


def test_split_80_20():
    corpus = Corpus(sequences=[f"s{i}" for i in range(10)])
    train, evalc = split_corpus(corpus, 0.8, seed=0)
    assert (len(train), len(evalc)) == (8, 2)


def test_split_floor_rule():
    corpus = Corpus(sequences=[f"s{i}" for i in range(5)])
    train, evalc = split_corpus(corpus, 0.8, seed=0)
    assert (len(train), len(evalc)) == (4, 1)


def test_split_deterministic_per_seed():
    corpus = Corpus(sequences=[f"s{i}" for i in range(20)])
    a = split_corpus(corpus, 0.8, seed=5)
    b = split_corpus(corpus, 0.8, seed=5)
    assert a[0].sequences == b[0].sequences and a[1].sequences == b[1].sequences
    c = split_corpus(corpus, 0.8, seed=6)
    assert c[0].sequences != a[0].sequences


def test_split_preserves_multiset():
    corpus = Corpus(sequences=[f"s{i}" for i in range(13)])
    train, evalc = split_corpus(corpus, 0.6, seed=1)
    assert sorted(train.sequences + evalc.sequences) == sorted(corpus.sequences)


def test_split_per_language_option():
    seqs = [f"a{i}" for i in range(10)] + [f"b{i}" for i in range(5)]
    tags = ["aa"] * 10 + ["bb"] * 5
    corpus = Corpus(sequences=seqs, tags=tags)
    train, evalc = split_corpus(corpus, 0.8, seed=2, per_language=True)
    assert train.tags.count("aa") == 8 and train.tags.count("bb") == 4
    assert evalc.tags.count("aa") == 2 and evalc.tags.count("bb") == 1


def test_split_rejects_degenerate_inputs():
    with pytest.raises(ConfigError):
        split_corpus(Corpus(sequences=["only"]), 0.8, seed=0)
    with pytest.raises(ConfigError):
        split_corpus(Corpus(sequences=["a", "b"]), 1.0, seed=0)


# ---------------------------------------------------------------------------
# vocab and tokenize


def test_vocab_reserves_pad_and_unk():
    vocab = Vocab.build(["ab ba", "ab"], mode="whitespace")
    assert min(vocab.token_to_id.values()) == 2
    assert vocab.lookup("never-seen") == 1
    assert vocab.size == len(vocab.token_to_id) + 2


def test_tokenize_char_mode_hand_trace():
    vocab = Vocab(token_to_id={"a": 2, "b": 3}, mode="char")
    ids, mask = tokenize("ab", vocab, max_len=4)
    assert ids.tolist() == [2, 3, 0, 0]
    assert mask.tolist() == [1, 1, 0, 0]


def test_tokenize_empty_text_is_all_pad():
    vocab = Vocab(token_to_id={"a": 2}, mode="char")
    ids, mask = tokenize("", vocab, max_len=3)
    assert ids.tolist() == [0, 0, 0]
    assert mask.tolist() == [0, 0, 0]


def test_tokenize_truncates_to_max_len():
    vocab = Vocab(token_to_id={"x": 2}, mode="char")
    ids, mask = tokenize("x" * 200, vocab, max_len=128)
    assert ids.shape == (128,)
    assert mask.sum() == 128


def test_tokenize_mask_marks_exactly_non_pad():
    vocab = Vocab.build(["some words here to map"], mode="whitespace")
    for text in ("some words", "", "unknown tokens everywhere", "here"):
        ids, mask = tokenize(text, vocab, max_len=6)
        np.testing.assert_array_equal(mask == 1, ids != 0)


def test_tokenize_deterministic():
    vocab = Vocab.build(["a b c"], mode="whitespace")
    a = tokenize("a c b", vocab, 5)
    b = tokenize("a c b", vocab, 5)
    np.testing.assert_array_equal(a[0], b[0])


# ---------------------------------------------------------------------------
# batching


def make_dataset(n, length=3):
    ids = np.arange(n * length).reshape(n, length) % 50 + 2
    return Dataset(token_ids=ids, mask=np.ones((n, length), dtype=np.int64))


def test_batches_sizes_with_partial_tail():
    sizes = [len(b) for b in batches(make_dataset(10), 8, seed=0)]
    assert sizes == [8, 2]


def test_batches_deterministic_per_seed_and_epoch():
    ds = make_dataset(16)
    a = [b.token_ids for b in batches(ds, 4, seed=3, epoch=1)]
    b = [b.token_ids for b in batches(ds, 4, seed=3, epoch=1)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    c = [b.token_ids for b in batches(ds, 4, seed=3, epoch=2)]
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_batches_partition_covers_dataset_once():
    ds = make_dataset(11)
    seen = np.concatenate([b.token_ids for b in batches(ds, 4, seed=7)])
    assert seen.shape == ds.token_ids.shape
    np.testing.assert_array_equal(
        np.sort(seen[:, 0]), np.sort(ds.token_ids[:, 0])
    )


def test_batches_order_independent_of_batch_size():
    ds = make_dataset(12)
    small = np.concatenate([b.token_ids for b in batches(ds, 4, seed=9, epoch=1)])
    big = np.concatenate([b.token_ids for b in batches(ds, 8, seed=9, epoch=1)])
    np.testing.assert_array_equal(small, big)


def test_tokenize_corpus_shapes():
    corpus = Corpus(sequences=["a b", "b c d", "a"])
    vocab = Vocab.build(corpus.sequences, mode="whitespace")
    ds = tokenize_corpus(corpus, vocab, max_len=4)
    assert ds.token_ids.shape == (3, 4)
    assert ds.mask.sum() == 2 + 3 + 1


# ---------------------------------------------------------------------------
# labeled data


def test_load_labeled_tsv(tmp_path):
    f = tmp_path / "train.tsv"
    f.write_text("ID\tTweet\tLabel\n1\tgood day\tpositive\n2\tbad day\tnegative\n3\tmeh\tneutral\n")
    texts, labels = load_labeled_tsv(f)
    assert texts == ["good day", "bad day", "meh"]
    assert labels == [2, 0, 1]


def test_load_labeled_tsv_rejects_bad_header_and_label(tmp_path):
    f = tmp_path / "bad.tsv"
    f.write_text("ID\tText\tLabel\n")
    with pytest.raises(DataError):
        load_labeled_tsv(f)
    g = tmp_path / "bad2.tsv"
    g.write_text("ID\tTweet\tLabel\n1\thi\tangry\n")
    with pytest.raises(DataError, match="angry"):
        load_labeled_tsv(g)
