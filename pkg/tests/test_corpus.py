"""Tests for vocabulary building and sequence packing."""

from collections import Counter

import numpy as np
import pytest

from mpa_pretrain.corpus import (
    CLS_ID,
    NUM_SPECIALS,
    SPECIAL_TOKENS,
    UNK_ID,
    Vocabulary,
    build_vocab,
    count_tokens,
    encode_pack,
    read_lines,
    tokenize,
)
from mpa_pretrain.errors import ConfigError, FormatError, IngestionError


def test_tokenize():
    """Test lowercasing and punctuation splitting."""
    assert tokenize("The cat, sat.") == ["the", "cat", ",", "sat", "."]
    assert tokenize("   ") == []


def test_vocab_order_matches_count_sort(corpus_lines):
    """Test that ids follow descending count with ties broken alphabetically."""
    vocab = build_vocab(corpus_lines)
    counts = Counter(t for line in corpus_lines for t in line.lower().split())
    expected = sorted(counts, key=lambda t: (-counts[t], t))
    assert vocab.tokens[:NUM_SPECIALS] == list(SPECIAL_TOKENS)
    assert vocab.tokens[NUM_SPECIALS:] == expected
    assert vocab.counts[NUM_SPECIALS:] == [counts[t] for t in expected]


def test_vocab_truncation_counts_unknown():
    """Test that dropped tokens are accounted for under UNK."""
    vocab = build_vocab(["a a a b b c"], max_size=1)
    assert vocab.tokens == list(SPECIAL_TOKENS) + ["a"]
    assert vocab.counts[UNK_ID] == 3
    assert vocab.encode("a c") == [NUM_SPECIALS, UNK_ID]


def test_vocab_min_count():
    """Test the minimum-count filter."""
    vocab = build_vocab(["a a b"], min_count=2)
    assert "a" in vocab and "b" not in vocab


def test_vocab_invalid_limits():
    """Test invalid size limits."""
    with pytest.raises(ConfigError):
        Vocabulary.from_counts(Counter({"a": 1}), max_size=-1)
    with pytest.raises(ConfigError):
        Vocabulary.from_counts(Counter({"a": 1}), max_size=5, min_count=0)


def test_empty_corpus():
    """Test that a corpus without tokens cannot be ingested."""
    with pytest.raises(IngestionError, match="no tokens"):
        build_vocab(["", "   "])


def test_vocab_text_format(tmp_path, vocab):
    """Test that the saved vocabulary reloads to the same mapping and is byte-stable."""
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    first = path.read_bytes()
    assert first.startswith(f"mpa-vocab v1 {len(vocab)}\n".encode())
    loaded = Vocabulary.load(path)
    assert loaded.tokens == vocab.tokens
    assert loaded.counts == vocab.counts
    loaded.save(path)
    assert path.read_bytes() == first


@pytest.mark.parametrize(
    "text,message",
    [
        ("", "header"),
        ("mpa-vocab v1 x\n", "invalid vocabulary header"),
        ("mpa-vocab v1 5\n[PAD]\t0\n", "declares 5 tokens"),
        ("mpa-vocab v1 4\n[PAD]\t0\n[MASK]\t0\n[UNK]\tzero\n[CLS]\t0\n", "malformed"),
        ("mpa-vocab v1 4\n[PAD]\t0\n[UNK]\t0\n[MASK]\t0\n[CLS]\t0\n", "must start with"),
    ],
)
def test_corrupted_vocab(text, message):
    """Test that malformed vocabulary files raise a format error."""
    with pytest.raises(FormatError, match=message):
        Vocabulary.from_text(text)


def test_read_lines(tmp_path):
    """Test that documents are read one per line without newlines."""
    path = tmp_path / "corpus.txt"
    path.write_text("first doc\nsecond doc\n", encoding="utf-8")
    assert list(read_lines(path)) == ["first doc", "second doc"]


def test_read_lines_invalid_utf8(tmp_path):
    """Test that undecodable bytes raise an ingestion error naming the line."""
    path = tmp_path / "corpus.txt"
    path.write_bytes(b"hello world\n\xff\xfe bad\n")
    with pytest.raises(IngestionError, match="corpus.txt:2"):
        list(read_lines(path))


def test_vocab_invalid_utf8(tmp_path):
    """Test that an undecodable vocabulary file is a format error."""
    path = tmp_path / "vocab.txt"
    path.write_bytes(b"mpa-vocab v1 4\n\xff\n")
    with pytest.raises(FormatError, match="not valid UTF-8"):
        Vocabulary.load(path)


def test_count_tokens_shards_merge(corpus_lines):
    """Test that shard counts add up to the whole-corpus count."""
    whole = count_tokens(corpus_lines)
    merged = count_tokens(corpus_lines[:3]) + count_tokens(corpus_lines[3:])
    assert whole == merged


@pytest.mark.parametrize("max_len", [2, 5, 16, 64])
def test_encode_pack_conserves_tokens(corpus_lines, vocab, max_len):
    """Test that packing neither drops nor duplicates tokens."""
    packed = list(encode_pack(corpus_lines, vocab, max_len))
    assert all(s.ids[0] == CLS_ID for s in packed)
    assert all(s.length <= max_len for s in packed)
    body = np.concatenate([s.ids[1:] for s in packed])
    expected = [i for line in corpus_lines for i in vocab.encode(line)]
    assert body.tolist() == expected


def test_encode_pack_records_document_starts(vocab):
    """Test that boundaries point at the first token of each document."""
    packed = list(encode_pack(["the cat", "the dog sat"], vocab, 16))
    assert len(packed) == 1
    assert packed[0].boundaries == (1, 3)


def test_encode_pack_rejects_tiny_max_len(vocab):
    """Test that max_len must leave room for CLS and a token."""
    with pytest.raises(ConfigError):
        list(encode_pack(["the cat"], vocab, 1))
