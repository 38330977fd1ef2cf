"""Test configuration and fixtures."""

import numpy as np
import pytest

from mpa_pretrain.config import TrainConfig
from mpa_pretrain.cooccurrence import build_context_matrix
from mpa_pretrain.corpus import build_vocab, encode_pack

TINY_CORPUS = [
    "the cat sat on the mat .",
    "the dog sat on the rug .",
    "a cat and a dog played on the mat",
    "the bed is in the bedroom",
    "she put the draft on the study desk",
    "the dog slept on the bed in the bedroom",
    "a cat slept on the rug",
    "the study has a desk and a lamp .",
]


@pytest.fixture
def corpus_lines():
    """A handful of short documents."""
    return list(TINY_CORPUS)


@pytest.fixture
def vocab(corpus_lines):
    return build_vocab(corpus_lines)


@pytest.fixture
def sequences(corpus_lines, vocab):
    """Packed id sequences of the tiny corpus with max_len 16."""
    return [s.ids for s in encode_pack(corpus_lines, vocab, 16)]


@pytest.fixture
def context_matrix(corpus_lines, vocab):
    packed = list(encode_pack(corpus_lines, vocab, 16))
    return build_context_matrix(packed, vocab, topk=len(vocab) - 4, window=4)


@pytest.fixture
def tiny_config():
    """Micro models for fast training tests, dropout disabled."""
    return TrainConfig(
        mode="electra-mpa",
        steps=20,
        batch_size=2,
        max_len=16,
        lr_peak=1e-3,
        warmup_steps=2,
        dropout=0.0,
        guided_layers=1,
        guided_heads=1,
        layers=1,
        hidden=8,
        heads=2,
        ffn_dim=16,
        generator_layers=1,
        generator_hidden=8,
        generator_heads=2,
        generator_ffn_dim=16,
        checkpoint_every=0,
        log_every=5,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
