"""Tests for the masking policies and generator sampling."""

import numpy as np
import pytest

from mpa_pretrain.corpus import CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID
from mpa_pretrain.errors import ConfigError, ContractError
from mpa_pretrain.objectives.masking import (
    MaskedBatch,
    apply_mlm_mask,
    maskable,
    sample_replacements,
)

VOCAB_SIZE = 10_000


def random_batch(rng, count=4, length=12, vocab_size=50):
    return [
        np.concatenate([[CLS_ID], rng.integers(NUM_SPECIALS, vocab_size, length - 1)])
        for _ in range(count)
    ]


def test_mask_prob_zero():
    """Test that nothing is masked at probability 0."""
    x = random_batch(np.random.default_rng(0))
    batch = apply_mlm_mask(x, "bert", 0.0, np.random.default_rng(1), 50)
    assert batch.num_masked == 0
    for original, masked in zip(batch.x, batch.x_masked):
        assert np.array_equal(original, masked)


def test_electra_policy_masks_everything_with_mask():
    """Test that every selected position holds MASK under the generator policy."""
    x = random_batch(np.random.default_rng(0), count=20)
    batch = apply_mlm_mask(x, "electra-gen", 0.3, np.random.default_rng(1), 50)
    assert batch.num_masked > 0
    for masked, positions in zip(batch.x_masked, batch.mask_positions):
        assert (masked[positions] == MASK_ID).all()
    batch.check_invariants()


def test_specials_never_masked():
    """Test that CLS and PAD are never selected even at probability 1."""
    x = [np.array([CLS_ID, 5, 6, PAD_ID, PAD_ID])]
    batch = apply_mlm_mask(x, "electra-gen", 1.0, np.random.default_rng(0), 50)
    assert batch.mask_positions[0].tolist() == [1, 2]
    assert maskable(x[0]).tolist() == [False, True, True, False, False]


def test_masking_is_deterministic_per_seed():
    """Test that the same generator state gives the same mask."""
    x = random_batch(np.random.default_rng(0))
    a = apply_mlm_mask(x, "bert", 0.15, np.random.default_rng(9), 50)
    b = apply_mlm_mask(x, "bert", 0.15, np.random.default_rng(9), 50)
    for left, right in zip(a.x_masked, b.x_masked):
        assert np.array_equal(left, right)


def test_masking_rates_monte_carlo():
    """Over 10^6 positions: selection 0.15 and the 80/10/10 split, each within 0.01."""
    rng = np.random.default_rng(2024)
    x = [rng.integers(NUM_SPECIALS, VOCAB_SIZE, 1000) for _ in range(1000)]
    batch = apply_mlm_mask(x, "bert", 0.15, np.random.default_rng(7), VOCAB_SIZE)
    original = np.concatenate(batch.x)
    masked = np.concatenate(batch.x_masked)
    selected = np.concatenate(
        [p + i * 1000 for i, p in enumerate(batch.mask_positions)]
    )
    assert abs(selected.shape[0] / original.shape[0] - 0.15) < 0.01

    at_mask = masked[selected] == MASK_ID
    kept = masked[selected] == original[selected]
    random_word = ~at_mask & ~kept
    # A random word equal to the original is indistinguishable from a kept one (p = 1e-4).
    assert abs(at_mask.mean() - 0.8) < 0.01
    assert abs(random_word.mean() - 0.1) < 0.01
    assert abs(kept.mean() - 0.1) < 0.01
    assert (masked[random_word] >= NUM_SPECIALS).all()


def test_masking_matches_naive_per_position_draws():
    """Test the vectorized masking against a per-position reading of the same random draws."""
    x = random_batch(np.random.default_rng(3), count=3, length=8)
    batch = apply_mlm_mask(x, "bert", 0.5, np.random.default_rng(11), 50)
    rng = np.random.default_rng(11)
    n = sum(ids.shape[0] for ids in x)
    select, split, words = rng.random(n), rng.random(n), rng.integers(NUM_SPECIALS, 50, size=n)
    flat = np.concatenate(x)
    expected = []
    for k, token in enumerate(flat):
        if token < NUM_SPECIALS or select[k] >= 0.5:
            expected.append(token)
        elif split[k] < 0.8:
            expected.append(MASK_ID)
        elif split[k] < 0.9:
            expected.append(words[k])
        else:
            expected.append(token)
    assert np.concatenate(batch.x_masked).tolist() == expected


def test_invalid_masking_arguments():
    """Test policy and probability validation."""
    x = [np.array([CLS_ID, 5])]
    with pytest.raises(ConfigError, match="unknown masking policy"):
        apply_mlm_mask(x, "span", 0.15, np.random.default_rng(0), 50)
    with pytest.raises(ConfigError, match="mask_prob"):
        apply_mlm_mask(x, "bert", 1.5, np.random.default_rng(0), 50)
    with pytest.raises(ContractError):
        apply_mlm_mask([], "bert", 0.15, np.random.default_rng(0), 50)


def one_hot_logits(rows, vocab_size, hot):
    logits = np.zeros((rows, vocab_size))
    logits[np.arange(rows), hot] = 1000.0
    return logits


def test_one_hot_logits_on_truth():
    """Test that a certain correct generator replaces nothing."""
    x = random_batch(np.random.default_rng(0), count=2)
    batch = apply_mlm_mask(x, "electra-gen", 0.5, np.random.default_rng(1), 50)
    logits = [one_hot_logits(ids.shape[0], 50, ids) for ids in batch.x]
    sampled = sample_replacements(logits, batch, np.random.default_rng(2))
    assert sampled.num_mispredicted == 0
    for original, replaced in zip(sampled.x, sampled.x_replaced):
        assert np.array_equal(original, replaced)


def test_one_hot_logits_on_wrong_token():
    """Test that a certain wrong generator mis-predicts every masked position."""
    x = random_batch(np.random.default_rng(0), count=2)
    batch = apply_mlm_mask(x, "electra-gen", 0.5, np.random.default_rng(1), 50)
    wrong = [np.where(ids == 7, 8, 7) for ids in batch.x]
    logits = [one_hot_logits(ids.shape[0], 50, w) for ids, w in zip(batch.x, wrong)]
    sampled = sample_replacements(logits, batch, np.random.default_rng(2))
    for positions, missed in zip(sampled.mask_positions, sampled.mispredictions):
        assert np.array_equal(positions, missed)
    sampled.check_invariants()
    assert sampled.misprediction_rate == 1.0


def test_sampling_frequencies_match_softmax():
    """Over 10^5 draws the empirical frequencies match the softmax within 0.01."""
    logits_row = np.array([0.5, 2.0, -1.0, 1.0, 0.0])
    probs = np.exp(logits_row) / np.exp(logits_row).sum()
    n = 100_000
    x = [np.full(n, 4)]
    batch = MaskedBatch(x, [np.full(n, MASK_ID)], [np.arange(n)])
    sampled = sample_replacements(
        [np.tile(logits_row, (n, 1))], batch, np.random.default_rng(5)
    )
    counts = np.bincount(sampled.x_replaced[0], minlength=5) / n
    assert np.max(np.abs(counts - probs)) < 0.01


def test_argmax_sampling():
    """Test the deterministic argmax variant."""
    batch = MaskedBatch([np.array([CLS_ID, 4, 5])], [np.array([CLS_ID, 1, 1])], [np.array([1, 2])])
    logits = np.zeros((3, 6))
    logits[1, 4] = logits[2, 3] = 1.0
    sampled = sample_replacements([logits], batch, np.random.default_rng(0), argmax=True)
    assert sampled.x_replaced[0].tolist() == [CLS_ID, 4, 3]
    assert sampled.mispredictions[0].tolist() == [2]


def test_check_invariants_detects_inconsistency():
    """Test that a wrong mis-prediction set is reported."""
    batch = MaskedBatch(
        [np.array([CLS_ID, 4, 5])],
        [np.array([CLS_ID, 1, 5])],
        [np.array([1])],
        [np.array([CLS_ID, 6, 5])],
        [np.zeros(0, dtype=np.int64)],
    )
    with pytest.raises(ContractError, match="mis-prediction set"):
        batch.check_invariants()


def test_sampling_length_mismatch():
    """Test that one logit matrix is needed per sequence."""
    batch = MaskedBatch([np.array([CLS_ID, 4])], [np.array([CLS_ID, 1])], [np.array([1])])
    with pytest.raises(ContractError):
        sample_replacements([], batch, np.random.default_rng(0))
