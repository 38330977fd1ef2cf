"""Tests for the held-out evaluation probe."""

import math

import numpy as np
import pytest

from mpa_pretrain.corpus import CLS_ID, MASK_ID, NUM_SPECIALS, build_vocab
from mpa_pretrain.evaluation import (
    EvalReport,
    build_trap_probe,
    eval_probe,
    leave_one_out_predictions,
)
from mpa_pretrain.model import forward
from mpa_pretrain.objectives import objective_for
from mpa_pretrain.objectives.masking import apply_mlm_mask
from mpa_pretrain.synth import TrapSpec, synth_corpus


def random_heldout(seed, vocab_size, count=50, length=20):
    rng = np.random.default_rng(seed)
    return [
        np.concatenate([[CLS_ID], rng.integers(NUM_SPECIALS, vocab_size, length - 1)])
        for _ in range(count)
    ]


def test_report_fields_complete(tiny_config, sequences, vocab, context_matrix):
    """Test that every metric is reported for a guided ELECTRA model."""
    objective = objective_for(tiny_config, context_matrix)
    models = objective.init_models(len(vocab), 0)
    report = eval_probe(objective, models, sequences, context_matrix, seed=1)
    values = report.to_dict()
    assert set(values) == set(EvalReport.__dataclass_fields__)
    for key in (
        "masked_token_accuracy",
        "perplexity",
        "detection_accuracy",
        "frequent_context_mass",
        "rare_context_mass",
        "other_context_mass",
    ):
        assert values[key] is not None, key
    assert values["trap_examples"] == 0


def test_context_mass_partitions_attention(tiny_config, sequences, vocab, context_matrix):
    """Frequent, rare and other context mass add up to 1."""
    objective = objective_for(tiny_config, context_matrix)
    models = objective.init_models(len(vocab), 3)
    report = eval_probe(objective, models, sequences * 4, context_matrix, seed=2)
    total = report.frequent_context_mass + report.rare_context_mass + report.other_context_mass
    assert abs(total - 1.0) < 1e-6


def test_perplexity_matches_naive(tiny_config, sequences, vocab):
    """Perplexity is exp of the mean masked cross-entropy of the generator."""
    config = tiny_config.with_overrides(mode="electra")
    objective = objective_for(config)
    models = objective.init_models(len(vocab), 0)
    report = eval_probe(objective, models, sequences, seed=5)

    mask_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(5).spawn(2)[0]))
    batch = apply_mlm_mask(sequences, "electra-gen", config.mask_prob, mask_rng, len(vocab))
    losses, hits = [], []
    for x, x_m, positions in zip(batch.x, batch.x_masked, batch.mask_positions):
        logits = forward(models["generator"], x_m).token_logits.data
        for t in positions:
            p = np.exp(logits[t]) / np.exp(logits[t]).sum()
            losses.append(-math.log(p[x[t]]))
            hits.append(int(np.argmax(p) == x[t]))
    assert report.masked_tokens == len(losses)
    assert report.perplexity == pytest.approx(math.exp(np.mean(losses)), rel=1e-9)
    assert report.masked_token_accuracy == pytest.approx(np.mean(hits))


def test_fresh_discriminator_detects_at_chance(tiny_config):
    """Test that an untrained discriminator is near 50% on uniform random text."""
    config = tiny_config.with_overrides(mode="electra")
    objective = objective_for(config)
    models = objective.init_models(200, 0)
    report = eval_probe(objective, models, random_heldout(0, 200), seed=0)
    assert 0.35 < report.detection_accuracy < 0.65


def test_bert_mode_has_no_detection(tiny_config, sequences, vocab):
    """Test that detection metrics stay empty without a discriminator."""
    config = tiny_config.with_overrides(mode="bert")
    objective = objective_for(config)
    report = eval_probe(objective, objective.init_models(len(vocab), 0), sequences)
    assert report.detection_accuracy is None
    assert report.frequent_context_mass is None
    assert report.masked_token_accuracy is not None


def test_empty_heldout(tiny_config):
    """Test that nothing is reported for an empty held-out set."""
    objective = objective_for(tiny_config.with_overrides(mode="electra"))
    report = eval_probe(objective, objective.init_models(20, 0), [])
    assert report.masked_tokens == 0
    assert report.perplexity is None
    assert report.detection_accuracy is None


def test_trap_probe_positions():
    """Test that probe positions point at the answer and the cue after CLS."""
    spec = TrapSpec(filler_size=30, documents=200)
    lines = list(synth_corpus(spec, 0))
    vocab = build_vocab(lines)
    probe = build_trap_probe(lines, vocab, spec, max_len=16)
    assert len(probe) == round(spec.trap_rate * spec.documents)
    for example in probe:
        assert example.ids[0] == CLS_ID
        assert example.ids[example.answer_position] == example.answer_id == vocab.id_of("study")
        assert example.ids[example.cue_position] == vocab.id_of("draft")
        assert example.distractor_id == vocab.id_of("bedroom")
    assert build_trap_probe(lines, vocab, spec, max_len=4) == []


def test_trap_metrics(tiny_config):
    """Test trap cloze, detection and cue attention on a fresh model."""
    spec = TrapSpec(filler_size=30, documents=200)
    lines = list(synth_corpus(spec, 1))
    vocab = build_vocab(lines)
    probe = build_trap_probe(lines, vocab, spec, max_len=16)
    config = tiny_config.with_overrides(mode="electra")
    objective = objective_for(config)
    models = objective.init_models(len(vocab), 0)
    report = eval_probe(objective, models, [], trap_probe=probe)
    assert report.trap_examples == len(probe)
    for key in ("trap_cloze_accuracy", "trap_detection_accuracy", "cue_attention_mass"):
        value = getattr(report, key)
        assert value is not None and 0.0 <= value <= 1.0


def test_leave_one_out_predictions(tiny_config, sequences, vocab):
    """Test that each position is predicted with only itself masked, and CLS is skipped."""
    models = objective_for(tiny_config).init_models(len(vocab), 3)
    generator = models["generator"]
    ids = sequences[0]
    predictions = leave_one_out_predictions(generator, ids)
    assert predictions.shape == ids.shape
    assert predictions[0] == -1
    for position in (1, len(ids) - 1):
        masked = np.array(ids, copy=True)
        masked[position] = MASK_ID
        logits = forward(generator, masked, "generator").token_logits.data
        assert predictions[position] == int(np.argmax(logits[position]))
