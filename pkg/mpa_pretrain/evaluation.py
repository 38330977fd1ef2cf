"""Held-out probe: MLM accuracy, detection accuracy, guided attention mass and trap metrics."""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from mpa_pretrain.cooccurrence import ContextMatrix, fetch_context_vector
from mpa_pretrain.corpus import CLS_ID, MASK_ID, Vocabulary, tokenize
from mpa_pretrain.model import ForwardOutput, ModelGraph, forward
from mpa_pretrain.objectives import BaseObjective
from mpa_pretrain.objectives.losses import detection_positions
from mpa_pretrain.objectives.masking import MaskedBatch, apply_mlm_mask, sample_replacements
from mpa_pretrain.synth import TrapSpec, find_trap
from mpa_pretrain.tensor import log_softmax_rows

logger = structlog.get_logger()

FREQUENT_THRESHOLD = 0.5


@dataclass(frozen=True)
class TrapExample:
    """A held-out trap sentence with the answer and cue positions (CLS included)."""

    ids: np.ndarray
    answer_position: int
    cue_position: int
    answer_id: int
    distractor_id: int


@dataclass
class EvalReport:
    masked_tokens: int = 0
    masked_token_accuracy: Optional[float] = None
    perplexity: Optional[float] = None
    detection_accuracy: Optional[float] = None
    mispredictions: int = 0
    frequent_context_mass: Optional[float] = None
    rare_context_mass: Optional[float] = None
    other_context_mass: Optional[float] = None
    trap_examples: int = 0
    trap_cloze_accuracy: Optional[float] = None
    trap_detection_accuracy: Optional[float] = None
    cue_attention_mass: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def build_trap_probe(
    lines: Iterable[str], vocab: Vocabulary, spec: TrapSpec, max_len: int
) -> List[TrapExample]:
    """Trap documents of ``lines`` that fit in ``max_len`` once CLS is prepended."""
    answer_id, distractor_id = vocab.id_of(spec.answer), vocab.id_of(spec.distractor)
    examples = []
    for line in lines:
        found = find_trap(tokenize(line), spec)
        if found is None:
            continue
        ids = np.array([CLS_ID] + vocab.encode(line), dtype=np.int64)
        if ids.shape[0] > max_len:
            continue
        answer, cue = found
        examples.append(TrapExample(ids, answer + 1, cue + 1, answer_id, distractor_id))
    return examples


def masked_lm_metrics(
    model: ModelGraph, batch: MaskedBatch
) -> Tuple[List[ForwardOutput], int, int, float]:
    """Forward outputs plus (correct, total, summed cross-entropy) over the masked positions."""
    outputs, correct, total, ce_sum = [], 0, 0, 0.0
    for x, x_m, positions in zip(batch.x, batch.x_masked, batch.mask_positions):
        out = forward(model, x_m, "generator")
        outputs.append(out)
        if positions.shape[0] == 0:
            continue
        assert out.token_logits is not None
        log_p = log_softmax_rows(out.token_logits.data[positions])
        truth = x[positions]
        correct += int((log_p.argmax(axis=1) == truth).sum())
        ce_sum += float(-log_p[np.arange(positions.shape[0]), truth].sum())
        total += positions.shape[0]
    return outputs, correct, total, ce_sum


def detection_accuracy(
    discriminator: ModelGraph, x: Sequence[np.ndarray], x_replaced: Sequence[np.ndarray]
) -> Optional[float]:
    """Share of scored positions whose original/replaced label the realness sign gets right."""
    correct = total = 0
    for original, replaced in zip(x, x_replaced):
        positions = detection_positions(original)
        if positions.shape[0] == 0:
            continue
        realness = forward(discriminator, replaced, "discriminator").realness_logits
        assert realness is not None
        predicted_original = realness.data[positions] > 0
        is_original = replaced[positions] == original[positions]
        correct += int((predicted_original == is_original).sum())
        total += positions.shape[0]
    return correct / total if total else None


def leave_one_out_predictions(mlm: ModelGraph, ids: Sequence[int]) -> np.ndarray:
    """Argmax MLM prediction at each position with only that position masked; -1 at CLS."""
    ids = np.asarray(ids, dtype=np.int64)
    predictions = np.full(ids.shape[0], -1, dtype=np.int64)
    for position in range(ids.shape[0]):
        if ids[position] == CLS_ID:
            continue
        masked = ids.copy()
        masked[position] = MASK_ID
        logits = forward(mlm, masked, "generator").token_logits
        assert logits is not None
        predictions[position] = int(np.argmax(logits.data[position]))
    return predictions


def attention_mass(
    outputs: Sequence[ForwardOutput],
    batch: MaskedBatch,
    sentences: Sequence[np.ndarray],
    matrix: ContextMatrix,
) -> Optional[Tuple[float, float, float]]:
    """Mean guided-head attention at mis-predicted queries split by the context of each key.

    Keys are frequent (S >= 0.5) or rare (S < 0.5) context when their token is
    in the sub-vocabulary and "other" otherwise, so the three parts sum to 1.
    """
    totals = np.zeros(3)
    count = 0
    for i, (out, sentence) in enumerate(zip(outputs, sentences)):
        inside = matrix.contains(sentence)
        for t in batch.mispredictions[i]:
            vector = fetch_context_vector(matrix, int(batch.x_replaced[i][t]), sentence)
            if vector is None:
                continue
            frequent = inside & (vector >= FREQUENT_THRESHOLD)
            rare = inside & ~frequent
            for layer, head in out.guided_slots:
                row = out.attention_probs[layer][head].data[int(t)]
                totals += (row[frequent].sum(), row[rare].sum(), row[~inside].sum())
                count += 1
    if count == 0:
        return None
    mass = totals / count
    return float(mass[0]), float(mass[1]), float(mass[2])


def _trap_metrics(
    objective: BaseObjective,
    models: Dict[str, ModelGraph],
    probe: Sequence[TrapExample],
    report: EvalReport,
) -> None:
    mlm = models[objective.mlm_model]
    main = models[objective.main_model]
    has_discriminator = objective.mode.has_discriminator
    cloze, detection, cue_mass = [], [], []
    for example in probe:
        a = example.answer_position
        masked = example.ids.copy()
        masked[a] = MASK_ID
        mlm_out = forward(mlm, masked, "generator")
        assert mlm_out.token_logits is not None
        cloze.append(int(mlm_out.token_logits.data[a].argmax()) == example.answer_id)

        if has_discriminator:
            corrupted = example.ids.copy()
            corrupted[a] = example.distractor_id
            guided = forward(main, corrupted, "discriminator")
            clean = forward(main, example.ids, "discriminator")
            assert guided.realness_logits is not None and clean.realness_logits is not None
            detection.append(bool(guided.realness_logits.data[a] < 0))
            detection.append(bool(clean.realness_logits.data[a] > 0))
        else:
            guided = mlm_out
        for layer, head in guided.guided_slots:
            cue_mass.append(guided.attention_probs[layer][head].data[a, example.cue_position])

    report.trap_examples = len(probe)
    if probe:
        report.trap_cloze_accuracy = float(np.mean(cloze))
    if detection:
        report.trap_detection_accuracy = float(np.mean(detection))
    if cue_mass:
        report.cue_attention_mass = float(np.mean(cue_mass))


def eval_probe(
    objective: BaseObjective,
    models: Dict[str, ModelGraph],
    heldout: Sequence[np.ndarray],
    context_matrix: Optional[ContextMatrix] = None,
    trap_probe: Optional[Sequence[TrapExample]] = None,
    seed: int = 0,
) -> EvalReport:
    """Evaluate without dropout; masking and sampling use their own ``seed``-derived streams."""
    report = EvalReport()
    mask_rng, sample_rng = (
        np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(2)
    )
    mlm = models[objective.mlm_model]
    sequences = [np.asarray(s, dtype=np.int64) for s in heldout]

    if sequences:
        batch = apply_mlm_mask(
            sequences, "electra-gen", objective.config.mask_prob, mask_rng, mlm.config.vocab_size
        )
        outputs, correct, total, ce_sum = masked_lm_metrics(mlm, batch)
        report.masked_tokens = total
        if total:
            report.masked_token_accuracy = correct / total
            report.perplexity = math.exp(ce_sum / total)
        batch = sample_replacements(
            [out.token_logits for out in outputs],
            batch,
            sample_rng,
            argmax=objective.config.sample_argmax,
        )
        report.mispredictions = batch.num_mispredicted

        if objective.mode.has_discriminator:
            main = models[objective.main_model]
            report.detection_accuracy = detection_accuracy(main, batch.x, batch.x_replaced)
            guided_outputs = [forward(main, x_r, "discriminator") for x_r in batch.x_replaced]
            sentences = batch.x_replaced
        else:
            guided_outputs, sentences = outputs, batch.x_masked
        if context_matrix is not None:
            mass = attention_mass(guided_outputs, batch, sentences, context_matrix)
            if mass is not None:
                (
                    report.frequent_context_mass,
                    report.rare_context_mass,
                    report.other_context_mass,
                ) = mass

    if trap_probe:
        _trap_metrics(objective, models, trap_probe, report)
    logger.debug("Evaluated held-out probe", **report.to_dict())
    return report
