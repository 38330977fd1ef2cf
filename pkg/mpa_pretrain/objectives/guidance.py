"""Guidance targets for the attention rows of mis-predicted positions."""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import structlog

from mpa_pretrain.config import DEFAULT_CONSTANT, TrainMode
from mpa_pretrain.cooccurrence import ContextMatrix, fetch_context_vector
from mpa_pretrain.corpus import PAD_ID
from mpa_pretrain.errors import ConfigError, ContractError
from mpa_pretrain.model import Slot
from mpa_pretrain.objectives.masking import MaskedBatch
from mpa_pretrain.tensor import Tensor

logger = structlog.get_logger()


@dataclass
class GuidanceTarget:
    """Context vector and per-slot target for one mis-predicted query position."""

    sequence_index: int
    position: int
    token: int
    context_vector: np.ndarray
    targets: Dict[Slot, np.ndarray]


def guidance_target(
    logit_row: np.ndarray, context_vector: np.ndarray, key_valid: Optional[np.ndarray] = None
) -> np.ndarray:
    """Detached logits times (1 - S); keys that are not valid keep their logit."""
    row = np.asarray(logit_row, dtype=np.float64)
    context = np.asarray(context_vector, dtype=np.float64)
    if row.shape != context.shape:
        raise ContractError(f"logit row {row.shape} and context vector {context.shape} differ")
    target = row * (1.0 - context)
    if key_valid is not None:
        target = np.where(key_valid, target, row)
    return target


class GuidanceStrategy(ABC):
    """Chooses the context vector S for a mis-predicted position."""

    name = "base"

    @abstractmethod
    def context_vector(
        self, matrix: ContextMatrix, predicted: int, truth: int, sentence: np.ndarray
    ) -> Optional[np.ndarray]:
        """Return S over the sentence, or None to leave this position unguided."""
        pass


class MispredictionGuidance(GuidanceStrategy):
    name = "misprediction"

    def context_vector(
        self, matrix: ContextMatrix, predicted: int, truth: int, sentence: np.ndarray
    ) -> Optional[np.ndarray]:
        return fetch_context_vector(matrix, predicted, sentence)


class GroundTruthGuidance(GuidanceStrategy):
    """Fetch the context of the original token instead of the generator's."""

    name = "ground"

    def context_vector(
        self, matrix: ContextMatrix, predicted: int, truth: int, sentence: np.ndarray
    ) -> Optional[np.ndarray]:
        return fetch_context_vector(matrix, truth, sentence)


class ConstantGuidance(GuidanceStrategy):
    """Constant S = c at every key inside the sub-vocabulary, 0 elsewhere."""

    name = "constant"

    def __init__(self, constant: float):
        if not 0.0 <= constant <= 1.0:
            raise ConfigError("the constant context value must be between 0 and 1")
        self.constant = constant

    def context_vector(
        self, matrix: ContextMatrix, predicted: int, truth: int, sentence: np.ndarray
    ) -> Optional[np.ndarray]:
        return self.constant * matrix.contains(sentence).astype(np.float64)


def strategy_for(mode: TrainMode, constant: float = 0.9) -> Optional[GuidanceStrategy]:
    if mode.guidance is None:
        return None
    if mode.guidance == "misprediction":
        return MispredictionGuidance()
    if mode.guidance == "ground":
        return GroundTruthGuidance()
    return ConstantGuidance(constant)


def build_guidance_targets(
    guided_logits: Sequence[Mapping[Slot, Tensor]],
    batch: MaskedBatch,
    sentences: Sequence[np.ndarray],
    matrix: ContextMatrix,
    strategy: GuidanceStrategy,
) -> List[GuidanceTarget]:
    """One target per mis-prediction the strategy can guide, from the current detached logits."""
    targets = []
    skipped = 0
    for i, (logits, sentence) in enumerate(zip(guided_logits, sentences)):
        key_valid = np.asarray(sentence) != PAD_ID
        for t in batch.mispredictions[i]:
            t = int(t)
            predicted = int(batch.x_replaced[i][t])
            vector = strategy.context_vector(matrix, predicted, int(batch.x[i][t]), sentence)
            if vector is None:
                skipped += 1
                continue
            per_slot = {
                slot: guidance_target(tensor.data[t], vector, key_valid)
                for slot, tensor in logits.items()
            }
            targets.append(GuidanceTarget(i, t, predicted, vector, per_slot))
    if skipped:
        logger.debug("Skipped out-of-vocabulary mis-predictions", count=skipped)
    return targets


def ablation_targets(
    mode: str,
    guided_logits: Sequence[Mapping[Slot, Tensor]],
    batch: MaskedBatch,
    sentences: Sequence[np.ndarray],
    matrix: ContextMatrix,
    constant: Optional[float] = None,
) -> List[GuidanceTarget]:
    """Targets for the ground-truth and constant-context variants."""
    train_mode = TrainMode.parse(mode)
    if train_mode.guidance not in ("ground", "constant"):
        raise ConfigError(f"mode '{mode}' is not a guidance ablation")
    if constant is None:
        constant = DEFAULT_CONSTANT[train_mode.backbone]
    strategy = strategy_for(train_mode, constant)
    assert strategy is not None
    return build_guidance_targets(guided_logits, batch, sentences, matrix, strategy)
