"""Loss terms: generator MLM, replaced-token detection, attention guidance and their sum."""

from typing import Mapping, Optional, Sequence

import numpy as np
import structlog

from mpa_pretrain import tensor as T
from mpa_pretrain.config import TrainMode
from mpa_pretrain.corpus import CLS_ID, PAD_ID
from mpa_pretrain.errors import ConfigError, ContractError
from mpa_pretrain.model import Slot
from mpa_pretrain.objectives.guidance import GuidanceTarget
from mpa_pretrain.objectives.masking import MaskedBatch
from mpa_pretrain.tensor import Tensor

logger = structlog.get_logger()


def _zero() -> Tensor:
    return Tensor(0.0)


def generator_loss(gen_logits: Sequence[Tensor], batch: MaskedBatch) -> Tensor:
    """Mean -log p(x_t | x^m) over every masked position of the batch."""
    if len(gen_logits) != len(batch):
        raise ContractError(f"{len(gen_logits)} logit matrices for {len(batch)} sequences")
    total = batch.num_masked
    if total == 0:
        logger.warning("Empty mask set, generator loss defined as 0")
        return _zero()
    terms = []
    for logits, x, positions in zip(gen_logits, batch.x, batch.mask_positions):
        if logits.shape[0] != x.shape[0]:
            raise ContractError("generator logits must cover every position")
        if positions.shape[0]:
            rows = T.take(logits, positions)
            terms.append(T.cross_entropy_from_logits(rows, x[positions], reduction="sum"))
    return T.scale(T.add_n(terms), 1.0 / total)


def detection_positions(x: np.ndarray) -> np.ndarray:
    """Positions the discriminator is scored on: everything except CLS and PAD."""
    x = np.asarray(x)
    return np.flatnonzero((x != CLS_ID) & (x != PAD_ID))


def discriminator_loss(
    realness_logits: Sequence[Tensor],
    x: Sequence[np.ndarray],
    x_replaced: Sequence[np.ndarray],
) -> Tensor:
    """Binary cross-entropy of "original" (label 1) vs "replaced", in log-sigmoid form."""
    if not len(realness_logits) == len(x) == len(x_replaced):
        raise ContractError("discriminator loss needs one logit vector per sequence")
    terms = []
    count = 0
    for logits, original, replaced in zip(realness_logits, x, x_replaced):
        if logits.shape != (original.shape[0],):
            raise ContractError(f"realness logits {logits.shape} for {original.shape[0]} tokens")
        positions = detection_positions(original)
        if positions.shape[0] == 0:
            continue
        labels = (replaced[positions] == original[positions]).astype(np.float64)
        picked = T.take(logits, positions)
        terms.append(T.binary_cross_entropy_with_logits(picked, labels, reduction="sum"))
        count += positions.shape[0]
    if not terms:
        return _zero()
    return T.scale(T.add_n(terms), 1.0 / count)


def mpa_loss(
    guided_logits: Sequence[Mapping[Slot, Tensor]], targets: Sequence[GuidanceTarget]
) -> Tensor:
    """Squared distance to the frozen targets: mean over keys, then slots, then mis-predictions."""
    if not targets:
        return _zero()
    per_target = []
    for target in targets:
        logits = guided_logits[target.sequence_index]
        terms = []
        for slot, goal in target.targets.items():
            row = T.take(logits[slot], [target.position])
            diff = T.sub(row, Tensor(goal[None, :]))
            terms.append(T.mean(T.square(diff)))
        per_target.append(T.scale(T.add_n(terms), 1.0 / len(terms)))
    return T.scale(T.add_n(per_target), 1.0 / len(per_target))


def total_loss(
    l_g: Tensor,
    l_d: Optional[Tensor],
    l_a: Optional[Tensor],
    lam: float,
    gamma: float,
    mode: TrainMode,
) -> Tensor:
    """L_G + lam * L_D + gamma * L_A, leaving out absent or zero-weighted terms."""
    if lam < 0 or gamma < 0:
        raise ConfigError("loss weights lam and gamma must be non-negative")
    terms = [l_g]
    if mode.has_discriminator and l_d is not None and lam != 0:
        terms.append(T.scale(l_d, lam))
    if mode.uses_mpa and l_a is not None and gamma != 0:
        terms.append(T.scale(l_a, gamma))
    return T.add_n(terms)
