"""Base class for pre-training objectives."""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mpa_pretrain.config import TrainConfig, TrainMode
from mpa_pretrain.cooccurrence import ContextMatrix
from mpa_pretrain.model import ForwardOutput, ModelGraph, Slot, forward
from mpa_pretrain.objectives.guidance import (
    GuidanceStrategy,
    GuidanceTarget,
    build_guidance_targets,
    strategy_for,
)
from mpa_pretrain.objectives.losses import mpa_loss, total_loss
from mpa_pretrain.objectives.masking import MaskedBatch, apply_mlm_mask, sample_replacements
from mpa_pretrain.tensor import Tensor

Models = Dict[str, ModelGraph]


@dataclass
class StepLosses:
    """Every loss component of one batch plus what produced them."""

    l_g: Tensor
    l_d: Optional[Tensor]
    l_a: Tensor
    total: Tensor
    batch: MaskedBatch
    targets: List[GuidanceTarget] = field(default_factory=list)
    guided_outputs: List[ForwardOutput] = field(default_factory=list)

    def components(self) -> Dict[str, float]:
        return {
            "L_G": self.l_g.item(),
            "L_D": self.l_d.item() if self.l_d is not None else 0.0,
            "L_A": self.l_a.item(),
            "total": self.total.item(),
        }


class BaseObjective(ABC):
    """Masks a batch, runs the models and combines the loss terms for one backbone."""

    masking_policy = "bert"
    model_names: Tuple[str, ...] = ()
    mlm_model = ""
    main_model = ""

    def __init__(self, config: TrainConfig, context_matrix: Optional[ContextMatrix] = None):
        self.config = config
        self.mode: TrainMode = config.train_mode
        self.context_matrix = context_matrix
        self.strategy: Optional[GuidanceStrategy] = strategy_for(
            self.mode, config.resolved_constant
        )

    @abstractmethod
    def init_models(self, vocab_size: int, seed: int) -> Models:
        """Create the freshly initialized models this objective trains, keyed by role."""
        pass

    @abstractmethod
    def _losses(
        self,
        models: Models,
        batch: MaskedBatch,
        mlm_outputs: List[ForwardOutput],
        dropout_rng: Optional[np.random.Generator],
        frozen_targets: Optional[List[GuidanceTarget]],
    ) -> StepLosses:
        """Compute every loss term for a masked and sampled batch."""
        pass

    def compute_losses(
        self,
        models: Models,
        ids: Sequence[np.ndarray],
        mask_rng: np.random.Generator,
        sample_rng: np.random.Generator,
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> StepLosses:
        """Mask, predict, sample the replacements and evaluate every loss term."""
        vocab_size = models[self.mlm_model].config.vocab_size
        batch = apply_mlm_mask(
            ids, self.masking_policy, self.config.mask_prob, mask_rng, vocab_size
        )
        mlm_outputs = [
            forward(models[self.mlm_model], x_m, "generator", dropout_rng)
            for x_m in batch.x_masked
        ]
        batch = sample_replacements(
            [out.token_logits for out in mlm_outputs],
            batch,
            sample_rng,
            argmax=self.config.sample_argmax,
        )
        return self._losses(models, batch, mlm_outputs, dropout_rng, None)

    def losses_for_batch(
        self,
        models: Models,
        batch: MaskedBatch,
        dropout_rng: Optional[np.random.Generator] = None,
        frozen_targets: Optional[List[GuidanceTarget]] = None,
    ) -> StepLosses:
        """Loss terms of an already masked and sampled batch.

        Passing ``frozen_targets`` reuses previously computed guidance targets
        instead of deriving them from the current logits.
        """
        mlm_outputs = [
            forward(models[self.mlm_model], x_m, "generator", dropout_rng)
            for x_m in batch.x_masked
        ]
        return self._losses(models, batch, mlm_outputs, dropout_rng, frozen_targets)

    def _guidance(
        self,
        outputs: List[ForwardOutput],
        batch: MaskedBatch,
        sentences: Sequence[np.ndarray],
        frozen_targets: Optional[List[GuidanceTarget]],
    ) -> Tuple[Tensor, List[GuidanceTarget]]:
        if not self.mode.uses_mpa:
            return Tensor(0.0), []
        guided: List[Dict[Slot, Tensor]] = [out.guided_attention_logits for out in outputs]
        if frozen_targets is not None:
            targets = frozen_targets
        else:
            assert self.strategy is not None and self.context_matrix is not None
            targets = build_guidance_targets(
                guided, batch, sentences, self.context_matrix, self.strategy
            )
        return mpa_loss(guided, targets), targets

    def _combine(
        self,
        l_g: Tensor,
        l_d: Optional[Tensor],
        l_a: Tensor,
        batch: MaskedBatch,
        targets: List[GuidanceTarget],
        outputs: List[ForwardOutput],
    ) -> StepLosses:
        total = total_loss(l_g, l_d, l_a, self.config.lam, self.config.gamma, self.mode)
        return StepLosses(l_g, l_d, l_a, total, batch, targets, outputs)
