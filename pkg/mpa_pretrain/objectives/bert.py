"""BERT masked language modeling, optionally with attention guidance."""

from typing import List, Optional

import numpy as np

from mpa_pretrain.model import ForwardOutput, init_model
from mpa_pretrain.objectives.base import BaseObjective, Models, StepLosses
from mpa_pretrain.objectives.guidance import GuidanceTarget
from mpa_pretrain.objectives.losses import generator_loss
from mpa_pretrain.objectives.masking import MaskedBatch


class BertObjective(BaseObjective):
    """One model reads x^m; its sampled predictions only define the mis-predictions."""

    masking_policy = "bert"
    model_names = ("bert",)
    mlm_model = "bert"
    main_model = "bert"

    def init_models(self, vocab_size: int, seed: int) -> Models:
        return {"bert": init_model(self.config.main_model_config(vocab_size), seed)}

    def _losses(
        self,
        models: Models,
        batch: MaskedBatch,
        mlm_outputs: List[ForwardOutput],
        dropout_rng: Optional[np.random.Generator],
        frozen_targets: Optional[List[GuidanceTarget]],
    ) -> StepLosses:
        l_g = generator_loss([out.token_logits for out in mlm_outputs], batch)
        # Guided keys holding MASK or other specials take S = 0.
        l_a, targets = self._guidance(mlm_outputs, batch, batch.x_masked, frozen_targets)
        return self._combine(l_g, None, l_a, batch, targets, mlm_outputs)
