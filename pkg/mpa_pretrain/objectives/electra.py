"""ELECTRA replaced-token detection, optionally with attention guidance."""

from typing import List, Optional

import numpy as np

from mpa_pretrain.model import ForwardOutput, forward, init_model
from mpa_pretrain.objectives.base import BaseObjective, Models, StepLosses
from mpa_pretrain.objectives.guidance import GuidanceTarget
from mpa_pretrain.objectives.losses import discriminator_loss, generator_loss
from mpa_pretrain.objectives.masking import MaskedBatch


class ElectraObjective(BaseObjective):
    """Generator fills x^m, the discriminator reads x^r and carries the guided heads."""

    masking_policy = "electra-gen"
    model_names = ("generator", "discriminator")
    mlm_model = "generator"
    main_model = "discriminator"

    def init_models(self, vocab_size: int, seed: int) -> Models:
        generator_seed, discriminator_seed = np.random.SeedSequence(seed).generate_state(2)
        return {
            "generator": init_model(self.config.generator_config(vocab_size), int(generator_seed)),
            "discriminator": init_model(
                self.config.main_model_config(vocab_size), int(discriminator_seed)
            ),
        }

    def _losses(
        self,
        models: Models,
        batch: MaskedBatch,
        mlm_outputs: List[ForwardOutput],
        dropout_rng: Optional[np.random.Generator],
        frozen_targets: Optional[List[GuidanceTarget]],
    ) -> StepLosses:
        l_g = generator_loss([out.token_logits for out in mlm_outputs], batch)
        disc_outputs = [
            forward(models["discriminator"], x_r, "discriminator", dropout_rng)
            for x_r in batch.x_replaced
        ]
        l_d = discriminator_loss(
            [out.realness_logits for out in disc_outputs], batch.x, batch.x_replaced
        )
        l_a, targets = self._guidance(disc_outputs, batch, batch.x_replaced, frozen_targets)
        return self._combine(l_g, l_d, l_a, batch, targets, disc_outputs)
