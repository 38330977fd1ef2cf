"""Pre-training objectives."""

from typing import Optional

from mpa_pretrain.config import TrainConfig
from mpa_pretrain.cooccurrence import ContextMatrix
from mpa_pretrain.objectives.base import BaseObjective, StepLosses
from mpa_pretrain.objectives.bert import BertObjective
from mpa_pretrain.objectives.electra import ElectraObjective

OBJECTIVES = {"bert": BertObjective, "electra": ElectraObjective}


def objective_for(
    config: TrainConfig, context_matrix: Optional[ContextMatrix] = None
) -> BaseObjective:
    """Instantiate the objective of the configured backbone."""
    return OBJECTIVES[config.train_mode.backbone](config, context_matrix)


__all__ = [
    "OBJECTIVES",
    "BaseObjective",
    "BertObjective",
    "ElectraObjective",
    "StepLosses",
    "objective_for",
]
