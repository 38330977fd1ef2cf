"""Adam with decoupled weight decay and a linear warm-up / linear decay schedule."""

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from mpa_pretrain.config import AdamConfig, TrainConfig
from mpa_pretrain.errors import ContractError, DimensionError, NumericError
from mpa_pretrain.tensor import Tensor


def lr_schedule(step: int, config: TrainConfig) -> float:
    """0 -> lr_peak over the warm-up, then linearly down to 0 at ``config.steps``."""
    if step < 0:
        raise ContractError("step must be non-negative")
    warmup = config.resolved_warmup_steps
    if step < warmup:
        return config.lr_peak * step / warmup
    remaining = max(config.steps - step, 0)
    return config.lr_peak * remaining / max(config.steps - warmup, 1)


@dataclass
class AdamMoments:
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamMoments":
        return cls(
            0,
            {name: np.zeros_like(p.data) for name, p in params.items()},
            {name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    moments: AdamMoments,
    rate: float,
    config: AdamConfig,
) -> AdamMoments:
    """Update ``params`` in place and return the advanced moments.

    p <- p - rate * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            bad = int((~np.isfinite(grad)).sum())
            raise NumericError(f"non-finite gradient in '{name}' ({bad} entries)")
    step = moments.step + 1
    first, second = {}, {}
    correction1 = 1.0 - config.beta1**step
    correction2 = 1.0 - config.beta2**step
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise DimensionError(f"gradient {grad.shape} does not match '{name}' {param.shape}")
        m = config.beta1 * moments.first[name] + (1.0 - config.beta1) * grad
        v = config.beta2 * moments.second[name] + (1.0 - config.beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + config.eps)
        param.data -= rate * (update + config.weight_decay * param.data)
        first[name], second[name] = m, v
    return AdamMoments(step, first, second)
