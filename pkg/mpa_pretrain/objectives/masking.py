"""Masking policies and generator sampling."""

from dataclasses import dataclass, field, replace
from typing import List, Sequence, Union

import numpy as np

from mpa_pretrain.corpus import MASK_ID, NUM_SPECIALS
from mpa_pretrain.errors import ConfigError, ContractError
from mpa_pretrain.tensor import Tensor, log_softmax_rows

POLICIES = ("bert", "electra-gen")
MASK_SHARE = 0.8
RANDOM_SHARE = 0.1


@dataclass
class MaskedBatch:
    """Original, masked and replaced ids per sequence, with masked and mis-predicted positions."""

    x: List[np.ndarray]
    x_masked: List[np.ndarray]
    mask_positions: List[np.ndarray]
    x_replaced: List[np.ndarray] = field(default_factory=list)
    mispredictions: List[np.ndarray] = field(default_factory=list)
    policy: str = "bert"

    def __post_init__(self) -> None:
        if not self.x_replaced:
            self.x_replaced = [ids.copy() for ids in self.x]
        if not self.mispredictions:
            self.mispredictions = [np.zeros(0, dtype=np.int64) for _ in self.x]

    def __len__(self) -> int:
        return len(self.x)

    @property
    def num_masked(self) -> int:
        return int(sum(p.shape[0] for p in self.mask_positions))

    @property
    def num_mispredicted(self) -> int:
        return int(sum(m.shape[0] for m in self.mispredictions))

    @property
    def misprediction_rate(self) -> float:
        return self.num_mispredicted / self.num_masked if self.num_masked else 0.0

    def check_invariants(self) -> None:
        for i, x in enumerate(self.x):
            positions = self.mask_positions[i]
            outside = np.ones(x.shape[0], dtype=bool)
            outside[positions] = False
            if (self.x_masked[i][outside] != x[outside]).any():
                raise ContractError(f"sequence {i}: masked ids differ outside the mask")
            if (self.x_replaced[i][outside] != x[outside]).any():
                raise ContractError(f"sequence {i}: replaced ids differ outside the mask")
            expected = positions[self.x_replaced[i][positions] != x[positions]]
            if not np.array_equal(np.sort(self.mispredictions[i]), np.sort(expected)):
                raise ContractError(f"sequence {i}: mis-prediction set is inconsistent")


def maskable(ids: np.ndarray) -> np.ndarray:
    """Positions eligible for masking; special tokens never are."""
    return np.asarray(ids) >= NUM_SPECIALS


def apply_mlm_mask(
    x: Sequence[np.ndarray],
    policy: str,
    mask_prob: float,
    rng: np.random.Generator,
    vocab_size: int,
) -> MaskedBatch:
    """Select each non-special position with ``mask_prob`` and corrupt it per ``policy``.

    ``bert`` writes MASK to 80% of the selected positions, a random word to
    10% and keeps the rest; ``electra-gen`` writes MASK everywhere. The rng
    is consumed by a fixed amount per position, whatever is selected.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown masking policy '{policy}', expected one of {POLICIES}")
    if not 0.0 <= mask_prob <= 1.0:
        raise ConfigError("mask_prob must be between 0 and 1")
    sequences = [np.asarray(ids, dtype=np.int64) for ids in x]
    if not sequences or any(ids.ndim != 1 or ids.shape[0] == 0 for ids in sequences):
        raise ContractError("masking needs a non-empty batch of non-empty sequences")

    flat = np.concatenate(sequences)
    n = flat.shape[0]
    selected = (rng.random(n) < mask_prob) & maskable(flat)
    masked = flat.copy()
    if policy == "electra-gen":
        masked[selected] = MASK_ID
    else:
        split = rng.random(n)
        words = rng.integers(NUM_SPECIALS, max(vocab_size, NUM_SPECIALS + 1), size=n)
        to_mask = selected & (split < MASK_SHARE)
        to_random = selected & (split >= MASK_SHARE) & (split < MASK_SHARE + RANDOM_SHARE)
        masked[to_mask] = MASK_ID
        masked[to_random] = words[to_random]

    bounds = np.cumsum([0] + [ids.shape[0] for ids in sequences])
    x_masked, positions = [], []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        x_masked.append(masked[start:stop])
        positions.append(np.flatnonzero(selected[start:stop]))
    return MaskedBatch(
        x=[ids.copy() for ids in sequences],
        x_masked=x_masked,
        mask_positions=positions,
        policy=policy,
    )


def sample_replacements(
    gen_logits: Sequence[Union[Tensor, np.ndarray]],
    batch: MaskedBatch,
    rng: np.random.Generator,
    argmax: bool = False,
) -> MaskedBatch:
    """Draw a token per masked position from the (detached) generator softmax.

    Returns a copy of ``batch`` with ``x_replaced`` and ``mispredictions`` filled in.
    """
    if len(gen_logits) != len(batch):
        raise ContractError(f"{len(gen_logits)} logit matrices for {len(batch)} sequences")
    replaced, missed = [], []
    for logits, x, positions in zip(gen_logits, batch.x, batch.mask_positions):
        values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
        if values.shape[0] != x.shape[0]:
            raise ContractError("generator logits must cover every position")
        rows = values[positions]
        if argmax:
            draws = rows.argmax(axis=1)
        else:
            probs = np.exp(log_softmax_rows(rows))
            cdf = np.cumsum(probs, axis=1)
            u = rng.random(positions.shape[0])
            draws = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1)
            draws = np.minimum(draws, values.shape[1] - 1)
        x_r = x.copy()
        x_r[positions] = draws
        replaced.append(x_r)
        missed.append(positions[draws != x[positions]])
    return replace(batch, x_replaced=replaced, mispredictions=missed)
