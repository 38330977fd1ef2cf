"""Planted-pattern corpus generator.

Every document is a run of Zipf-distributed filler words. A fixed share of
documents plants the frequent pair (anchor, distractor); a smaller share are
trap documents holding the anchor, the rare cue and the answer, so that the
frequent co-occurrent of the anchor is the wrong fill and the cue implies
the right one.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from mpa_pretrain.errors import ConfigError


@dataclass(frozen=True)
class TrapSpec:
    """Description of the planted patterns."""

    anchor: str = "bed"
    distractor: str = "bedroom"
    answer: str = "study"
    cue: str = "draft"
    filler_size: int = 300
    documents: int = 4000
    min_len: int = 6
    max_len: int = 14
    pair_rate: float = 0.3
    trap_rate: float = 0.05
    zipf_exponent: float = 1.1

    def __post_init__(self) -> None:
        words = [self.anchor, self.distractor, self.answer, self.cue]
        if len(set(words)) != 4:
            raise ConfigError("anchor, distractor, answer and cue must be distinct")
        for word in words:
            if not word.isalpha() or word != word.lower():
                raise ConfigError(f"planted word '{word}' must be a lowercase alphabetic token")
        if self.filler_size < 1 or self.documents < 1:
            raise ConfigError("filler_size and documents must be positive")
        if self.min_len < 3 or self.max_len < self.min_len:
            raise ConfigError("document lengths must satisfy 3 <= min_len <= max_len")
        if self.pair_rate < 0 or self.trap_rate < 0 or self.pair_rate + self.trap_rate > 1:
            raise ConfigError("pair_rate and trap_rate must be non-negative and sum to at most 1")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrapSpec":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown trap spec keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def filler_words(self) -> List[str]:
        return [f"w{i}" for i in range(self.filler_size)]


def synth_corpus(spec: TrapSpec, seed: int) -> Iterator[str]:
    """Deterministic stream of documents, one per line."""
    rng = np.random.default_rng(seed)
    fillers = spec.filler_words()
    weights = 1.0 / np.arange(1, spec.filler_size + 1) ** spec.zipf_exponent
    weights /= weights.sum()

    n_pair = min(int(np.ceil(spec.pair_rate * spec.documents)), spec.documents)
    n_trap = min(int(round(spec.trap_rate * spec.documents)), spec.documents - n_pair)
    n_plain = spec.documents - n_pair - n_trap
    kinds = np.array(["pair"] * n_pair + ["trap"] * n_trap + ["plain"] * n_plain)
    kinds = kinds[rng.permutation(spec.documents)]

    for kind in kinds:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        words = [fillers[i] for i in rng.choice(spec.filler_size, size=length, p=weights)]
        if kind == "pair":
            _plant(words, [spec.anchor, spec.distractor], rng)
        elif kind == "trap":
            _plant(words, [spec.cue, spec.answer, spec.anchor], rng)
        yield " ".join(words)


def _plant(words: List[str], planted: Sequence[str], rng: np.random.Generator) -> None:
    slots = rng.choice(len(words), size=len(planted), replace=False)
    for slot, word in zip(slots, planted):
        words[int(slot)] = word


def find_trap(tokens: Sequence[str], spec: TrapSpec) -> Optional[Tuple[int, int]]:
    """(answer index, cue index) when ``tokens`` form a trap document, else None."""
    if spec.cue not in tokens or spec.answer not in tokens:
        return None
    return list(tokens).index(spec.answer), list(tokens).index(spec.cue)
