"""Vocabulary building and FULL-SENTENCES style sequence packing."""

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np
import structlog

from mpa_pretrain.errors import ConfigError, FormatError, IngestionError

logger = structlog.get_logger()

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
CLS_ID = 3
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[UNK]", "[CLS]")
NUM_SPECIALS = len(SPECIAL_TOKENS)

VOCAB_HEADER = "mpa-vocab v1"
TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace, keeping punctuation as separate tokens."""
    return TOKEN_PATTERN.findall(text.lower())


def read_lines(path: Union[str, Path]) -> Iterator[str]:
    """Yield the documents of a UTF-8 corpus file, one per line."""
    with open(path, "rb") as handle:
        for number, raw in enumerate(handle, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise IngestionError(f"{path}:{number} is not valid UTF-8 ({e.reason})") from e
            yield line.rstrip("\r\n")


def count_tokens(corpus: Iterable[str]) -> Counter:
    """Token counts of a text stream; shards merge with ``+``."""
    counts: Counter = Counter()
    for line in corpus:
        counts.update(tokenize(line))
    return counts


@dataclass
class Vocabulary:
    """Dense token <-> id map; specials first, then descending corpus count."""

    tokens: List[str]
    counts: List[int]
    _index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.counts):
            raise FormatError(f"{len(self.tokens)} tokens but {len(self.counts)} counts")
        if tuple(self.tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            raise FormatError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self._index = {}
        for i, token in enumerate(self.tokens):
            if token in self._index:
                raise FormatError(f"duplicate vocabulary token '{token}'")
            self._index[token] = i

    @classmethod
    def from_counts(cls, counts: Counter, max_size: int, min_count: int = 1) -> "Vocabulary":
        """Keep the ``max_size`` most frequent tokens seen at least ``min_count`` times."""
        if max_size < 0 or min_count < 1:
            raise ConfigError("max_size must be non-negative and min_count at least 1")
        ranked = sorted(
            ((token, n) for token, n in counts.items() if n >= min_count),
            key=lambda item: (-item[1], item[0]),
        )
        ranked = [(t, n) for t, n in ranked if t not in SPECIAL_TOKENS][:max_size]
        kept = {t for t, _ in ranked}
        unk_count = sum(n for t, n in counts.items() if t not in kept)
        tokens = list(SPECIAL_TOKENS) + [t for t, _ in ranked]
        token_counts = [0, 0, unk_count, 0] + [n for _, n in ranked]
        return cls(tokens, token_counts)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, text: str) -> List[int]:
        return [self.id_of(t) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]

    def top_ids(self, k: int) -> np.ndarray:
        """Ids of the ``k`` most frequent non-special tokens."""
        stop = min(len(self.tokens), NUM_SPECIALS + max(k, 0))
        return np.arange(NUM_SPECIALS, stop, dtype=np.int64)

    def to_text(self) -> str:
        lines = [f"{VOCAB_HEADER} {len(self.tokens)}"]
        lines.extend(f"{t}\t{n}" for t, n in zip(self.tokens, self.counts))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith(VOCAB_HEADER + " "):
            raise FormatError(f"missing '{VOCAB_HEADER} <V>' header")
        try:
            size = int(lines[0][len(VOCAB_HEADER) + 1 :])
        except ValueError:
            raise FormatError(f"invalid vocabulary header '{lines[0]}'")
        body = lines[1:]
        if len(body) != size:
            raise FormatError(f"header declares {size} tokens but file has {len(body)}")
        tokens, counts = [], []
        for number, line in enumerate(body, start=2):
            token, sep, count = line.rpartition("\t")
            if not sep or not count.isdigit():
                raise FormatError(f"malformed vocabulary line {number}: '{line}'")
            tokens.append(token)
            counts.append(int(count))
        return cls(tokens, counts)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path} is not valid UTF-8 ({e.reason})") from e
        return cls.from_text(text)


def build_vocab(corpus: Iterable[str], max_size: int = 8000, min_count: int = 1) -> Vocabulary:
    counts = count_tokens(corpus)
    if not counts:
        raise IngestionError("corpus contains no tokens")
    vocab = Vocabulary.from_counts(counts, max_size=max_size, min_count=min_count)
    logger.info("Built vocabulary", size=len(vocab), types=len(counts), unk=vocab.counts[UNK_ID])
    return vocab


@dataclass(frozen=True)
class PackedSequence:
    """CLS-prefixed token ids; ``boundaries`` are the positions where documents start."""

    ids: np.ndarray
    boundaries: Tuple[int, ...] = ()

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


def encode_pack(
    corpus: Iterable[str], vocab: Vocabulary, max_len: int
) -> Iterator[PackedSequence]:
    """Concatenate documents across boundaries into sequences of at most ``max_len`` ids."""
    if max_len < 2:
        raise ConfigError("max_len must leave room for CLS and one token")
    capacity = max_len - 1
    buffer: List[int] = []
    boundaries: List[int] = []
    for line in corpus:
        ids = vocab.encode(line)
        start = 0
        while start < len(ids):
            if len(buffer) == capacity:
                yield _pack(buffer, boundaries)
                buffer, boundaries = [], []
            if start == 0:
                boundaries.append(len(buffer) + 1)
            take = min(capacity - len(buffer), len(ids) - start)
            buffer.extend(ids[start : start + take])
            start += take
    if buffer:
        yield _pack(buffer, boundaries)


def _pack(buffer: Sequence[int], boundaries: Sequence[int]) -> PackedSequence:
    return PackedSequence(np.array([CLS_ID, *buffer], dtype=np.int64), tuple(boundaries))
