"""Context matrix S: windowed co-occurrence counts, normalized and row-scaled.

``C[i, j]`` counts the pairs of sub-vocabulary tokens that appear within
``window`` positions of each other inside one packed sequence. ``normalize``
divides by the product of the two row sums and ``scale_rows`` maps every row
to [0, 1]. The result is served per mis-prediction by
``fetch_context_vector``.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import structlog
from tqdm import tqdm

from mpa_pretrain.corpus import NUM_SPECIALS, PackedSequence, Vocabulary
from mpa_pretrain.errors import ConfigError, FormatError

logger = structlog.get_logger()

MAGIC = b"MPAS"
FORMAT_VERSION = 1
DEFAULT_WINDOW = 10
DEFAULT_TOPK = 2000
_HEADER = struct.Struct("<4sIII")


def _remap(sub_vocab: Sequence[int]) -> np.ndarray:
    ids = np.asarray(sub_vocab, dtype=np.int64)
    remap = np.full(int(ids.max()) + 1 if ids.size else 0, -1, dtype=np.int64)
    remap[ids] = np.arange(ids.size)
    return remap


def _lookup(remap: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Dense sub-vocabulary index of every id, -1 for ids outside it or special."""
    ids = np.asarray(ids, dtype=np.int64)
    inside = (ids >= NUM_SPECIALS) & (ids < remap.shape[0])
    out = np.full(ids.shape, -1, dtype=np.int64)
    out[inside] = remap[ids[inside]]
    return out


def count_cooccurrence(
    sequences: Iterable[PackedSequence],
    sub_vocab: Sequence[int],
    window: int = DEFAULT_WINDOW,
    progress: bool = False,
) -> np.ndarray:
    """Symmetric K x K pair counts within ``window`` positions; self-pairs are skipped."""
    if window < 1:
        raise ConfigError("co-occurrence window must be at least 1")
    remap = _remap(sub_vocab)
    k = len(sub_vocab)
    counts = np.zeros((k, k), dtype=np.int64)
    for sequence in tqdm(sequences, desc="Counting co-occurrence", disable=not progress):
        index = _lookup(remap, sequence.ids)
        for offset in range(1, min(window, index.shape[0] - 1) + 1):
            left, right = index[:-offset], index[offset:]
            keep = (left >= 0) & (right >= 0) & (left != right)
            np.add.at(counts, (left[keep], right[keep]), 1)
            np.add.at(counts, (right[keep], left[keep]), 1)
    return counts


def merge_counts(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Combine the counts of two corpus shards."""
    if a.shape != b.shape:
        raise ConfigError(f"cannot merge count shards of shapes {a.shape} and {b.shape}")
    return a + b


def normalize(counts: np.ndarray) -> np.ndarray:
    """C[i, j] / (rowsum_i * rowsum_j), zero wherever a row sum is zero."""
    rowsum = counts.sum(axis=1).astype(np.float64)
    denominator = np.outer(rowsum, rowsum)
    normed = np.zeros(counts.shape, dtype=np.float64)
    np.divide(counts, denominator, out=normed, where=denominator > 0)
    return normed


def scale_rows(normed: np.ndarray) -> np.ndarray:
    """Min-max scale every row to [0, 1]; constant rows become all zeros."""
    if normed.size == 0:
        return normed.astype(np.float64)
    low = normed.min(axis=1, keepdims=True)
    spread = normed.max(axis=1, keepdims=True) - low
    scaled = np.zeros(normed.shape, dtype=np.float64)
    np.divide(normed - low, spread, out=scaled, where=spread > 0)
    return scaled


@dataclass
class ContextMatrix:
    """Row-scaled co-occurrence coefficients over the top-K sub-vocabulary."""

    sub_vocab: np.ndarray
    S: np.ndarray
    window: int
    counts: Optional[np.ndarray] = None
    remap: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.sub_vocab = np.asarray(self.sub_vocab, dtype=np.int64)
        k = self.sub_vocab.shape[0]
        if self.S.shape != (k, k):
            raise FormatError(f"S has shape {self.S.shape}, expected ({k}, {k})")
        if not np.isfinite(self.S).all():
            raise FormatError("S entries must be finite")
        if self.S.size and (self.S.min() < 0.0 or self.S.max() > 1.0):
            raise FormatError("S entries must lie in [0, 1]")
        if (self.sub_vocab < NUM_SPECIALS).any():
            raise FormatError("special tokens cannot belong to the S sub-vocabulary")
        self.remap = _remap(self.sub_vocab)

    @property
    def K(self) -> int:
        return int(self.sub_vocab.shape[0])

    def index_of(self, ids: np.ndarray) -> np.ndarray:
        return _lookup(self.remap, ids)

    def contains(self, ids: np.ndarray) -> np.ndarray:
        """Mask of positions whose token is in the sub-vocabulary (specials never are)."""
        return self.index_of(ids) >= 0

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, self.K, self.window)
        return (
            header
            + self.sub_vocab.astype("<u4").tobytes()
            + self.S.astype("<f4").tobytes()
        )

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ContextMatrix":
        if len(payload) < _HEADER.size:
            raise FormatError("context matrix file is truncated")
        magic, version, k, window = _HEADER.unpack_from(payload)
        if magic != MAGIC:
            raise FormatError(f"bad context matrix magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"context matrix version {version} is not supported (expected {FORMAT_VERSION})"
            )
        expected = _HEADER.size + 4 * k + 4 * k * k
        if len(payload) != expected:
            raise FormatError(f"context matrix has {len(payload)} bytes, expected {expected}")
        offset = _HEADER.size
        sub_vocab = np.frombuffer(payload, dtype="<u4", count=k, offset=offset).astype(np.int64)
        offset += 4 * k
        S = np.frombuffer(payload, dtype="<f4", count=k * k, offset=offset)
        return cls(sub_vocab, S.astype(np.float64).reshape(k, k), int(window))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ContextMatrix":
        return cls.from_bytes(Path(path).read_bytes())


def build_context_matrix(
    sequences: Iterable[PackedSequence],
    vocab: Vocabulary,
    topk: int = DEFAULT_TOPK,
    window: int = DEFAULT_WINDOW,
    progress: bool = False,
) -> ContextMatrix:
    """Count, normalize and scale over the ``topk`` most frequent non-special tokens."""
    available = len(vocab) - NUM_SPECIALS
    if topk > available:
        logger.warning("Clamping sub-vocabulary size", requested=topk, available=available)
        topk = available
    if topk < 1:
        raise ConfigError("the S sub-vocabulary needs at least one token")
    sub_vocab = vocab.top_ids(topk)
    counts = count_cooccurrence(sequences, sub_vocab, window=window, progress=progress)
    # S is kept at float32 precision so the on-disk copy is exact.
    S = scale_rows(normalize(counts)).astype(np.float32).astype(np.float64)
    logger.info("Built context matrix", K=topk, window=window, pairs=int(counts.sum()) // 2)
    return ContextMatrix(sub_vocab, S, window, counts)


def fetch_context_vector(
    matrix: ContextMatrix, mispredicted_token: int, sentence: np.ndarray
) -> Optional[np.ndarray]:
    """S[token, sentence_i] per position, or None when the token is outside the sub-vocabulary."""
    row = matrix.index_of(np.asarray([mispredicted_token]))[0]
    if row < 0:
        return None
    columns = matrix.index_of(np.asarray(sentence))
    vector = np.zeros(columns.shape, dtype=np.float64)
    inside = columns >= 0
    vector[inside] = matrix.S[row, columns[inside]]
    return vector
