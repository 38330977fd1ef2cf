"""Post-norm transformer encoder used as both generator and main model."""

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from mpa_pretrain import tensor as T
from mpa_pretrain.corpus import PAD_ID
from mpa_pretrain.errors import ConfigError, ContractError, FormatError
from mpa_pretrain.tensor import Tensor

INIT_STD = 0.02
MAGIC = b"MPAC"
FORMAT_VERSION = 1
HEADS = ("generator", "discriminator")
ACTIVATIONS = ("gelu", "relu")
_HEADER = struct.Struct("<4sII")

Slot = Tuple[int, int]


@dataclass(frozen=True)
class ModelConfig:
    """Shape of one transformer; ``head`` selects which output parameters exist."""

    layers: int
    heads: int
    hidden: int
    ffn_dim: int
    vocab_size: int
    max_len: int
    guided_layers: int = 0
    guided_heads: int = 0
    activation: str = "gelu"
    dropout: float = 0.0
    head: str = "generator"
    layernorm_eps: float = T.LAYERNORM_EPS

    def __post_init__(self) -> None:
        for name in ("heads", "hidden", "ffn_dim", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.layers < 0 or self.guided_layers < 0 or self.guided_heads < 0:
            raise ConfigError("layer and guided counts must be non-negative")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if self.guided_layers > self.layers:
            raise ConfigError(f"guided_layers {self.guided_layers} > layers {self.layers}")
        if self.guided_heads > self.heads:
            raise ConfigError(f"guided_heads {self.guided_heads} > heads {self.heads}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def guided_slots(self) -> List[Slot]:
        """First ``guided_heads`` heads of the bottom ``guided_layers`` layers."""
        return [
            (layer, head)
            for layer in range(self.guided_layers)
            for head in range(self.guided_heads)
        ]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        return cls(**values)


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter tensor in checkpoint order."""
    d, f = config.hidden, config.ffn_dim
    shapes: List[Tuple[str, Tuple[int, ...]]] = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.max_len, d)),
    ]
    for i in range(config.layers):
        p = f"layers.{i}"
        shapes += [
            (f"{p}.wq", (d, d)),
            (f"{p}.wk", (d, d)),
            (f"{p}.wv", (d, d)),
            (f"{p}.wo", (d, d)),
            (f"{p}.ln1.gain", (d,)),
            (f"{p}.ln1.bias", (d,)),
            (f"{p}.ffn.w1", (d, f)),
            (f"{p}.ffn.b1", (f,)),
            (f"{p}.ffn.w2", (f, d)),
            (f"{p}.ffn.b2", (d,)),
            (f"{p}.ln2.gain", (d,)),
            (f"{p}.ln2.bias", (d,)),
        ]
    if config.head == "discriminator":
        shapes += [("disc.w", (d, 1)), ("disc.b", (1,))]
    return shapes


def count_params(config: ModelConfig) -> int:
    d, f = config.hidden, config.ffn_dim
    per_layer = 4 * d * d + 2 * d * f + f + 5 * d
    head = d + 1 if config.head == "discriminator" else 0
    return (config.vocab_size + config.max_len) * d + config.layers * per_layer + head


@dataclass
class ModelGraph:
    config: ModelConfig
    params: Dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def to_bytes(self) -> bytes:
        blob = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)), blob]
        for name, _ in parameter_shapes(self.config):
            chunks.append(self.params[name].data.astype("<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ModelGraph":
        if len(payload) < _HEADER.size:
            raise FormatError("model checkpoint is truncated")
        magic, version, blob_len = _HEADER.unpack_from(payload)
        if magic != MAGIC:
            raise FormatError(f"bad model checkpoint magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"model checkpoint version {version} is not supported (expected {FORMAT_VERSION})"
            )
        offset = _HEADER.size
        try:
            config = ModelConfig.from_dict(
                json.loads(payload[offset : offset + blob_len].decode("utf-8"))
            )
        except (ValueError, TypeError) as e:
            raise FormatError(f"invalid model config in checkpoint: {e}")
        offset += blob_len
        shapes = parameter_shapes(config)
        expected = offset + 8 * sum(int(np.prod(s)) for _, s in shapes)
        if len(payload) != expected:
            raise FormatError(f"model checkpoint has {len(payload)} bytes, expected {expected}")
        params = {}
        for name, shape in shapes:
            count = int(np.prod(shape))
            values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            params[name] = Tensor(values.reshape(shape), requires_grad=True, name=name)
            offset += 8 * count
        return cls(config, params)


def save_checkpoint(model: ModelGraph, path: Union[str, Path]) -> None:
    Path(path).write_bytes(model.to_bytes())


def load_checkpoint(path: Union[str, Path]) -> ModelGraph:
    return ModelGraph.from_bytes(Path(path).read_bytes())


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    values = rng.normal(0.0, INIT_STD, size=shape)
    outside = np.abs(values) > 2 * INIT_STD
    while outside.any():
        values[outside] = rng.normal(0.0, INIT_STD, size=int(outside.sum()))
        outside = np.abs(values) > 2 * INIT_STD
    return values


def init_model(config: ModelConfig, seed: int) -> ModelGraph:
    """Deterministic initialization: N(0, 0.02^2) truncated at 2 sigma, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".gain"):
            values = np.ones(shape)
        elif name.endswith((".bias", ".b1", ".b2")) or name == "disc.b":
            values = np.zeros(shape)
        else:
            values = _truncated_normal(rng, shape)
        params[name] = Tensor(values, requires_grad=True, name=name, copy=False)
    return ModelGraph(config, params)


@dataclass
class ForwardOutput:
    token_logits: Optional[Tensor]
    realness_logits: Optional[Tensor]
    attention_logits: List[List[Tensor]]
    attention_probs: List[List[Tensor]]
    guided_slots: List[Slot] = field(default_factory=list)

    @property
    def guided_attention_logits(self) -> Dict[Slot, Tensor]:
        """Pre-softmax a(q, K) of every guided (layer, head), as fed to the softmax."""
        return {slot: self.attention_logits[slot[0]][slot[1]] for slot in self.guided_slots}


def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot products q K^T / sqrt(d_K)."""
    return T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[1]))


def forward(
    model: ModelGraph,
    ids: Sequence[int],
    head: Optional[str] = None,
    dropout_rng: Optional[np.random.Generator] = None,
) -> ForwardOutput:
    """Run the encoder on one sequence; dropout is active only when ``dropout_rng`` is given."""
    config = model.config
    head = head or config.head
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] == 0:
        raise ContractError(f"forward needs a non-empty 1-D id sequence, got shape {ids.shape}")
    n = ids.shape[0]
    if n > config.max_len:
        raise ContractError(f"sequence length {n} exceeds max_len {config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ContractError(f"token id outside [0, {config.vocab_size})")
    if head == "discriminator" and config.head != "discriminator":
        raise ContractError("model has no discriminator head")

    p = model.params
    rate = config.dropout
    act = T.gelu if config.activation == "gelu" else T.relu
    key_mask = ids == PAD_ID
    dk = config.head_dim

    h = T.add(T.take(p["tok_emb"], ids), T.take(p["pos_emb"], np.arange(n)))
    h = T.dropout(h, rate, dropout_rng)
    all_logits: List[List[Tensor]] = []
    all_probs: List[List[Tensor]] = []
    for i in range(config.layers):
        prefix = f"layers.{i}"
        q_all = T.matmul(h, p[f"{prefix}.wq"])
        k_all = T.matmul(h, p[f"{prefix}.wk"])
        v_all = T.matmul(h, p[f"{prefix}.wv"])
        layer_logits, layer_probs, outputs = [], [], []
        for j in range(config.heads):
            lo, hi = j * dk, (j + 1) * dk
            logits = attention_logits(T.columns(q_all, lo, hi), T.columns(k_all, lo, hi))
            probs = T.softmax_rows(logits, key_mask)
            outputs.append(T.matmul(T.dropout(probs, rate, dropout_rng), T.columns(v_all, lo, hi)))
            layer_logits.append(logits)
            layer_probs.append(probs)
        attn = T.matmul(T.concat_columns(outputs), p[f"{prefix}.wo"])
        h = T.layernorm(
            T.add(h, T.dropout(attn, rate, dropout_rng)),
            p[f"{prefix}.ln1.gain"],
            p[f"{prefix}.ln1.bias"],
            config.layernorm_eps,
        )
        hidden = act(T.add(T.matmul(h, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"]))
        ffn = T.add(
            T.matmul(T.dropout(hidden, rate, dropout_rng), p[f"{prefix}.ffn.w2"]),
            p[f"{prefix}.ffn.b2"],
        )
        h = T.layernorm(
            T.add(h, T.dropout(ffn, rate, dropout_rng)),
            p[f"{prefix}.ln2.gain"],
            p[f"{prefix}.ln2.bias"],
            config.layernorm_eps,
        )
        all_logits.append(layer_logits)
        all_probs.append(layer_probs)

    token_logits = realness = None
    if head == "generator":
        token_logits = T.matmul(h, T.transpose(p["tok_emb"]))
    else:
        realness = T.reshape(T.add(T.matmul(h, p["disc.w"]), p["disc.b"]), (n,))
    return ForwardOutput(token_logits, realness, all_logits, all_probs, config.guided_slots)
