"""Training loop, trainer state and trainer checkpoints."""

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from tqdm import tqdm

from mpa_pretrain import tensor as T
from mpa_pretrain.config import TrainConfig
from mpa_pretrain.cooccurrence import ContextMatrix
from mpa_pretrain.corpus import Vocabulary
from mpa_pretrain.errors import ConfigError, FormatError, NumericError
from mpa_pretrain.evaluation import eval_probe
from mpa_pretrain.model import ModelGraph
from mpa_pretrain.objectives import OBJECTIVES, BaseObjective, objective_for
from mpa_pretrain.optim import AdamMoments, adam_step, lr_schedule
from mpa_pretrain.tensor import Tensor

logger = structlog.get_logger()

MAGIC = b"MPAT"
FORMAT_VERSION = 1
RUNNING_DECAY = 0.99
_HEADER = struct.Struct("<4sII")
_BLOB = struct.Struct("<Q")

METRICS_FILE = "metrics.jsonl"
EVAL_FILE = "eval.jsonl"
CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.mpat"


class RandomStreams:
    """Independent generators for data order, masking, sampling and dropout."""

    NAMES = ("data", "mask", "sample", "dropout")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        self.generators = {
            name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(self.NAMES, children)
        }

    @property
    def data(self) -> np.random.Generator:
        return self.generators["data"]

    @property
    def mask(self) -> np.random.Generator:
        return self.generators["mask"]

    @property
    def sample(self) -> np.random.Generator:
        return self.generators["sample"]

    @property
    def dropout(self) -> np.random.Generator:
        return self.generators["dropout"]

    def state_dict(self) -> Dict[str, Any]:
        return {name: gen.bit_generator.state for name, gen in self.generators.items()}

    def load_state_dict(self, states: Dict[str, Any]) -> None:
        missing = set(self.NAMES) - set(states)
        if missing:
            raise FormatError(f"checkpoint lacks rng streams {sorted(missing)}")
        for name, gen in self.generators.items():
            gen.bit_generator.state = states[name]


@dataclass
class StepMetrics:
    step: int
    lr: float
    L_G: float
    L_D: float
    L_A: float
    total: float
    misprediction_rate: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainState:
    step: int
    models: Dict[str, ModelGraph]
    moments: AdamMoments
    streams: RandomStreams
    running: Dict[str, float] = field(default_factory=dict)

    def parameters(self) -> Dict[str, Tensor]:
        return flat_parameters(self.models)


def flat_parameters(models: Dict[str, ModelGraph]) -> Dict[str, Tensor]:
    """``<model>.<param>`` -> tensor, models in insertion order."""
    return {
        f"{model_name}.{name}": param
        for model_name, model in models.items()
        for name, param in model.named_parameters()
    }


class Trainer:
    """Joint optimization of the generator and main model of one objective."""

    def __init__(
        self,
        config: TrainConfig,
        sequences: Sequence[np.ndarray],
        vocab_size: int,
        context_matrix: Optional[ContextMatrix] = None,
        out_dir: Optional[Union[str, Path]] = None,
        vocab: Optional[Vocabulary] = None,
        cooccur_path: Optional[str] = None,
        heldout: Optional[Sequence[np.ndarray]] = None,
        progress: bool = False,
    ):
        self.config = config
        if config.train_mode.uses_mpa and context_matrix is None:
            raise ConfigError(f"mode '{config.mode}' needs a context matrix")
        self.objective: BaseObjective = objective_for(config, context_matrix)
        self.sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
        if not self.sequences:
            raise ConfigError("training needs at least one sequence")
        longest = max(s.shape[0] for s in self.sequences)
        if longest > config.max_len:
            raise ConfigError(f"sequence of length {longest} exceeds max_len {config.max_len}")
        self.vocab_size = vocab_size
        self.context_matrix = context_matrix
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.vocab = vocab
        self.cooccur_path = cooccur_path
        self.heldout = heldout
        self.progress = progress
        self.history: List[StepMetrics] = []

    def init_state(self) -> TrainState:
        models = self.objective.init_models(self.vocab_size, self.config.seed)
        return TrainState(
            step=0,
            models=models,
            moments=AdamMoments.zeros(flat_parameters(models)),
            streams=RandomStreams(self.config.seed),
        )

    def next_batch(self, state: TrainState) -> List[np.ndarray]:
        picks = state.streams.data.integers(0, len(self.sequences), size=self.config.batch_size)
        return [self.sequences[int(i)] for i in picks]

    def run_step(self, state: TrainState) -> StepMetrics:
        """One masked batch, one backward pass, one Adam update of every model."""
        step = state.step + 1
        ids = self.next_batch(state)
        for model in state.models.values():
            model.zero_grad()
        dropout_rng = state.streams.dropout if self.config.dropout > 0 else None
        losses = self.objective.compute_losses(
            state.models, ids, state.streams.mask, state.streams.sample, dropout_rng
        )
        components = losses.components()
        if not all(math.isfinite(v) for v in components.values()):
            raise NumericError(f"non-finite loss at step {step}: {components}")
        if losses.total.requires_grad:
            T.backward(losses.total)

        params = state.parameters()
        grads = {
            name: p.grad if p.grad is not None else np.zeros_like(p.data)
            for name, p in params.items()
        }
        rate = lr_schedule(step, self.config)
        state.moments = adam_step(params, grads, state.moments, rate, self.config.adam)
        state.step = step

        metrics = StepMetrics(
            step=step,
            lr=rate,
            misprediction_rate=losses.batch.misprediction_rate,
            **components,
        )
        self._update_running(state, metrics)
        return metrics

    def _update_running(self, state: TrainState, metrics: StepMetrics) -> None:
        values = metrics.to_dict()
        for key in ("L_G", "L_D", "L_A", "total", "misprediction_rate"):
            previous = state.running.get(key)
            if previous is None:
                state.running[key] = values[key]
            else:
                state.running[key] = RUNNING_DECAY * previous + (1 - RUNNING_DECAY) * values[key]

    def train(self, state: Optional[TrainState] = None) -> TrainState:
        """Run until ``config.steps``, starting from ``state`` when resuming."""
        config = self.config
        state = state if state is not None else self.init_state()
        metrics_handle = None
        if self.out_dir is not None:
            (self.out_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
            metrics_path = self.out_dir / METRICS_FILE
            kept = _metrics_until(metrics_path, state.step) if state.step else []
            metrics_handle = open(metrics_path, "w", encoding="utf-8")
            metrics_handle.writelines(kept)

        logger.info(
            "Starting training",
            mode=config.mode,
            start_step=state.step,
            steps=config.steps,
            parameters=sum(p.size for p in state.parameters().values()),
        )
        try:
            for _ in tqdm(
                range(state.step, config.steps), desc="Training", disable=not self.progress
            ):
                metrics = self.run_step(state)
                self.history.append(metrics)
                step = metrics.step
                if config.log_every and (step % config.log_every == 0 or step == config.steps):
                    if metrics_handle is not None:
                        metrics_handle.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")
                    logger.info("Training step", **metrics.to_dict())
                if self.out_dir is not None and config.checkpoint_every:
                    if step % config.checkpoint_every == 0:
                        self.save(state, self.out_dir / CHECKPOINT_DIR / f"step-{step:06d}.mpat")
                if config.eval_every and self.heldout and step % config.eval_every == 0:
                    self._evaluate(state)
        finally:
            if metrics_handle is not None:
                metrics_handle.close()

        if self.out_dir is not None:
            self.save(state, self.out_dir / FINAL_CHECKPOINT)
        logger.info("Finished training", step=state.step, **state.running)
        return state

    def _evaluate(self, state: TrainState) -> None:
        assert self.heldout is not None
        report = eval_probe(
            self.objective, state.models, self.heldout, self.context_matrix, seed=self.config.seed
        )
        record = {"step": state.step, **report.to_dict()}
        logger.info("Evaluation", **record)
        if self.out_dir is not None:
            with open(self.out_dir / EVAL_FILE, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, sort_keys=True) + "\n")

    def save(self, state: TrainState, path: Union[str, Path]) -> None:
        save_training_checkpoint(
            path, self.config, state, vocab=self.vocab, cooccur_path=self.cooccur_path
        )


def _metrics_until(path: Path, step: int) -> List[str]:
    """Lines of an existing metrics stream up to ``step``; later ones were never checkpointed."""
    if not path.exists():
        return []
    kept = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip() and json.loads(line)["step"] <= step:
                kept.append(line if line.endswith("\n") else line + "\n")
    return kept


def train(
    config: TrainConfig,
    sequences: Sequence[np.ndarray],
    vocab_size: int,
    context_matrix: Optional[ContextMatrix] = None,
    out_dir: Optional[Union[str, Path]] = None,
    state: Optional[TrainState] = None,
    **kwargs: Any,
) -> Tuple[TrainState, List[StepMetrics]]:
    """Train from scratch (or from ``state``) and return the final state and per-step metrics."""
    trainer = Trainer(config, sequences, vocab_size, context_matrix, out_dir, **kwargs)
    final = trainer.train(state)
    return final, trainer.history


@dataclass
class TrainingCheckpoint:
    config: TrainConfig
    state: TrainState
    vocab: Optional[Vocabulary] = None
    cooccur_path: Optional[str] = None


def save_training_checkpoint(
    path: Union[str, Path],
    config: TrainConfig,
    state: TrainState,
    vocab: Optional[Vocabulary] = None,
    cooccur_path: Optional[str] = None,
) -> None:
    """Header JSON, then every model checkpoint, then both Adam moments in parameter order."""
    params = state.parameters()
    header = {
        "config": config.to_dict(),
        "step": state.step,
        "moments_step": state.moments.step,
        "models": list(state.models),
        "params": [[name, list(p.shape)] for name, p in params.items()],
        "rng": state.streams.state_dict(),
        "running": state.running,
        "vocab": vocab.to_text() if vocab is not None else None,
        "cooccur_path": cooccur_path,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)), blob]
    for model in state.models.values():
        payload = model.to_bytes()
        chunks += [_BLOB.pack(len(payload)), payload]
    for moment in (state.moments.first, state.moments.second):
        for name in params:
            chunks.append(moment[name].astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.debug("Saved training checkpoint", path=str(path), step=state.step)


def load_training_checkpoint(path: Union[str, Path]) -> TrainingCheckpoint:
    payload = Path(path).read_bytes()
    if len(payload) < _HEADER.size:
        raise FormatError(f"trainer checkpoint {path} is truncated")
    magic, version, blob_len = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise FormatError(f"bad trainer checkpoint magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"trainer checkpoint version {version} is not supported (expected {FORMAT_VERSION})"
        )
    offset = _HEADER.size
    try:
        header = json.loads(payload[offset : offset + blob_len].decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
    except (ValueError, KeyError) as e:
        raise FormatError(f"invalid trainer checkpoint header: {e}")
    offset += blob_len

    models = {}
    for name in header["models"]:
        if offset + _BLOB.size > len(payload):
            raise FormatError("trainer checkpoint is truncated")
        (size,) = _BLOB.unpack_from(payload, offset)
        offset += _BLOB.size
        models[name] = ModelGraph.from_bytes(payload[offset : offset + size])
        offset += size

    vocab = Vocabulary.from_text(header["vocab"]) if header.get("vocab") else None
    _check_models(config, models, vocab)

    params = flat_parameters(models)
    expected = [[name, list(p.shape)] for name, p in params.items()]
    if header["params"] != expected:
        raise FormatError("trainer checkpoint parameter list does not match its models")
    moments = []
    for _ in range(2):
        values = {}
        for name, p in params.items():
            count = p.size
            if offset + 8 * count > len(payload):
                raise FormatError("trainer checkpoint is truncated")
            raw = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            values[name] = raw.reshape(p.shape).copy()
            offset += 8 * count
        moments.append(values)
    if offset != len(payload):
        raise FormatError(f"trainer checkpoint has {len(payload) - offset} trailing bytes")

    streams = RandomStreams(config.seed)
    streams.load_state_dict(header["rng"])
    state = TrainState(
        step=int(header["step"]),
        models=models,
        moments=AdamMoments(int(header["moments_step"]), moments[0], moments[1]),
        streams=streams,
        running=dict(header.get("running") or {}),
    )
    return TrainingCheckpoint(config, state, vocab, header.get("cooccur_path"))


def _check_models(
    config: TrainConfig, models: Dict[str, ModelGraph], vocab: Optional[Vocabulary]
) -> None:
    """Models must be exactly the ones ``config`` would build."""
    objective_models = list(OBJECTIVES[config.train_mode.backbone].model_names)
    if list(models) != objective_models:
        raise FormatError(f"checkpoint holds models {list(models)}, expected {objective_models}")
    vocab_size = next(iter(models.values())).config.vocab_size
    if vocab is not None and len(vocab) != vocab_size:
        raise FormatError(f"checkpoint vocabulary has {len(vocab)} tokens, models use {vocab_size}")
    for name, model in models.items():
        if name == "generator":
            expected = config.generator_config(vocab_size)
        else:
            expected = config.main_model_config(vocab_size)
        if model.config != expected:
            raise FormatError(f"model '{name}' in checkpoint does not match the stored config")

