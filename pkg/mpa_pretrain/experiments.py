"""Planted-pattern experiments comparing the baseline with the guided variants."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from tabulate import tabulate

from mpa_pretrain.config import TrainConfig, resolve_config
from mpa_pretrain.cooccurrence import ContextMatrix, build_context_matrix
from mpa_pretrain.corpus import NUM_SPECIALS, Vocabulary, build_vocab, encode_pack
from mpa_pretrain.errors import ConfigError
from mpa_pretrain.evaluation import TrapExample, build_trap_probe, eval_probe
from mpa_pretrain.objectives import objective_for
from mpa_pretrain.synth import TrapSpec, synth_corpus
from mpa_pretrain.trainer import train

logger = structlog.get_logger()

DEFAULT_MODES = ("electra", "electra-mpa", "electra-mpa-ground", "electra-mpa-constant")
DEFAULT_GRID: Tuple[Tuple[int, int, float], ...] = (
    (1, 1, 1.0),
    (2, 2, 1.0),
    (2, 2, 0.1),
    (2, 2, 10.0),
    (0, 0, 0.0),
)
TRAP_METRICS = (
    "trap_detection_accuracy",
    "cue_attention_mass",
    "trap_cloze_accuracy",
    "detection_accuracy",
    "masked_token_accuracy",
)
HELDOUT_SHARE = 0.1
COOCCURRENCE_WINDOW = 10


def trap_base_config(**overrides: Any) -> TrainConfig:
    """Small models sized for the planted-pattern corpus."""
    config = TrainConfig(
        mode="electra-mpa",
        steps=2000,
        batch_size=16,
        max_len=32,
        lr_peak=1e-3,
        warmup_steps=100,
        layers=2,
        hidden=32,
        heads=4,
        ffn_dim=64,
        generator_layers=2,
        generator_hidden=16,
        generator_heads=2,
        generator_ffn_dim=32,
        guided_layers=2,
        guided_heads=2,
        checkpoint_every=0,
        log_every=100,
    )
    return resolve_config(config, overrides)


@dataclass
class TrapData:
    vocab: Vocabulary
    train: List[np.ndarray]
    heldout: List[np.ndarray]
    probe: List[TrapExample]
    context_matrix: ContextMatrix


def prepare_trap_data(spec: TrapSpec, seed: int, max_len: int) -> TrapData:
    """Corpus for ``seed`` split into train and held-out, with vocabulary, S and trap probe."""
    lines = list(synth_corpus(spec, seed))
    split = int(round(len(lines) * (1.0 - HELDOUT_SHARE)))
    train_lines, heldout_lines = lines[:split], lines[split:]
    vocab = build_vocab(train_lines, max_size=spec.filler_size + 4)
    train_seqs = [s.ids for s in encode_pack(train_lines, vocab, max_len)]
    heldout_seqs = [s.ids for s in encode_pack(heldout_lines, vocab, max_len)]
    matrix = build_context_matrix(
        encode_pack(train_lines, vocab, max_len),
        vocab,
        topk=len(vocab) - NUM_SPECIALS,
        window=COOCCURRENCE_WINDOW,
    )
    probe = build_trap_probe(heldout_lines, vocab, spec, max_len)
    return TrapData(vocab, train_seqs, heldout_seqs, probe, matrix)


@dataclass
class ExperimentResult:
    rows: List[Dict[str, Any]]
    deltas: List[Dict[str, Any]] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)

    def table(self) -> str:
        return tabulate(self.rows, headers="keys", floatfmt=".4f", missingval="-")

    def write(self, out_dir: Union[str, Path]) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "results.jsonl", self.rows)
        if self.deltas:
            _write_jsonl(out / "deltas.jsonl", self.deltas)
        (out / "table.txt").write_text(self.table() + "\n", encoding="utf-8")
        if self.summary:
            (out / "summary.json").write_text(
                json.dumps(self.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )


def _write_jsonl(path: Path, rows: Sequence[Dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def _run_one(
    config: TrainConfig, data: TrapData, run_dir: Optional[Path], progress: bool
) -> Dict[str, Any]:
    state, _ = train(
        config,
        data.train,
        len(data.vocab),
        data.context_matrix,
        run_dir,
        vocab=data.vocab,
        progress=progress,
    )
    objective = objective_for(config, data.context_matrix)
    report = eval_probe(
        objective, state.models, data.heldout, data.context_matrix, data.probe, seed=config.seed
    ).to_dict()
    row = {metric: report[metric] for metric in TRAP_METRICS}
    row["misprediction_rate"] = state.running.get("misprediction_rate")
    logger.info("Finished experiment run", mode=config.mode, seed=config.seed, **row)
    return row


def _delta(a: Optional[float], b: Optional[float]) -> Optional[float]:
    return None if a is None or b is None else a - b


def _count(
    deltas: Sequence[Dict[str, Any]], metric: str, accept: Callable[[float], bool]
) -> int:
    return sum(1 for d in deltas if d[metric] is not None and accept(d[metric]))


def run_trap_experiment(
    seeds: Sequence[int],
    modes: Sequence[str] = DEFAULT_MODES,
    out_dir: Optional[Union[str, Path]] = None,
    base_config: Optional[TrainConfig] = None,
    trap_spec: Optional[TrapSpec] = None,
    progress: bool = False,
) -> ExperimentResult:
    """Train every mode on every seed's corpus and compare each against ``modes[0]``."""
    if not seeds or not modes:
        raise ConfigError("the trap experiment needs at least one seed and one mode")
    base_config = base_config or trap_base_config()
    spec = trap_spec or TrapSpec()
    baseline = modes[0]
    rows: List[Dict[str, Any]] = []
    deltas: List[Dict[str, Any]] = []
    for seed in seeds:
        data = prepare_trap_data(spec, seed, base_config.max_len)
        by_mode = {}
        for mode in modes:
            config = base_config.with_overrides(mode=mode, seed=seed)
            run_dir = Path(out_dir) / f"{mode}-seed{seed}" if out_dir is not None else None
            by_mode[mode] = _run_one(config, data, run_dir, progress)
            rows.append({"mode": mode, "seed": seed, **by_mode[mode]})
        for mode in modes[1:]:
            deltas.append(
                {
                    "mode": mode,
                    "baseline": baseline,
                    "seed": seed,
                    **{m: _delta(by_mode[mode][m], by_mode[baseline][m]) for m in TRAP_METRICS},
                }
            )

    summary: Dict[str, Any] = {"baseline": baseline, "seeds": list(seeds), "modes": {}}
    for mode in modes[1:]:
        mine = [d for d in deltas if d["mode"] == mode]
        summary["modes"][mode] = {
            "detection_not_worse": _count(mine, "trap_detection_accuracy", lambda v: v >= 0.0),
            "cue_mass_higher": _count(mine, "cue_attention_mass", lambda v: v > 0.0),
        }
    result = ExperimentResult(rows, deltas, summary)
    if out_dir is not None:
        result.write(out_dir)
    return result


def parse_grid(text: str) -> List[Tuple[int, int, float]]:
    """``"l:h:gamma,l:h:gamma"`` -> [(l, h, gamma), ...]."""
    grid = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid entry '{item}' is not of the form l:h:gamma")
        try:
            grid.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise ConfigError(f"grid entry '{item}' is not numeric")
    return grid


def run_sensitivity(
    seed: int,
    grid: Sequence[Tuple[int, int, float]] = DEFAULT_GRID,
    out_dir: Optional[Union[str, Path]] = None,
    base_config: Optional[TrainConfig] = None,
    trap_spec: Optional[TrapSpec] = None,
    progress: bool = False,
) -> ExperimentResult:
    """Train over (guided layers, guided heads, gamma); (0, 0, *) runs the baseline."""
    base_config = base_config or trap_base_config()
    data = prepare_trap_data(trap_spec or TrapSpec(), seed, base_config.max_len)
    rows = []
    for layers, heads, gamma in grid:
        mode = "electra" if layers == 0 or heads == 0 else "electra-mpa"
        config = base_config.with_overrides(
            mode=mode, seed=seed, guided_layers=layers, guided_heads=heads, gamma=gamma
        )
        run_dir = (
            Path(out_dir) / f"l{layers}-h{heads}-g{gamma:g}" if out_dir is not None else None
        )
        row = _run_one(config, data, run_dir, progress)
        rows.append({"l": layers, "h": heads, "gamma": gamma, "mode": mode, **row})
    result = ExperimentResult(rows)
    if out_dir is not None:
        result.write(out_dir)
    return result
