"""Command-line interface for MPA pre-training."""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
import structlog

from mpa_pretrain.config import TrainConfig, all_modes, load_config_file, load_train_config
from mpa_pretrain.cooccurrence import (
    DEFAULT_TOPK,
    DEFAULT_WINDOW,
    ContextMatrix,
    build_context_matrix,
)
from mpa_pretrain.corpus import CLS_ID, UNK_ID, Vocabulary, build_vocab, encode_pack, read_lines
from mpa_pretrain.errors import EXIT_FORMAT, ConfigError, FormatError, MpaError
from mpa_pretrain.evaluation import build_trap_probe, eval_probe, leave_one_out_predictions
from mpa_pretrain.experiments import (
    DEFAULT_GRID,
    DEFAULT_MODES,
    parse_grid,
    run_sensitivity,
    run_trap_experiment,
    trap_base_config,
)
from mpa_pretrain.manifest import RunManifest
from mpa_pretrain.model import forward
from mpa_pretrain.objectives import OBJECTIVES, objective_for
from mpa_pretrain.synth import TrapSpec
from mpa_pretrain.trainer import (
    FINAL_CHECKPOINT,
    METRICS_FILE,
    Trainer,
    load_training_checkpoint,
)

logger = structlog.get_logger()

MANIFEST_FILE = "manifest.json"


def setup_logging(debug: bool) -> None:
    """Configure logging with structlog."""
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(level=level, stream=sys.stdout, format="%(message)s", force=True)

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer(),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def handle_errors(func: Callable[..., Any]) -> Callable[..., Any]:
    """Map package errors to their exit codes and I/O errors to the format exit code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except MpaError as e:
            logger.error("Command failed", error=str(e), kind=type(e).__name__)
            sys.exit(e.exit_code)
        except OSError as e:
            logger.error("I/O error", error=str(e), path=e.filename)
            sys.exit(EXIT_FORMAT)
        except KeyboardInterrupt:
            logger.info("Shutting down...")
            sys.exit(130)
        except Exception as e:
            logger.error("Fatal error", error=str(e))
            sys.exit(1)

    return wrapper


def _echo_json(values: Dict[str, Any]) -> None:
    click.echo(json.dumps(values, sort_keys=True))


def _require(value: Optional[str], flag: str) -> str:
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def _load_matrix(path: Optional[str], vocab: Vocabulary) -> Optional[ContextMatrix]:
    if path is None:
        return None
    matrix = ContextMatrix.load(path)
    if matrix.K and int(matrix.sub_vocab.max()) >= len(vocab):
        raise FormatError(f"context matrix {path} refers to ids outside the vocabulary")
    return matrix


def _pack(lines: List[str], vocab: Vocabulary, max_len: int) -> List[Any]:
    return [s.ids for s in encode_pack(lines, vocab, max_len)]


@click.group()
@click.option("--debug", is_flag=True, help="Enable debug logging")
def main(debug: bool) -> None:
    """Desk-scale BERT / ELECTRA pre-training with mis-prediction guided attention.

    Example usage:
        mpa-pretrain build-vocab --corpus corpus.txt --out vocab.txt
    """
    setup_logging(debug)


@main.command("build-vocab")
@click.option("--corpus", help="UTF-8 text corpus, one document per line")
@click.option("--out", help="Vocabulary file to write")
@click.option("--max-size", default=8000, type=int, help="Maximum non-special tokens")
@click.option("--min-count", default=1, type=int, help="Minimum corpus count")
@click.option("--dry-run", is_flag=True, help="Print the resolved settings and exit")
@handle_errors
def build_vocab_command(
    corpus: Optional[str], out: Optional[str], max_size: int, min_count: int, dry_run: bool
) -> None:
    """Build the vocabulary of a corpus."""
    settings = {"corpus": corpus, "out": out, "max_size": max_size, "min_count": min_count}
    if dry_run:
        _echo_json(settings)
        return
    corpus, out = _require(corpus, "--corpus"), _require(out, "--out")
    vocab = build_vocab(read_lines(corpus), max_size=max_size, min_count=min_count)
    vocab.save(out)
    RunManifest.create("build-vocab", settings, [corpus], [out]).write(out + ".manifest.json")
    logger.info("Wrote vocabulary", path=out, size=len(vocab))


@main.command("build-cooccur")
@click.option("--corpus", help="UTF-8 text corpus, one document per line")
@click.option("--vocab", "vocab_path", help="Vocabulary file")
@click.option("--out", help="Context matrix file to write")
@click.option("--topk", default=DEFAULT_TOPK, type=int, help="Sub-vocabulary size K")
@click.option("--window", default=DEFAULT_WINDOW, type=int, help="Co-occurrence window")
@click.option("--max-len", default=128, type=int, help="Packed sequence length")
@click.option("--progress", is_flag=True, help="Show a progress bar")
@click.option("--dry-run", is_flag=True, help="Print the resolved settings and exit")
@handle_errors
def build_cooccur_command(
    corpus: Optional[str],
    vocab_path: Optional[str],
    out: Optional[str],
    topk: int,
    window: int,
    max_len: int,
    progress: bool,
    dry_run: bool,
) -> None:
    """Count windowed co-occurrences and write the context matrix S."""
    settings = {
        "corpus": corpus,
        "vocab": vocab_path,
        "out": out,
        "topk": topk,
        "window": window,
        "max_len": max_len,
    }
    if dry_run:
        _echo_json(settings)
        return
    corpus, out = _require(corpus, "--corpus"), _require(out, "--out")
    vocab_path = _require(vocab_path, "--vocab")
    vocab = Vocabulary.load(vocab_path)
    matrix = build_context_matrix(
        encode_pack(read_lines(corpus), vocab, max_len),
        vocab,
        topk=topk,
        window=window,
        progress=progress,
    )
    matrix.save(out)
    RunManifest.create("build-cooccur", settings, [corpus, vocab_path], [out]).write(
        out + ".manifest.json"
    )
    logger.info("Wrote context matrix", path=out, K=matrix.K)


@main.command("pretrain")
@click.option("--mode", type=click.Choice(all_modes()), help="Training mode")
@click.option("--config", "config_path", help="YAML or JSON config file")
@click.option("--preset", type=click.Choice(["desk", "full"]), help="Default hyper-parameters")
@click.option("--corpus", help="Training corpus, one document per line")
@click.option("--vocab", "vocab_path", help="Vocabulary file (built from the corpus if absent)")
@click.option("--max-vocab", default=8000, type=int, help="Vocabulary size when building")
@click.option("--cooccur", help="Context matrix file, required by guided modes")
@click.option("--heldout", help="Held-out corpus for periodic evaluation")
@click.option("--out-dir", help="Directory for metrics, checkpoints and the manifest")
@click.option("--steps", type=int, help="Override the number of steps")
@click.option("--seed", type=int, help="Override the seed")
@click.option("--gamma", type=float, help="Override the guidance loss weight")
@click.option("--lam", type=float, help="Override the discriminator loss weight")
@click.option("--resume", help="Trainer checkpoint to continue from")
@click.option("--progress", is_flag=True, help="Show a progress bar")
@click.option("--dry-run", is_flag=True, help="Print the resolved config and exit")
@handle_errors
def pretrain_command(
    mode: Optional[str],
    config_path: Optional[str],
    preset: Optional[str],
    corpus: Optional[str],
    vocab_path: Optional[str],
    max_vocab: int,
    cooccur: Optional[str],
    heldout: Optional[str],
    out_dir: Optional[str],
    steps: Optional[int],
    seed: Optional[int],
    gamma: Optional[float],
    lam: Optional[float],
    resume: Optional[str],
    progress: bool,
    dry_run: bool,
) -> None:
    """Pre-train a model; guided modes need --cooccur."""
    overrides = {"mode": mode, "steps": steps, "seed": seed, "gamma": gamma, "lam": lam}
    checkpoint = None
    if resume is not None:
        checkpoint = load_training_checkpoint(resume)
        config: TrainConfig = checkpoint.config
        if any(v is not None for v in overrides.values()) or config_path or preset:
            logger.warning("Ignoring config flags when resuming", checkpoint=resume)
        cooccur = cooccur or checkpoint.cooccur_path
    else:
        config = load_train_config(config_path, preset, **overrides)
    if dry_run:
        _echo_json(config.to_dict())
        return

    if gamma is not None and not config.train_mode.uses_mpa:
        logger.warning("Ignoring gamma for a mode without attention guidance", mode=config.mode)
    if config.train_mode.uses_mpa and cooccur is None:
        raise ConfigError(f"mode '{config.mode}' needs --cooccur")
    corpus, out_dir = _require(corpus, "--corpus"), _require(out_dir, "--out-dir")

    lines = list(read_lines(corpus))
    if vocab_path is not None:
        vocab = Vocabulary.load(vocab_path)
    elif checkpoint is not None and checkpoint.vocab is not None:
        vocab = checkpoint.vocab
    else:
        vocab = build_vocab(lines, max_size=max_vocab)
    matrix = _load_matrix(cooccur, vocab)
    heldout_seqs = _pack(list(read_lines(heldout)), vocab, config.max_len) if heldout else None

    trainer = Trainer(
        config,
        _pack(lines, vocab, config.max_len),
        len(vocab),
        matrix,
        out_dir,
        vocab=vocab,
        cooccur_path=cooccur,
        heldout=heldout_seqs,
        progress=progress,
    )
    state = trainer.train(checkpoint.state if checkpoint is not None else None)

    out = Path(out_dir)
    RunManifest.create(
        "pretrain",
        config.to_dict(),
        [corpus, vocab_path, cooccur, config_path, resume, heldout],
        [out / METRICS_FILE, out / FINAL_CHECKPOINT],
    ).write(out / MANIFEST_FILE)
    logger.info("Pre-training complete", step=state.step, out_dir=out_dir)


@main.command("eval")
@click.option("--checkpoint", help="Trainer checkpoint")
@click.option("--heldout", help="Held-out corpus, one document per line")
@click.option("--report", help="JSON report to write")
@click.option("--cooccur", help="Context matrix for the attention-mass split")
@click.option("--trap-config", help="Planted-pattern description for the trap metrics")
@click.option("--seed", default=0, type=int, help="Seed of the evaluation masking")
@click.option("--dry-run", is_flag=True, help="Print the resolved settings and exit")
@handle_errors
def eval_command(
    checkpoint: Optional[str],
    heldout: Optional[str],
    report: Optional[str],
    cooccur: Optional[str],
    trap_config: Optional[str],
    seed: int,
    dry_run: bool,
) -> None:
    """Evaluate a checkpoint on held-out text."""
    if dry_run:
        _echo_json(
            {
                "checkpoint": checkpoint,
                "heldout": heldout,
                "report": report,
                "cooccur": cooccur,
                "trap_config": trap_config,
                "seed": seed,
            }
        )
        return
    checkpoint = _require(checkpoint, "--checkpoint")
    heldout, report = _require(heldout, "--heldout"), _require(report, "--report")
    loaded = load_training_checkpoint(checkpoint)
    if loaded.vocab is None:
        raise FormatError(f"checkpoint {checkpoint} carries no vocabulary")
    config, vocab = loaded.config, loaded.vocab
    lines = list(read_lines(heldout))
    matrix = _load_matrix(cooccur, vocab)
    probe = None
    if trap_config is not None:
        spec = TrapSpec.from_dict(load_config_file(trap_config))
        probe = build_trap_probe(lines, vocab, spec, config.max_len)

    result = eval_probe(
        objective_for(config, matrix),
        loaded.state.models,
        _pack(lines, vocab, config.max_len),
        matrix,
        probe,
        seed=seed,
    )
    record = {"mode": config.mode, "step": loaded.state.step, **result.to_dict()}
    Path(report).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    inputs = [checkpoint, heldout, cooccur, trap_config]
    settings = {"eval_seed": seed, "config": config.to_dict()}
    RunManifest.create("eval", settings, inputs, [report]).write(report + ".manifest.json")
    logger.info("Wrote evaluation report", path=report, **record)


@main.command("dump-attention")
@click.option("--checkpoint", help="Trainer checkpoint")
@click.option("--sentence", help="Text to run through the main model")
@click.option("--out", help="Line-delimited JSON file to write")
@click.option("--dry-run", is_flag=True, help="Print the resolved settings and exit")
@handle_errors
def dump_attention_command(
    checkpoint: Optional[str], sentence: Optional[str], out: Optional[str], dry_run: bool
) -> None:
    """Dump pre- and post-softmax attention rows of every layer and head."""
    if dry_run:
        _echo_json({"checkpoint": checkpoint, "sentence": sentence, "out": out})
        return
    checkpoint, out = _require(checkpoint, "--checkpoint"), _require(out, "--out")
    sentence = _require(sentence, "--sentence")
    loaded = load_training_checkpoint(checkpoint)
    if loaded.vocab is None:
        raise FormatError(f"checkpoint {checkpoint} carries no vocabulary")
    config, vocab = loaded.config, loaded.vocab
    mode = config.train_mode
    objective = OBJECTIVES[mode.backbone]
    model = loaded.state.models[objective.main_model]
    ids = [CLS_ID] + vocab.encode(sentence)[: config.max_len - 1]
    output = forward(model, ids, "discriminator" if mode.has_discriminator else "generator")
    guided = set(output.guided_slots) if mode.uses_mpa else set()
    predictions = leave_one_out_predictions(loaded.state.models[objective.mlm_model], ids)
    predicted_tokens = [vocab.tokens[p] if p >= 0 else None for p in predictions]
    mispredicted = [bool(p >= 0 and p != t) for p, t in zip(predictions, ids)]

    with open(out, "w", encoding="utf-8") as handle:
        for layer, (layer_logits, layer_probs) in enumerate(
            zip(output.attention_logits, output.attention_probs)
        ):
            for head, (logits, probs) in enumerate(zip(layer_logits, layer_probs)):
                for position, token_id in enumerate(ids):
                    record = {
                        "layer": layer,
                        "head": head,
                        "position": position,
                        "token": vocab.tokens[token_id],
                        "unk": token_id == UNK_ID,
                        "guided": (layer, head) in guided,
                        "prediction": predicted_tokens[position],
                        "mispredicted": mispredicted[position],
                        "logits": logits.data[position].tolist(),
                        "probs": probs.data[position].tolist(),
                    }
                    handle.write(json.dumps(record) + "\n")
    RunManifest.create(
        "dump-attention", {"sentence": sentence, "mode": config.mode}, [checkpoint], [out]
    ).write(out + ".manifest.json")
    logger.info("Wrote attention dump", path=out, tokens=len(ids))


def _experiment_config(config_path: Optional[str], steps: Optional[int]) -> TrainConfig:
    overrides = load_config_file(config_path) if config_path else {}
    if steps is not None:
        overrides["steps"] = steps
    return trap_base_config(**overrides)


def _trap_spec(trap_config: Optional[str]) -> TrapSpec:
    return TrapSpec.from_dict(load_config_file(trap_config)) if trap_config else TrapSpec()


@main.command("experiment-trap")
@click.option("--seed", default=0, type=int, help="First seed")
@click.option("--seeds", "num_seeds", default=3, type=int, help="Number of consecutive seeds")
@click.option("--out-dir", help="Directory for runs, tables and the manifest")
@click.option(
    "--modes", default=",".join(DEFAULT_MODES), help="Comma-separated modes, baseline first"
)
@click.option("--steps", type=int, help="Override the number of steps")
@click.option("--config", "config_path", help="YAML or JSON overrides of the model config")
@click.option("--trap-config", help="YAML or JSON planted-pattern description")
@click.option("--progress", is_flag=True, help="Show progress bars")
@click.option("--dry-run", is_flag=True, help="Print the resolved config and exit")
@handle_errors
def experiment_trap_command(
    seed: int,
    num_seeds: int,
    out_dir: Optional[str],
    modes: str,
    steps: Optional[int],
    config_path: Optional[str],
    trap_config: Optional[str],
    progress: bool,
    dry_run: bool,
) -> None:
    """Train the baseline and the guided variants on planted-pattern corpora."""
    base = _experiment_config(config_path, steps)
    spec = _trap_spec(trap_config)
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    seeds = list(range(seed, seed + num_seeds))
    settings = {
        "config": base.to_dict(),
        "trap": spec.to_dict(),
        "modes": mode_list,
        "seeds": seeds,
    }
    if dry_run:
        _echo_json(settings)
        return
    out_dir = _require(out_dir, "--out-dir")
    result = run_trap_experiment(seeds, mode_list, out_dir, base, spec, progress)
    RunManifest.create(
        "experiment-trap", settings, [config_path, trap_config], ["results.jsonl", "table.txt"]
    ).write(Path(out_dir) / MANIFEST_FILE)
    click.echo(result.table())


@main.command("experiment-sensitivity")
@click.option("--seed", default=0, type=int, help="Corpus and training seed")
@click.option("--out-dir", help="Directory for runs, tables and the manifest")
@click.option(
    "--grid",
    default=",".join(f"{layers}:{heads}:{gamma:g}" for layers, heads, gamma in DEFAULT_GRID),
    help="Comma-separated guided_layers:guided_heads:gamma entries",
)
@click.option("--steps", type=int, help="Override the number of steps")
@click.option("--config", "config_path", help="YAML or JSON overrides of the model config")
@click.option("--trap-config", help="YAML or JSON planted-pattern description")
@click.option("--progress", is_flag=True, help="Show progress bars")
@click.option("--dry-run", is_flag=True, help="Print the resolved config and exit")
@handle_errors
def experiment_sensitivity_command(
    seed: int,
    out_dir: Optional[str],
    grid: str,
    steps: Optional[int],
    config_path: Optional[str],
    trap_config: Optional[str],
    progress: bool,
    dry_run: bool,
) -> None:
    """Sweep guided layers, guided heads and gamma on a planted-pattern corpus."""
    base = _experiment_config(config_path, steps)
    spec = _trap_spec(trap_config)
    entries = parse_grid(grid)
    settings = {"config": base.to_dict(), "trap": spec.to_dict(), "grid": entries, "seed": seed}
    if dry_run:
        _echo_json(settings)
        return
    out_dir = _require(out_dir, "--out-dir")
    result = run_sensitivity(seed, entries, out_dir, base, spec, progress)
    RunManifest.create(
        "experiment-sensitivity",
        settings,
        [config_path, trap_config],
        ["results.jsonl", "table.txt"],
    ).write(Path(out_dir) / MANIFEST_FILE)
    click.echo(result.table())
