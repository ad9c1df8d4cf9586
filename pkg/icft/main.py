################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Command-line surface: train, eval, count-params and inspect-memory.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

(c) 2025 Stanley Solutions
"""
################################################################################

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from jinja2 import Environment, FileSystemLoader
from loguru import logger

from icft import __header__, __version__
from icft.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from icft.corpus import CorpusRecord, Vocabulary, load_corpus
from icft.errors import ConfigError, IcftError, MetricError
from icft.logger import LOG_CONFIG, CustomLogger
from icft.memory import DualMemory, retrieval_accuracy
from icft.metrics import MetricReport, score_responses
from icft.model import TRAINABLE_GROUPS, build_icft_model, count_params
from icft.model import init_model
from icft.settings import RunConfig, get_settings, load_settings
from icft.settings import set_settings
from icft.training import metrics_writer, pretrain_base, run_icft

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.tsv"

# Load Templates
TEMPLATES = Environment(
    loader=FileSystemLoader(Path(__file__).parent / "templates"),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


class UsageError(ConfigError):
    """The command line could not be parsed."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _settings(args) -> RunConfig:
    config = load_settings(args.config).with_overrides(
        seed=args.seed,
        no_memory=args.no_memory,
        no_curriculum=args.no_curriculum,
        no_lora=args.no_lora,
        loss_mode=args.loss_mode,
    )
    return set_settings(config)


def _checkpoint_path(args, settings: RunConfig) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    return settings.paths.output_dir / CHECKPOINT_NAME


def load_general_corpus(settings: RunConfig) -> list[CorpusRecord]:
    """General text the base model is pretrained on, if configured."""
    if settings.paths.pretrain_corpus is None:
        return []
    return load_corpus(settings.paths.pretrain_corpus)


def cmd_train(settings: Optional[RunConfig] = None) -> int:
    """Pretrain the base model on general text, run the staged procedure
    on the dialogue corpus and save."""
    settings = settings or get_settings()
    out_dir = settings.paths.output_dir
    corpus = load_corpus(settings.paths.corpus)
    general = load_general_corpus(settings)
    vocab = Vocabulary.build([*general, *corpus])
    cfg = settings.model.resolve(len(vocab))
    plan = settings.plan

    base = init_model(cfg)
    if general:
        pretrain_base(
            base, vocab, general, plan.base_epochs, plan.base_lr,
            plan.batch_size, plan.seed,
        )
    else:
        logger.warning("No pretraining corpus; the base model stays random")
    model = build_icft_model(
        cfg, vocab, DualMemory.create(settings.memory, cfg.d_model), base
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS_NAME
    scratch = metrics_path.with_name(METRICS_NAME + ".tmp")
    try:
        with open(scratch, "w", encoding="utf-8") as stream:
            result = run_icft(
                plan, model, corpus, settings.ablations,
                metrics_sink=metrics_writer(stream),
            )
    except BaseException:
        scratch.unlink(missing_ok=True)
        raise
    os.replace(scratch, metrics_path)

    checkpoint_path = out_dir / CHECKPOINT_NAME
    save_checkpoint(
        checkpoint_path,
        Checkpoint(
            model=result.model,
            plan=plan,
            ablations=settings.ablations,
            state=result.state,
        ),
    )
    print(
        TEMPLATES.get_template("train_summary.j2").render(
            steps=result.state.global_step,
            ablations=[
                flag for flag, on in settings.ablations.model_dump().items()
                if on
            ],
            final_task_loss=result.final_task_loss,
            checkpoint=checkpoint_path,
            metrics_log=metrics_path,
        ),
        end="",
    )
    return EXIT_OK


def evaluate(
    checkpoint: Checkpoint,
    records: Sequence[CorpusRecord],
    settings: Optional[RunConfig] = None,
) -> MetricReport:
    """Greedy-decode every prompt and score it against its reference."""
    settings = settings or get_settings()
    if not records:
        raise MetricError("the evaluation set is empty")
    model = checkpoint.model
    strict = not settings.metrics.allow_unknown_tokens
    for record in records:
        model.vocab.record_ids(record, strict=strict)
    use_memory = not checkpoint.ablations.no_memory

    candidates = [
        model.respond(
            record.prompt,
            use_memory=use_memory,
            max_new_tokens=settings.metrics.max_new_tokens,
        )
        for record in records
    ]
    labelled = [record for record in records if record.label]
    predicted = labels = None
    if labelled:
        choices = sorted({record.label for record in labelled})
        labels = [record.label for record in labelled]
        predicted = [
            model.classify(record.prompt, choices, use_memory=use_memory)
            for record in labelled
        ]
    return score_responses(
        candidates,
        [record.response for record in records],
        predicted_labels=predicted,
        labels=labels,
        per_response_distinct=settings.metrics.per_response_distinct,
    )


def cmd_eval(
    checkpoint_path: Path,
    data_path: Optional[Path] = None,
    as_json: bool = False,
    settings: Optional[RunConfig] = None,
) -> int:
    """Score a checkpoint on a JSONL set (the training corpus by default)."""
    settings = settings or get_settings()
    checkpoint = load_checkpoint(checkpoint_path)
    records = load_corpus(data_path or settings.paths.corpus)
    report = evaluate(checkpoint, records, settings)
    if as_json:
        print(report.model_dump_json(indent=2))
    else:
        print(
            TEMPLATES.get_template("metric_report.j2").render(report=report),
            end="",
        )
    return EXIT_OK


def cmd_count_params(
    as_json: bool = False,
    settings: Optional[RunConfig] = None,
) -> int:
    """Parameter accounting for every training mode."""
    settings = settings or get_settings()
    vocab_size = settings.model.vocab_size
    if vocab_size is None:
        records = [
            *load_general_corpus(settings),
            *load_corpus(settings.paths.corpus),
        ]
        vocab_size = len(Vocabulary.build(records))
    cfg = settings.model.resolve(vocab_size)
    reports = [count_params(cfg, mode) for mode in TRAINABLE_GROUPS]
    if as_json:
        print("[" + ",\n".join(r.model_dump_json() for r in reports) + "]")
    else:
        print(
            TEMPLATES.get_template("param_counts.j2").render(
                config=cfg, reports=reports
            ),
            end="",
        )
    return EXIT_OK


def store_accuracies(
    checkpoint: Checkpoint,
    records: Sequence[CorpusRecord],
) -> dict[str, Optional[float]]:
    """Per-store retrieval accuracy, probing with each resident's prompt."""
    model = checkpoint.model
    memory = model.memory
    accuracies: dict[str, Optional[float]] = {}
    for name, store, ids in (
        ("STM", memory.stm, {item.id for item in memory.stm.items}),
        ("LTM", memory.ltm, set(memory.ltm.items)),
    ):
        queries = [
            (model.query_vector(record.prompt), record.id)
            for record in records
            if record.id in ids
        ]
        accuracies[name] = (
            retrieval_accuracy(store, queries) if queries else None
        )
    return accuracies


def cmd_inspect_memory(
    checkpoint_path: Path,
    settings: Optional[RunConfig] = None,
) -> int:
    """Dump both memory stores of a checkpoint."""
    settings = settings or get_settings()
    checkpoint = load_checkpoint(checkpoint_path)
    records = []
    if settings.paths.corpus.exists():
        records = load_corpus(settings.paths.corpus)
    print(
        TEMPLATES.get_template("memory_dump.j2").render(
            memory=checkpoint.model.memory,
            accuracies=store_accuracies(checkpoint, records),
        ),
        end="",
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Argument parser for every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--no-memory", action="store_true")
    common.add_argument("--no-curriculum", action="store_true")
    common.add_argument("--no-lora", action="store_true")
    common.add_argument(
        "--loss-mode", choices=("staged", "literal_eq11"), default=None
    )
    common.add_argument("--log-level", default=None)

    parser = _Parser(
        prog="icft",
        description="Incremental curriculum fine-tuning.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(
        dest="command", required=True, parser_class=_Parser
    )
    commands.add_parser("train", parents=[common], help="run training")
    evaluate_cmd = commands.add_parser(
        "eval", parents=[common], help="score a checkpoint"
    )
    evaluate_cmd.add_argument("--checkpoint", type=Path)
    evaluate_cmd.add_argument("--data", type=Path, help="JSONL eval set")
    evaluate_cmd.add_argument("--json", action="store_true")
    count_cmd = commands.add_parser(
        "count-params", parents=[common], help="trainable parameter table"
    )
    count_cmd.add_argument("--json", action="store_true")
    inspect_cmd = commands.add_parser(
        "inspect-memory", parents=[common], help="dump the memory stores"
    )
    inspect_cmd.add_argument("--checkpoint", type=Path)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        _settings(args)
    except UsageError as exc:
        logger.error(f"usage: {exc}")
        return EXIT_USAGE
    except ConfigError as exc:
        logger.error(str(exc))
        return EXIT_USAGE

    settings = get_settings()
    log_dir = settings.paths.output_dir if args.command == "train" else None
    CustomLogger.make_logger(
        settings.paths.log_config or LOG_CONFIG, log_dir, args.log_level
    )
    logger.debug(__header__)
    logger.info(f"icft {__version__}: {args.command}")
    try:
        if args.command == "train":
            return cmd_train()
        if args.command == "eval":
            return cmd_eval(
                _checkpoint_path(args, settings), args.data, args.json
            )
        if args.command == "count-params":
            return cmd_count_params(args.json)
        return cmd_inspect_memory(_checkpoint_path(args, settings))
    except ConfigError as exc:
        logger.error(str(exc))
        return EXIT_USAGE
    except IcftError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    except OSError as exc:
        logger.error(f"I/O failure: {exc}")
        return EXIT_RUNTIME
