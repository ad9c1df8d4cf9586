################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Losses, the difficulty curriculum, the Adam optimizer and the three-stage
training procedure:

    stage 1  knowledge injection   adapters           consistency + task
    stage 2  memory coordination   memory, adapters   task
    stage 3  fine-tuning           LoRA, memory       fine-tune

The base model stays frozen throughout. With `loss_mode="literal_eq11"`
every stage optimizes consistency + task + fine-tune instead.

(c) 2025 Stanley Solutions
"""
################################################################################

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Optional, Sequence, TextIO

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from icft.corpus import CorpusRecord, Vocabulary, difficulty_of
from icft.errors import (
    ConfigError,
    CurriculumError,
    EmptyBatchError,
    IcftError,
    NonFiniteLossError,
    OptimizerError,
)
from icft.memory import make_item
from icft.model import BaseLM, IcftModel, LoRAPatch, forward_base
from icft.tensor import (
    SeededRng,
    Tape,
    Tensor,
    add,
    cross_entropy,
    frobenius_sq,
    scale,
    sub,
    zero_grad,
)

LossTerm = Literal["consistency", "task", "finetune"]
LossMode = Literal["staged", "literal_eq11"]
TERM_ORDER: tuple[str, ...] = ("consistency", "task", "finetune")
AUGMENTATION_GROUPS = ("adapters", "lora", "memory")


class CurriculumStage(BaseModel):
    """One stage of the training procedure."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    index: Literal[1, 2, 3]
    groups: tuple[str, ...]
    terms: tuple[LossTerm, ...]
    epochs: int = Field(default=10, ge=0)
    lr: float = Field(default=1e-3, gt=0)

    @model_validator(mode="after")
    def _check_groups(self) -> "CurriculumStage":
        unknown = set(self.groups) - set(AUGMENTATION_GROUPS)
        if unknown:
            raise ValueError(
                f"stage {self.index} cannot train {sorted(unknown)}; the "
                "base model is frozen"
            )
        allowed, required = {
            1: ({"adapters"}, "adapters"),
            2: ({"memory", "adapters"}, "memory"),
            3: ({"lora", "memory"}, "lora"),
        }[self.index]
        if required not in self.groups or not set(self.groups) <= allowed:
            raise ValueError(
                f"stage {self.index} must train {required} and only "
                f"{sorted(allowed)}, got {list(self.groups)}"
            )
        if not self.terms:
            raise ValueError(f"stage {self.index} has no loss terms")
        return self


def default_stages() -> list[CurriculumStage]:
    """The staged loss assignment."""
    return [
        CurriculumStage(
            index=1, groups=("adapters",), terms=("consistency", "task"),
            epochs=40, lr=1e-2,
        ),
        CurriculumStage(
            index=2, groups=("memory", "adapters"), terms=("task",),
            epochs=60, lr=1e-2,
        ),
        CurriculumStage(
            index=3, groups=("lora", "memory"), terms=("finetune",),
            epochs=200, lr=1e-2,
        ),
    ]


class TrainPlan(BaseModel):
    """Everything that determines a training run apart from the data."""

    model_config = ConfigDict(extra="forbid")

    stages: list[CurriculumStage] = Field(default_factory=default_stages)
    buckets: int = Field(default=3, ge=1)
    mixing: Literal["cumulative"] = "cumulative"
    reg_lambda: float = Field(default=1e-4, ge=0)
    batch_size: int = Field(default=8, ge=1)
    seed: int = 0
    loss_mode: LossMode = "staged"
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    base_epochs: int = Field(default=60, ge=0)
    base_lr: float = Field(default=1e-2, gt=0)

    @model_validator(mode="after")
    def _check_order(self) -> "TrainPlan":
        indices = [stage.index for stage in self.stages]
        if indices != sorted(set(indices)):
            raise ValueError(f"stages must be ordered and unique: {indices}")
        return self


class AblationFlags(BaseModel):
    """Switches that remove one component of the procedure."""

    model_config = ConfigDict(extra="forbid")

    no_memory: bool = False
    no_curriculum: bool = False
    no_lora: bool = False


class LossBreakdown(BaseModel):
    """Loss terms of one optimizer step; absent terms are None."""

    step: int
    stage: int
    l_consistency: Optional[float] = None
    l_task: Optional[float] = None
    l_finetune: Optional[float] = None
    l_total: float
    n: int


################################################################################
# Losses


def consistency_loss(
    base: BaseLM,
    adapted_forward: Callable[[Sequence[int]], Tensor],
    batch: Sequence[Sequence[int]],
) -> Tensor:
    """Mean over sequences of the squared distance between base and adapted
    logits. The base logits are constants."""
    if not batch:
        raise EmptyBatchError("consistency loss over an empty batch")
    loss = None
    for tokens in batch:
        reference = Tensor(forward_base(base, tokens).data)
        term = frobenius_sq(sub(adapted_forward(tokens), reference))
        loss = term if loss is None else add(loss, term)
    return scale(loss, 1.0 / len(batch))


def task_loss(
    logits: Sequence[Tensor],
    targets: Sequence[Sequence[int]],
    ignore_index: Optional[int] = None,
) -> Tensor:
    """Token-mean cross-entropy over every unmasked position of the batch."""
    if len(logits) != len(targets):
        raise EmptyBatchError(
            f"{len(logits)} logit blocks for {len(targets)} target rows"
        )
    if not logits:
        raise EmptyBatchError("task loss over an empty batch")
    count = sum(
        sum(1 for t in row if ignore_index is None or t != ignore_index)
        for row in targets
    )
    summed = None
    for block, row in zip(logits, targets):
        term = cross_entropy(block, row, ignore_index, reduction="sum")
        summed = term if summed is None else add(summed, term)
    if count == 0:
        return scale(summed, 0.0)
    return scale(summed, 1.0 / count)


def fine_tune_loss(
    task: Tensor,
    patches: Sequence[LoRAPatch],
    lam: float,
) -> Tensor:
    """task + lam * sum of squared Frobenius norms of every A and B."""
    if lam < 0:
        raise ConfigError(f"regularization lambda must be >= 0, got {lam}")
    loss = task
    for patch in patches:
        penalty = add(frobenius_sq(patch.a), frobenius_sq(patch.b))
        loss = add(loss, scale(penalty, lam))
    return loss


def total_loss(parts: Mapping[str, Optional[Tensor]]) -> Tensor:
    """Sum of the present terms in fixed order."""
    present = [parts[t] for t in TERM_ORDER if parts.get(t) is not None]
    if not present:
        raise IcftError("no active loss term")
    loss = present[0]
    for term in present[1:]:
        loss = add(loss, term)
    return loss


################################################################################
# Curriculum


def partition_buckets(
    corpus: Sequence[CorpusRecord],
    buckets: int,
) -> list[list[CorpusRecord]]:
    """Sort by difficulty (stable) and split into near-equal buckets."""
    if buckets < 1:
        raise CurriculumError(f"bucket count must be positive, got {buckets}")
    if buckets > len(corpus):
        raise CurriculumError(
            f"{buckets} buckets for a corpus of {len(corpus)} records"
        )
    ordered = sorted(corpus, key=difficulty_of)
    return [
        [ordered[i] for i in chunk]
        for chunk in np.array_split(np.arange(len(ordered)), buckets)
    ]


def included_buckets(buckets: int, stage: int) -> int:
    """Number of easiest buckets a stage draws from."""
    return min(stage * math.ceil(buckets / 3), buckets)


def schedule_curriculum(
    corpus: Sequence[CorpusRecord],
    buckets: int,
    stage: int,
    seed: int,
    epoch: int = 0,
    rng: Optional[SeededRng] = None,
) -> list[CorpusRecord]:
    """The shuffled example stream of one stage epoch.

    A pure function of its arguments, which is what makes resume a plain
    skip-ahead. `rng` replaces the generator derived from (seed, stage,
    epoch), e.g. one restored from a checkpoint.
    """
    if stage not in (1, 2, 3):
        raise CurriculumError(f"unknown stage {stage}")
    parts = partition_buckets(corpus, buckets)
    included = parts[:included_buckets(buckets, stage)]
    pool = [record for part in included for record in part]
    rng = rng or stream_rng(seed, stage, epoch)
    return [pool[i] for i in rng.permutation(len(pool))]


def stream_rng(seed: int, stage: int, epoch: int) -> SeededRng:
    """Generator that shuffles one stage epoch."""
    return SeededRng(seed).spawn(stage, epoch)


def stage_stream(
    corpus: Sequence[CorpusRecord],
    plan: "TrainPlan",
    stage: int,
    epoch: int,
    single_bucket: bool = False,
    rng: Optional[SeededRng] = None,
) -> list[CorpusRecord]:
    """Example stream of one stage epoch of a run.

    Single-bucket training shuffles the whole corpus but keeps the step
    budget of the curriculum stage it replaces.
    """
    if not single_bucket:
        return schedule_curriculum(
            corpus, plan.buckets, stage, plan.seed, epoch, rng
        )
    parts = partition_buckets(corpus, plan.buckets)
    budget = sum(
        len(part) for part in parts[:included_buckets(plan.buckets, stage)]
    )
    flat = schedule_curriculum(corpus, 1, stage, plan.seed, epoch, rng)
    return flat[:budget]


################################################################################
# Optimizer


@dataclass
class OptimizerState:
    """Adam hyperparameters and per-parameter moments."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict
    )
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(
    state: OptimizerState,
    params: Mapping[str, Tensor],
    lr: Optional[float] = None,
) -> None:
    """Bias-corrected Adam update of every named parameter, in place."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise OptimizerError(f"no gradient for {', '.join(missing)}")
    rate = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    for name, param in params.items():
        grad = param.grad
        m, v = state.moments.get(
            name, (np.zeros_like(param.data), np.zeros_like(param.data))
        )
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        t = state.steps.get(name, 0) + 1
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        param.data -= rate * m_hat / (np.sqrt(v_hat) + state.eps)
        state.moments[name] = (m, v)
        state.steps[name] = t
    state.step_count += 1


################################################################################
# Procedure


@dataclass
class TrainingState:
    """Resumable position of a run."""

    optimizer: OptimizerState
    global_step: int = 0
    stage: int = 0
    epoch: int = 0
    # generator of the epoch in progress, as it was before its shuffle
    rng: Optional[dict] = None
    log: list[LossBreakdown] = field(default_factory=list)

    @classmethod
    def fresh(cls, plan: TrainPlan) -> "TrainingState":
        """Zeroed state for a plan's optimizer settings."""
        return cls(
            optimizer=OptimizerState(
                beta1=plan.beta1, beta2=plan.beta2, eps=plan.eps
            )
        )


@dataclass
class TrainResult:
    """Outcome of `run_icft`."""

    model: IcftModel
    state: TrainingState
    final_task_loss: float
    completed: bool


def format_metrics_line(entry: LossBreakdown) -> str:
    """Tab-separated step, stage and loss terms; absent terms are '-'."""
    def cell(value):
        return "-" if value is None else repr(float(value))

    return "\t".join(
        [
            str(entry.step),
            str(entry.stage),
            cell(entry.l_consistency),
            cell(entry.l_task),
            cell(entry.l_finetune),
            cell(entry.l_total),
        ]
    )


def metrics_writer(stream: TextIO) -> Callable[[LossBreakdown], None]:
    """Sink that appends one metrics line per step to an open file."""
    def write(entry: LossBreakdown) -> None:
        stream.write(format_metrics_line(entry) + "\n")

    return write


def split_targets(vocab: Vocabulary, record: CorpusRecord, strict=False):
    """Model inputs and next-token targets with prompt positions masked."""
    tokens = vocab.record_ids(record, strict)
    prompt_len = len(vocab.prompt_ids(record.prompt, strict))
    targets = list(tokens[1:])
    for i in range(prompt_len - 1):
        targets[i] = vocab.pad_id
    return tokens[:-1], targets


def shifted_targets(vocab: Vocabulary, record: CorpusRecord):
    """Model inputs and next-token targets over the whole record."""
    tokens = vocab.record_ids(record)
    return tokens[:-1], tokens[1:]


def stage_terms(stage: CurriculumStage, mode: LossMode) -> tuple[str, ...]:
    """Loss terms a stage optimizes under the given loss mode."""
    return TERM_ORDER if mode == "literal_eq11" else stage.terms


def active_groups(
    stage: CurriculumStage,
    ablations: AblationFlags,
) -> tuple[str, ...]:
    """Trainable groups of a stage after ablations."""
    if ablations.no_memory:
        return tuple(g for g in stage.groups if g != "memory")
    return stage.groups


def _check_finite(step: int, parts: Mapping[str, Tensor]) -> None:
    for term, value in parts.items():
        if not np.isfinite(value.data).all():
            raise NonFiniteLossError(step, term, value.item())


def _training_step(
    plan: TrainPlan,
    model: IcftModel,
    stage: CurriculumStage,
    batch: Sequence[CorpusRecord],
    ablations: AblationFlags,
    state: TrainingState,
) -> LossBreakdown:
    groups = active_groups(stage, ablations)
    terms = stage_terms(stage, plan.loss_mode)
    model.set_trainable(groups)
    params = {
        name: tensor
        for group in groups
        for name, tensor in model.parameter_groups()[group].items()
    }
    step = state.global_step + 1
    consult = stage.index >= 2 and not ablations.no_memory
    used_memory = False

    with Tape() as tape:
        inputs, targets, logits = [], [], []
        for record in batch:
            tokens, target = split_targets(model.vocab, record)
            result = None
            if consult:
                result = model.memory.query(model.query_vector(record.prompt))
            z = None if result is None else result.z
            used_memory = used_memory or z is not None
            logits.append(model.logits(tokens, z=z))
            inputs.append(tokens)
            targets.append(target)
            if consult:
                if result is not None:
                    model.memory.observe(result)
                model.memory.remember(
                    make_item(
                        model.base, model.vocab, record.id, record.dialogue
                    )
                )

        parts: dict[str, Tensor] = {}
        if "consistency" in terms:
            cached = iter(logits)
            parts["consistency"] = consistency_loss(
                model.base, lambda _tokens: next(cached), inputs
            )
        task = task_loss(logits, targets, ignore_index=model.vocab.pad_id)
        if "task" in terms:
            parts["task"] = task
        if "finetune" in terms:
            parts["finetune"] = fine_tune_loss(
                task, model.patches, plan.reg_lambda
            )
        _check_finite(step, parts)
        loss = total_loss(parts)
        if loss.requires_grad:
            tape.backward(loss)

    if "memory" in groups and not used_memory:
        logger.debug(f"step {step}: memory was empty, projections idle")
    # parameters the graph never reached get a zero gradient
    for tensor in params.values():
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
    adam_step(state.optimizer, params, stage.lr)
    zero_grad(params.values())

    def value(term):
        return parts[term].item() if term in parts else None

    return LossBreakdown(
        step=step,
        stage=stage.index,
        l_consistency=value("consistency"),
        l_task=value("task"),
        l_finetune=value("finetune"),
        l_total=loss.item(),
        n=len(batch),
    )


def evaluate_task_loss(
    model: IcftModel,
    corpus: Sequence[CorpusRecord],
    use_memory: bool = True,
) -> float:
    """Token-mean task loss over a corpus with read-only memory."""
    logits, targets = [], []
    for record in corpus:
        tokens, target = split_targets(model.vocab, record)
        z = model.readout(record.prompt) if use_memory else None
        logits.append(model.logits(tokens, z=z))
        targets.append(target)
    return task_loss(logits, targets, ignore_index=model.vocab.pad_id).item()


def run_icft(
    plan: TrainPlan,
    model: IcftModel,
    corpus: Sequence[CorpusRecord],
    ablations: Optional[AblationFlags] = None,
    state: Optional[TrainingState] = None,
    max_steps: Optional[int] = None,
    metrics_sink: Optional[Callable[[LossBreakdown], None]] = None,
) -> TrainResult:
    """Run (or resume) the staged procedure.

    Steps up to `state.global_step` are skipped, so a restored state
    continues exactly where it was saved. `max_steps` caps the global step
    count; the result is then marked incomplete.
    """
    ablations = ablations or AblationFlags()
    state = state or TrainingState.fresh(plan)
    if not corpus:
        raise EmptyBatchError("cannot train on an empty corpus")
    if not model.base.frozen:
        raise IcftError("the base model must be frozen before ICFT")
    frozen_bytes = model.base.state_bytes()
    position = 0
    completed = True

    for stage in plan.stages:
        if ablations.no_lora and stage.index == 3:
            logger.info("Skipping stage 3: LoRA fine-tuning disabled")
            continue
        logger.info(
            f"Stage {stage.index}: training {', '.join(stage.groups)} for "
            f"{stage.epochs} epochs"
        )
        for epoch in range(stage.epochs):
            resuming = (stage.index, epoch) == (state.stage, state.epoch)
            if resuming and state.rng is not None:
                rng = SeededRng.from_state(state.rng)
            else:
                rng = stream_rng(plan.seed, stage.index, epoch)
            snapshot = rng.state()
            stream = stage_stream(
                corpus, plan, stage.index, epoch,
                single_bucket=ablations.no_curriculum, rng=rng,
            )
            for start in range(0, len(stream), plan.batch_size):
                position += 1
                if position <= state.global_step:
                    continue
                if max_steps is not None and state.global_step >= max_steps:
                    completed = False
                    break
                batch = stream[start:start + plan.batch_size]
                entry = _training_step(
                    plan, model, stage, batch, ablations, state
                )
                state.global_step, state.stage, state.epoch = (
                    entry.step, stage.index, epoch,
                )
                state.rng = snapshot
                state.log.append(entry)
                logger.bind(stage=stage.index, step=entry.step).debug(
                    f"loss {entry.l_total:.6f}"
                )
                if metrics_sink is not None:
                    metrics_sink(entry)
            if not completed:
                break
        if not completed:
            break

    model.set_trainable(())
    if model.base.state_bytes() != frozen_bytes:
        raise IcftError("base model parameters changed during training")
    final = evaluate_task_loss(
        model, corpus, use_memory=not ablations.no_memory
    )
    logger.info(
        f"Finished at step {state.global_step}; final task loss {final:.6f}"
    )
    return TrainResult(
        model=model, state=state, final_task_loss=final, completed=completed
    )


def pretrain_base(
    base: BaseLM,
    vocab: Vocabulary,
    corpus: Sequence[CorpusRecord],
    epochs: int,
    lr: float,
    batch_size: int = 8,
    seed: int = 0,
) -> list[float]:
    """Full fine-tuning of the base model on general text, then freeze it.

    Every next token of a record is a target, prompt included. Returns the
    mean loss of every epoch.
    """
    if not corpus:
        raise EmptyBatchError("cannot pretrain on an empty corpus")
    optimizer = OptimizerState(lr=lr)
    params = dict(base.named_parameters())
    history: list[float] = []
    base.unfreeze()
    try:
        for epoch in range(epochs):
            order = SeededRng(seed).spawn(0, epoch).permutation(len(corpus))
            stream = [corpus[i] for i in order]
            losses = []
            for start in range(0, len(stream), batch_size):
                batch = stream[start:start + batch_size]
                with Tape() as tape:
                    pairs = [shifted_targets(vocab, r) for r in batch]
                    logits = [forward_base(base, tokens) for tokens, _ in pairs]
                    loss = task_loss(
                        logits, [t for _, t in pairs], ignore_index=vocab.pad_id
                    )
                    if not np.isfinite(loss.data).all():
                        raise NonFiniteLossError(
                            len(losses) + 1, "pretrain", loss.item()
                        )
                    tape.backward(loss)
                for tensor in params.values():
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                adam_step(optimizer, params)
                zero_grad(params.values())
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
            logger.debug(f"pretrain epoch {epoch}: loss {history[-1]:.6f}")
    finally:
        base.freeze()
    if history:
        logger.info(f"Pretrained base model; final loss {history[-1]:.6f}")
    return history
