################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

A small decoder-only transformer (the frozen base model) and its two
weight-space augmentations: bottleneck adapters after each feed-forward
sublayer and LoRA patches on the query and value projections.

Matrices act on row vectors: a layer computes x @ W. An adapter's
`w_down` is d x r_a and `w_up` is r_a x d, so the residual adapter is
x + relu(x @ w_down) @ w_up. A LoRA patch on a d x k matrix W carries
A (d x r_l) and B (r_l x k) and behaves as W + A @ B.

(c) 2025 Stanley Solutions
"""
################################################################################

import copy
import math
from dataclasses import dataclass, replace
from typing import Iterator, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from icft.corpus import Vocabulary
from icft.errors import LoraError, ShapeError, TargetIndexError
from icft.memory import DualMemory, encode_query, inject_readout
from icft.tensor import (
    SeededRng,
    Tensor,
    add,
    concat_cols,
    layer_norm,
    log_softmax_lastdim,
    matmul,
    relu,
    reshape,
    scale,
    slice_cols,
    softmax_lastdim,
    take_rows,
    transpose,
)

BASE_GROUPS = (
    "embeddings", "attention", "feed_forward", "layer_norm", "output",
)
Mode = Literal["full", "adapter-only", "lora-only", "icft"]

TRAINABLE_GROUPS: dict[str, tuple[str, ...]] = {
    "full": BASE_GROUPS,
    "adapter-only": ("adapters",),
    "lora-only": ("lora",),
    "icft": ("adapters", "lora"),
}
LORA_TARGETS = ("wq", "wv")
PROJECTION_SUFFIXES = (
    ".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".ff.w1", ".ff.w2",
)


class ModelConfig(BaseModel):
    """Shape of the base model and its augmentations."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = Field(default=32, ge=1)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=4, ge=1)
    vocab_size: int = Field(ge=2)
    ctx_len: int = Field(default=64, ge=2)
    ff_mult: int = Field(default=4, ge=1)
    adapter_rank: int = Field(default=8, ge=1)
    lora_rank: int = Field(default=8, ge=0)
    activation: Literal["relu"] = "relu"
    init_std: float = Field(default=0.02, gt=0)
    ln_eps: float = Field(default=1e-5, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranks(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads "
                f"{self.n_heads}"
            )
        if self.adapter_rank > self.d_model // 2:
            raise ValueError(
                f"adapter_rank {self.adapter_rank} exceeds d_model/2"
            )
        # LoRA targets are the d x d query and value projections
        if self.lora_rank > self.d_model:
            raise ValueError(f"lora_rank {self.lora_rank} exceeds d_model")
        return self

    @property
    def ff_width(self) -> int:
        """Hidden width of the feed-forward sublayer."""
        return self.ff_mult * self.d_model

    @property
    def head_width(self) -> int:
        """Width of one attention head."""
        return self.d_model // self.n_heads


def parameter_shapes(cfg: ModelConfig) -> Iterator[tuple[str, str, tuple]]:
    """Yield (name, group, shape) of every base parameter in fixed order."""
    d, f = cfg.d_model, cfg.ff_width
    yield "embed.tokens", "embeddings", (cfg.vocab_size, d)
    yield "embed.positions", "embeddings", (cfg.ctx_len, d)
    for i in range(cfg.n_layers):
        prefix = f"layers.{i}"
        yield f"{prefix}.ln1.gain", "layer_norm", (d,)
        yield f"{prefix}.ln1.bias", "layer_norm", (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            yield f"{prefix}.attn.{proj}", "attention", (d, d)
        yield f"{prefix}.ln2.gain", "layer_norm", (d,)
        yield f"{prefix}.ln2.bias", "layer_norm", (d,)
        yield f"{prefix}.ff.w1", "feed_forward", (d, f)
        yield f"{prefix}.ff.w2", "feed_forward", (f, d)
    yield "final_ln.gain", "layer_norm", (d,)
    yield "final_ln.bias", "layer_norm", (d,)
    yield "head.w", "output", (d, cfg.vocab_size)


class BaseLM:
    """The base language model and its frozen weights."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.groups = {
            name: group for name, group, _ in parameter_shapes(config)
        }

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters in deterministic enumeration order."""
        yield from self.params.items()

    @property
    def frozen(self) -> bool:
        """True when no base parameter is trainable."""
        return not any(p.requires_grad for p in self.params.values())

    def freeze(self) -> None:
        """Stop gradients into every base parameter."""
        for param in self.params.values():
            param.requires_grad = False
            param.grad = None

    def unfreeze(self) -> None:
        """Make every base parameter trainable."""
        for param in self.params.values():
            param.requires_grad = True

    def state_bytes(self) -> bytes:
        """Raw parameter bytes, used to verify the base stays frozen."""
        return b"".join(p.data.tobytes() for p in self.params.values())


@dataclass
class AdapterLayer:
    """Residual bottleneck adapter wrapping one sublayer output."""

    w_down: Tensor
    w_up: Tensor
    attachment: str

    @property
    def rank(self) -> int:
        """Bottleneck width r_a."""
        return self.w_down.shape[1]


@dataclass
class LoRAPatch:
    """Low-rank update A @ B for one target matrix."""

    target: str
    a: Tensor
    b: Tensor
    merged: bool = False

    @property
    def rank(self) -> int:
        """Inner dimension r_l."""
        return self.a.shape[1]


class GroupCount(BaseModel):
    """Parameter count of one group."""

    group: str
    params: int
    trainable: bool


class ParamCountReport(BaseModel):
    """Trainable-parameter accounting for one training mode."""

    mode: str
    total_params: int
    trainable_params: int
    relative_size_percent: float
    groups: list[GroupCount]


def init_model(cfg: ModelConfig) -> BaseLM:
    """Gaussian(0, init_std) weights, unit gains and zero biases; frozen."""
    rng = SeededRng(cfg.seed)
    params: dict[str, Tensor] = {}
    for name, _group, shape in parameter_shapes(cfg):
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(cfg.init_std, shape)
        params[name] = Tensor(data, name=name)
    return BaseLM(cfg, params)


def init_adapters(cfg: ModelConfig) -> list[AdapterLayer]:
    """One adapter per feed-forward sublayer; w_up starts at zero."""
    rng = SeededRng(cfg.seed).spawn(1)
    return [
        AdapterLayer(
            w_down=Tensor(
                rng.normal(cfg.init_std, (cfg.d_model, cfg.adapter_rank)),
                requires_grad=True,
                name=f"adapters.{i}.w_down",
            ),
            w_up=Tensor.zeros(
                (cfg.adapter_rank, cfg.d_model),
                requires_grad=True,
                name=f"adapters.{i}.w_up",
            ),
            attachment=f"layers.{i}.ff",
        )
        for i in range(cfg.n_layers)
    ]


def init_lora(cfg: ModelConfig) -> list[LoRAPatch]:
    """Patches on every query and value projection; B starts at zero."""
    if cfg.lora_rank == 0:
        return []
    rng = SeededRng(cfg.seed).spawn(2)
    patches = []
    for i in range(cfg.n_layers):
        for proj in LORA_TARGETS:
            target = f"layers.{i}.attn.{proj}"
            patches.append(
                LoRAPatch(
                    target=target,
                    a=Tensor(
                        rng.normal(cfg.init_std, (cfg.d_model, cfg.lora_rank)),
                        requires_grad=True,
                        name=f"lora.{target}.a",
                    ),
                    b=Tensor.zeros(
                        (cfg.lora_rank, cfg.d_model),
                        requires_grad=True,
                        name=f"lora.{target}.b",
                    ),
                )
            )
    return patches


def adapter_forward(adapter: AdapterLayer, x: Tensor) -> Tensor:
    """x + relu(x @ w_down) @ w_up for a vector or a batch of rows."""
    width = adapter.w_down.shape[0]
    if x.shape[-1] != width or x.data.ndim > 2:
        raise ShapeError(
            f"adapter expects width {width}, got input of shape {x.shape}"
        )
    rows = reshape(x, (1, width)) if x.data.ndim == 1 else x
    out = add(rows, matmul(relu(matmul(rows, adapter.w_down)), adapter.w_up))
    return reshape(out, x.shape) if x.data.ndim == 1 else out


def _check_tokens(cfg: ModelConfig, tokens: Sequence[int]) -> None:
    if not tokens:
        raise ShapeError("cannot run the model on an empty sequence")
    if len(tokens) > cfg.ctx_len:
        raise ShapeError(
            f"sequence of {len(tokens)} tokens exceeds ctx_len {cfg.ctx_len}"
        )
    if min(tokens) < 0 or max(tokens) >= cfg.vocab_size:
        raise TargetIndexError(
            f"token outside vocabulary of size {cfg.vocab_size}"
        )


def _is_projection(name: str) -> bool:
    return name == "head.w" or name.endswith(PROJECTION_SUFFIXES)


def _check_patches(model: BaseLM, patches: Sequence[LoRAPatch]) -> dict:
    by_target = {}
    for patch in patches:
        if patch.target not in model.params or not _is_projection(patch.target):
            raise LoraError(f"unknown LoRA target {patch.target!r}")
        if patch.merged:
            raise LoraError(f"patch for {patch.target} is already merged")
        w = model.params[patch.target]
        if (
            patch.a.shape[0] != w.shape[0]
            or patch.b.shape[1] != w.shape[1]
            or patch.a.shape[1] != patch.b.shape[0]
        ):
            raise ShapeError(
                f"LoRA factors {patch.a.shape} x {patch.b.shape} do not fit "
                f"{patch.target} {w.shape}"
            )
        by_target[patch.target] = patch
    return by_target


def _project(h: Tensor, w: Tensor, patch: Optional[LoRAPatch]) -> Tensor:
    out = matmul(h, w)
    if patch is None or patch.rank == 0:
        return out
    return add(out, matmul(matmul(h, patch.a), patch.b))


def _forward(
    model: BaseLM,
    tokens: Sequence[int],
    adapters: Optional[Sequence[AdapterLayer]] = None,
    patches: Optional[Sequence[LoRAPatch]] = None,
    z: Optional[Tensor] = None,
) -> Tensor:
    cfg, p = model.config, model.params
    _check_tokens(cfg, tokens)
    if adapters is not None and len(adapters) != cfg.n_layers:
        raise ShapeError(
            f"{len(adapters)} adapters for {cfg.n_layers} attachment points"
        )
    lora = _check_patches(model, patches or [])
    n = len(tokens)
    x = add(
        take_rows(p["embed.tokens"], tokens),
        take_rows(p["embed.positions"], range(n)),
    )
    if z is not None:
        x = inject_readout(z, x)
    causal = np.tril(np.ones((n, n), dtype=bool))
    inv_sqrt = 1.0 / math.sqrt(cfg.head_width)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        h = layer_norm(
            x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"], cfg.ln_eps
        )
        q = _project(h, p[f"{pre}.attn.wq"], lora.get(f"{pre}.attn.wq"))
        k = _project(h, p[f"{pre}.attn.wk"], lora.get(f"{pre}.attn.wk"))
        v = _project(h, p[f"{pre}.attn.wv"], lora.get(f"{pre}.attn.wv"))
        heads = []
        for head in range(cfg.n_heads):
            lo, hi = head * cfg.head_width, (head + 1) * cfg.head_width
            scores = scale(
                matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))),
                inv_sqrt,
            )
            weights = softmax_lastdim(scores, mask=causal)
            heads.append(matmul(weights, slice_cols(v, lo, hi)))
        attended = _project(
            concat_cols(heads), p[f"{pre}.attn.wo"], lora.get(f"{pre}.attn.wo")
        )
        x = add(x, attended)
        h = layer_norm(
            x, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"], cfg.ln_eps
        )
        hidden = relu(_project(h, p[f"{pre}.ff.w1"], lora.get(f"{pre}.ff.w1")))
        ff = _project(hidden, p[f"{pre}.ff.w2"], lora.get(f"{pre}.ff.w2"))
        if adapters is not None:
            ff = adapter_forward(adapters[i], ff)
        x = add(x, ff)
    x = layer_norm(x, p["final_ln.gain"], p["final_ln.bias"], cfg.ln_eps)
    return _project(x, p["head.w"], lora.get("head.w"))


def forward_base(model: BaseLM, tokens: Sequence[int]) -> Tensor:
    """Causal logits of the base model, n x V."""
    return _forward(model, tokens)


def forward_adapted(
    model: BaseLM,
    adapters: Sequence[AdapterLayer],
    tokens: Sequence[int],
    z: Optional[Tensor] = None,
) -> Tensor:
    """Logits with every feed-forward output passed through its adapter."""
    return _forward(model, tokens, adapters=adapters, z=z)


def apply_lora(
    model: BaseLM,
    patches: Sequence[LoRAPatch],
    tokens: Sequence[int],
    adapters: Optional[Sequence[AdapterLayer]] = None,
    z: Optional[Tensor] = None,
) -> Tensor:
    """Logits with every targeted matrix behaving as W + A @ B."""
    return _forward(model, tokens, adapters=adapters, patches=patches, z=z)


def merge_lora(patch: LoRAPatch, w: Tensor) -> Tensor:
    """Return W + A @ B and mark the patch merged."""
    if patch.merged:
        raise LoraError(f"patch for {patch.target} is already merged")
    if patch.a.shape[0] != w.shape[0] or patch.b.shape[1] != w.shape[1]:
        raise ShapeError(
            f"LoRA factors {patch.a.shape} x {patch.b.shape} do not fit "
            f"{w.shape}"
        )
    merged = Tensor(w.data + patch.a.data @ patch.b.data, name=w.name)
    patch.merged = True
    return merged


def merge_into(model: BaseLM, patches: Sequence[LoRAPatch]) -> BaseLM:
    """Copy of the model with every patch folded into its target."""
    params = {
        name: Tensor(t.data, name=name) for name, t in model.params.items()
    }
    for patch in patches:
        if patch.target not in params:
            raise LoraError(f"unknown LoRA target {patch.target!r}")
        params[patch.target] = merge_lora(replace(patch), params[patch.target])
    return BaseLM(model.config, params)


def enumerate_parameters(
    model: BaseLM,
    adapters: Sequence[AdapterLayer] = (),
    patches: Sequence[LoRAPatch] = (),
) -> Iterator[tuple[str, str, Tensor]]:
    """Every physical buffer as (name, group, tensor) in fixed order."""
    for name, tensor in model.named_parameters():
        yield name, model.groups[name], tensor
    for i, adapter in enumerate(adapters):
        yield f"adapters.{i}.w_down", "adapters", adapter.w_down
        yield f"adapters.{i}.w_up", "adapters", adapter.w_up
    for patch in patches:
        yield f"lora.{patch.target}.a", "lora", patch.a
        yield f"lora.{patch.target}.b", "lora", patch.b


def count_params(cfg: ModelConfig, mode: Mode) -> ParamCountReport:
    """Closed-form parameter counts; full fine-tuning is the 100% baseline."""
    d, f, layers = cfg.d_model, cfg.ff_width, cfg.n_layers
    sizes = {
        "embeddings": (cfg.vocab_size + cfg.ctx_len) * d,
        "attention": layers * 4 * d * d,
        "feed_forward": layers * 2 * d * f,
        "layer_norm": layers * 4 * d + 2 * d,
        "output": d * cfg.vocab_size,
        "adapters": layers * 2 * d * cfg.adapter_rank,
        "lora": layers * len(LORA_TARGETS) * 2 * d * cfg.lora_rank,
    }
    trainable_groups = TRAINABLE_GROUPS[mode]
    total = sum(sizes[g] for g in BASE_GROUPS)
    trainable = sum(sizes[g] for g in trainable_groups)
    return ParamCountReport(
        mode=mode,
        total_params=total,
        trainable_params=trainable,
        relative_size_percent=100.0 * trainable / total,
        groups=[
            GroupCount(group=g, params=n, trainable=g in trainable_groups)
            for g, n in sizes.items()
        ],
    )


def generate(
    model: BaseLM,
    tokens: Sequence[int],
    max_new_tokens: int,
    eos_id: Optional[int] = None,
    adapters: Optional[Sequence[AdapterLayer]] = None,
    patches: Optional[Sequence[LoRAPatch]] = None,
    z: Optional[Tensor] = None,
    temperature: float = 0.0,
    rng: Optional[SeededRng] = None,
) -> list[int]:
    """Greedy (temperature 0) or temperature-sampled continuation."""
    if temperature > 0 and rng is None:
        raise ValueError("temperature sampling needs a SeededRng")
    sequence = list(tokens)
    produced: list[int] = []
    limit = model.config.ctx_len
    while len(produced) < max_new_tokens and len(sequence) < limit:
        logits = _forward(model, sequence, adapters, patches, z).data[-1]
        if temperature > 0:
            scaled = (logits - logits.max()) / temperature
            probs = np.exp(scaled) / np.exp(scaled).sum()
            token = rng.choice(probs)
        else:
            token = int(np.argmax(logits))
        produced.append(token)
        sequence.append(token)
        if token == eos_id:
            break
    return produced


def score_continuation(
    model: BaseLM,
    prefix: Sequence[int],
    continuation: Sequence[int],
    adapters: Optional[Sequence[AdapterLayer]] = None,
    patches: Optional[Sequence[LoRAPatch]] = None,
    z: Optional[Tensor] = None,
) -> float:
    """Summed log-probability of `continuation` after `prefix`."""
    sequence = list(prefix) + list(continuation)
    log_probs = log_softmax_lastdim(
        _forward(model, sequence[:-1], adapters, patches, z)
    ).data
    start = len(prefix) - 1
    return float(
        sum(log_probs[start + i, t] for i, t in enumerate(continuation))
    )


@dataclass
class IcftModel:
    """The frozen base model with every trainable ICFT component."""

    base: BaseLM
    adapters: list[AdapterLayer]
    patches: list[LoRAPatch]
    memory: DualMemory
    vocab: Vocabulary

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        """Trainable tensors by group, in checkpoint order."""
        groups: dict[str, dict[str, Tensor]] = {"adapters": {}, "lora": {}}
        for name, group, tensor in enumerate_parameters(
            self.base, self.adapters, self.patches
        ):
            if group in groups:
                groups[group][name] = tensor
        groups["memory"] = {
            "memory.w_stm": self.memory.readout.w_stm,
            "memory.w_ltm": self.memory.readout.w_ltm,
        }
        return groups

    def set_trainable(self, active: Sequence[str]) -> None:
        """Enable gradients for the named groups only."""
        for group, params in self.parameter_groups().items():
            for tensor in params.values():
                tensor.requires_grad = group in active
                tensor.grad = None

    def query_vector(self, prompt: str) -> np.ndarray:
        """Memory query for a prompt: its pooled embedding, rescaled."""
        return encode_query(
            self.base, self.vocab, prompt, self.memory.query_scale
        )

    def readout(self, prompt: str) -> Optional[Tensor]:
        """z for a prompt without recording an access, or None."""
        result = self.memory.query(self.query_vector(prompt))
        return None if result is None else result.z

    def logits(
        self,
        tokens: Sequence[int],
        use_lora: bool = True,
        z: Optional[Tensor] = None,
    ) -> Tensor:
        """Forward pass through adapters, optional LoRA and readout."""
        return _forward(
            self.base,
            tokens,
            adapters=self.adapters,
            patches=self.patches if use_lora else None,
            z=z,
        )

    def respond(
        self,
        prompt: str,
        use_memory: bool = True,
        max_new_tokens: Optional[int] = None,
        **kw,
    ) -> str:
        """Greedy (or sampled, given temperature and rng) response text."""
        prefix = self.vocab.prompt_ids(prompt)
        z = self.readout(prompt) if use_memory else None
        produced = generate(
            self.base,
            prefix,
            max_new_tokens=max_new_tokens or self.base.config.ctx_len,
            eos_id=self.vocab.eos_id,
            adapters=self.adapters,
            patches=self.patches,
            z=z,
            **kw,
        )
        return self.vocab.decode(produced)

    def classify(
        self,
        prompt: str,
        candidates: Sequence[str],
        use_memory: bool = True,
    ) -> str:
        """The candidate label the model finds most likely after a prompt."""
        prefix = self.vocab.prompt_ids(prompt)
        z = self.readout(prompt) if use_memory else None
        scores = [
            score_continuation(
                self.base,
                prefix,
                self.vocab.encode(label),
                self.adapters,
                self.patches,
                z,
            )
            for label in candidates
        ]
        return candidates[int(np.argmax(scores))]

    def clone(self) -> "IcftModel":
        """Deep copy, used to branch runs from a shared starting point."""
        return copy.deepcopy(self)


def build_icft_model(
    cfg: ModelConfig,
    vocab: Vocabulary,
    memory: DualMemory,
    base: Optional[BaseLM] = None,
) -> IcftModel:
    """Assemble a model with fresh identity-initialized augmentations."""
    if cfg.vocab_size != len(vocab):
        raise ShapeError(
            f"config vocab_size {cfg.vocab_size} != vocabulary {len(vocab)}"
        )
    return IcftModel(
        base=base or init_model(cfg),
        adapters=init_adapters(cfg),
        patches=init_lora(cfg),
        memory=memory,
        vocab=vocab,
    )
