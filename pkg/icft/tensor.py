################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Dense 64-bit tensors with a reverse-mode differentiation tape.

Operations record themselves on the thread's active `Tape` whenever one of
their inputs requires a gradient. Outside a tape nothing is recorded, so
inference never grows a graph.

(c) 2025 Stanley Solutions
"""
################################################################################

import itertools
import threading
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel

from icft.errors import IcftError, ShapeError, TargetIndexError

_node_ids = itertools.count()
_local = threading.local()

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Shape-carrying float64 array participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "is_leaf", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the shape of the underlying data."""
        return self.data.shape

    @property
    def size(self) -> int:
        """Return the number of stored values."""
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ShapeError(f"item() needs one element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the data."""
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return (
            f"Tensor{label}(shape={self.shape}, "
            f"requires_grad={self.requires_grad})"
        )

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False, name=None) -> "Tensor":
        """Create a zero-filled tensor."""
        return cls(np.zeros(shape), requires_grad=requires_grad, name=name)


class TapeEntry(NamedTuple):
    """One recorded operation."""

    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Tape:
    """Ordered record of executed operations.

    Used as a context manager; entering makes it the active tape of the
    current thread. Entries are appended in execution order, so the list
    is already topologically sorted.
    """

    def __init__(self, track_kinks: bool = False):
        self.entries: list[TapeEntry] = []
        self.kink_inputs: Optional[list[np.ndarray]] = (
            [] if track_kinks else None
        )

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *_exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(
        self,
        output: Tensor,
        inputs: tuple[Tensor, ...],
        rule: BackwardRule,
    ) -> None:
        """Append an operation to the tape."""
        self.entries.append(TapeEntry(inputs, output, rule))

    def backward(self, loss: Tensor) -> None:
        """Populate `grad` on every leaf reachable from a scalar loss.

        Gradients accumulate into existing buffers; call `zero_grad` to
        reset them between steps.
        """
        if loss.data.size != 1:
            raise ShapeError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        if not loss.requires_grad:
            raise IcftError("loss does not depend on any trainable tensor")
        seed = np.ones_like(loss.data)
        if loss.is_leaf:
            _accumulate(loss, seed)
            return
        if not any(entry.output is loss for entry in self.entries):
            raise IcftError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): seed}
        for entry in reversed(self.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            for source, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not source.requires_grad:
                    continue
                if source.is_leaf:
                    _accumulate(source, grad)
                elif id(source) in pending:
                    pending[id(source)] = pending[id(source)] + grad
                else:
                    pending[id(source)] = grad


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    """Return the innermost tape of this thread, if any."""
    tapes = _stack()
    return tapes[-1] if tapes else None


def reset_tapes() -> None:
    """Drop every tape registered on this thread."""
    _local.tapes = []


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, inputs, rule)
    return out


def backward(loss: Tensor) -> None:
    """Run the backward pass of the active tape."""
    tape = active_tape()
    if tape is None:
        raise IcftError("backward called outside a Tape context")
    tape.backward(loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    """Clear accumulated gradients."""
    for param in params:
        param.grad = None


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# Elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of equally shaped tensors."""
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    _same_shape("mul", a, b)
    return _result(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data)
    )


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a width-d vector to every row of an n-by-d matrix."""
    if x.data.ndim != 2 or row.size != x.shape[1]:
        raise ShapeError(
            f"add_row: cannot broadcast {row.shape} over rows of {x.shape}"
        )
    flat = row.data.reshape(-1)
    return _result(
        x.data + flat,
        (x, row),
        lambda g: (g, g.sum(axis=0).reshape(row.shape)),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reinterpret the row-major data with a new shape."""
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _result(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),)
    )


def transpose(x: Tensor) -> Tensor:
    """Transpose a matrix."""
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries."""
    return _result(
        np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),)
    )


def mean(x: Tensor) -> Tensor:
    """Mean of all entries."""
    count = x.size
    return _result(
        np.array(x.data.mean()),
        (x,),
        lambda g: (np.full(x.shape, float(g) / count),),
    )


def take_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a matrix, e.g. an embedding lookup."""
    index = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise TargetIndexError(
            f"row index out of range for table with {table.shape[0]} rows"
        )

    def rule(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(table.data[index], (table,), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Take columns [start, stop) of a matrix."""
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: bad range {start}:{stop} for {x.shape}")

    def rule(g):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return _result(x.data[:, start:stop].copy(), (x,), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices side by side."""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(
            f"concat_cols: incompatible shapes {[p.shape for p in parts]}"
        )
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g):
        return tuple(
            g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))
        )

    return _result(
        np.concatenate([p.data for p in parts], axis=1), tuple(parts), rule
    )


# Linear algebra and activations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m-by-k and a k-by-n matrix."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    tape = active_tape()
    if tape is not None and tape.kink_inputs is not None:
        tape.kink_inputs.append(x.data.copy())
    active = x.data > 0
    return _result(
        np.where(active, x.data, 0.0), (x,), lambda g: (g * active,)
    )


def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction.

    Entries where `mask` is False get probability exactly zero; every row
    must keep at least one entry.
    """
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a nonempty last axis, got {x.shape}")
    allowed = (
        np.ones(x.shape, dtype=bool)
        if mask is None
        else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    )
    if not allowed.any(axis=-1).all():
        raise ShapeError("softmax mask removes every entry of a row")
    peak = np.max(np.where(allowed, x.data, -np.inf), axis=-1, keepdims=True)
    shifted = np.where(allowed, x.data - peak, 0.0)
    weights = np.where(allowed, np.exp(shifted), 0.0)
    probs = weights / weights.sum(axis=-1, keepdims=True)

    def rule(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return _result(probs, (x,), rule)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    """Log-probabilities along the last axis."""
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a nonempty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - logz
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), rule)


def layer_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each row to zero mean and unit variance, then scale."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} "
            f"do not match width {width}"
        )
    rows = x.data.reshape(-1, width)
    centered = rows - rows.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def rule(g):
        g = g.reshape(-1, width)
        d_normed = g * gain.data
        d_rows = inv_std * (
            d_normed
            - d_normed.mean(axis=1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=1, keepdims=True)
        )
        return (
            d_rows.reshape(x.shape),
            (g * normed).sum(axis=0),
            g.sum(axis=0),
        )

    return _result(out.reshape(x.shape), (x, gain, bias), rule)


# Losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over samples (rows) of the squared Euclidean distance."""
    _same_shape("mse", a, b)
    samples = a.shape[0] if a.data.ndim >= 2 else 1
    diff = a.data - b.data

    def rule(g):
        grad = 2.0 * float(g) * diff / samples
        return (grad, -grad)

    return _result(np.array((diff**2).sum() / samples), (a, b), rule)


def cross_entropy(
    logits: Tensor,
    targets: Sequence[int],
    ignore_index: Optional[int] = None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log softmax probability of the targets.

    Positions whose target equals `ignore_index` are masked. With every
    position masked the loss is defined as 0.
    """
    if logits.data.ndim != 2 or logits.shape[0] != len(targets):
        raise ShapeError(
            f"cross_entropy: {len(targets)} targets for logits {logits.shape}"
        )
    vocab = logits.shape[1]
    target = np.asarray(targets, dtype=np.int64)
    keep = (
        np.ones(len(target), dtype=bool)
        if ignore_index is None
        else target != ignore_index
    )
    if keep.any() and (
        target[keep].min() < 0 or target[keep].max() >= vocab
    ):
        raise TargetIndexError(f"target index outside vocabulary of {vocab}")
    count = int(keep.sum())
    if count == 0:
        logger.warning("cross_entropy: every position is masked, loss is 0")
        return _result(
            np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),)
        )
    rows = np.nonzero(keep)[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = log_probs[rows, target[rows]]
    divisor = count if reduction == "mean" else 1

    def rule(g):
        grad = np.zeros(logits.shape)
        grad[rows] = np.exp(log_probs[rows])
        grad[rows, target[rows]] -= 1.0
        return (grad * (float(g) / divisor),)

    return _result(np.array(-picked.sum() / divisor), (logits,), rule)


def frobenius_sq(m: Tensor) -> Tensor:
    """Sum of squared entries."""
    return _result(
        np.array((m.data**2).sum()),
        (m,),
        lambda g: (2.0 * float(g) * m.data,),
    )


# Randomness


class SeededRng:
    """Portable seeded generator built on numpy's counter-based Philox."""

    algorithm = "philox"

    def __init__(self, seed: int):
        self.seed = int(seed) % 2**64
        self._bits = np.random.Philox(key=self.seed)
        self._gen = np.random.Generator(self._bits)

    def spawn(self, *keys: int) -> "SeededRng":
        """Derive an independent stream from this seed and some keys."""
        sequence = np.random.SeedSequence([self.seed, *map(int, keys)])
        return SeededRng(int(sequence.generate_state(1, np.uint64)[0]))

    def normal(self, std: float, shape: Sequence[int]) -> np.ndarray:
        """Draw Gaussian(0, std) values."""
        return self._gen.normal(0.0, std, size=tuple(shape))

    def permutation(self, count: int) -> np.ndarray:
        """Return a random ordering of range(count)."""
        return self._gen.permutation(count)

    def choice(self, probs: np.ndarray) -> int:
        """Sample an index from a probability vector."""
        return int(self._gen.choice(len(probs), p=probs))

    def state(self) -> dict:
        """Return a JSON-friendly snapshot of the stream position."""
        raw = self._bits.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in raw["state"]["counter"]],
            "key": [int(v) for v in raw["state"]["key"]],
            "buffer": [int(v) for v in raw["buffer"]],
            "buffer_pos": int(raw["buffer_pos"]),
            "has_uint32": int(raw["has_uint32"]),
            "uinteger": int(raw["uinteger"]),
        }

    @classmethod
    def from_state(cls, snapshot: dict) -> "SeededRng":
        """Rebuild a generator at a recorded stream position."""
        rng = cls(snapshot["seed"])
        rng._bits.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(snapshot["counter"], dtype=np.uint64),
                "key": np.array(snapshot["key"], dtype=np.uint64),
            },
            "buffer": np.array(snapshot["buffer"], dtype=np.uint64),
            "buffer_pos": snapshot["buffer_pos"],
            "has_uint32": snapshot["has_uint32"],
            "uinteger": snapshot["uinteger"],
        }
        return rng


# Finite-difference verification


class GradCheckReport(BaseModel):
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_error: float
    worst_index: Optional[tuple[int, ...]] = None
    checked: int
    skipped: list[tuple[int, ...]]
    tolerance: float
    passed: bool


def _evaluate(f: Callable[[Tensor], Tensor], x: Tensor):
    with Tape(track_kinks=True) as tape:
        value = f(x)
    return value.item(), tape.kink_inputs


def _near_kink(base, plus, minus, h: float) -> bool:
    if len(base) != len(plus) or len(base) != len(minus):
        return True
    for b, p, m in zip(base, plus, minus):
        if b.shape != p.shape or b.shape != m.shape:
            return True
        flipped = ((p > 0) != (b > 0)) | ((m > 0) != (b > 0))
        moved = (p != b) | (m != b)
        if flipped.any() or (moved & (np.abs(b) < 10 * h)).any():
            return True
    return False


def check_gradients(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare backward() against central differences for every entry of x.

    Coordinates whose perturbation moves a ReLU preactivation lying within
    10h of zero, or flips any ReLU, are skipped and listed in the report.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    try:
        with Tape(track_kinks=True) as tape:
            value = f(x)
            if value.data.size != 1:
                raise ShapeError("check_gradients needs a scalar function")
            if value.requires_grad:
                tape.backward(value)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
        base_inputs = tape.kink_inputs

        worst, worst_index, skipped = 0.0, None, []
        for index in np.ndindex(*x.shape):
            original = x.data[index]
            x.data[index] = original + h
            f_plus, plus_inputs = _evaluate(f, x)
            x.data[index] = original - h
            f_minus, minus_inputs = _evaluate(f, x)
            x.data[index] = original
            if _near_kink(base_inputs, plus_inputs, minus_inputs, h):
                skipped.append(tuple(int(i) for i in index))
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            gap = abs(analytic[index] - numeric)
            if gap <= atol:
                continue
            error = gap / max(abs(analytic[index]), abs(numeric))
            if error > worst:
                worst, worst_index = error, tuple(int(i) for i in index)
    finally:
        x.grad, x.requires_grad = saved_grad, saved_flag

    if skipped:
        logger.debug(f"gradient check skipped {len(skipped)} kink coordinates")
    return GradCheckReport(
        max_rel_error=worst,
        worst_index=worst_index,
        checked=x.size - len(skipped),
        skipped=skipped,
        tolerance=tol,
        passed=worst <= tol,
    )
