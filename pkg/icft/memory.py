################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Dual-stage memory: a capacity-K FIFO short-term store, a long-term store
fed by frequency-thresholded promotion, attention retrieval over both, and
the fused readout z that conditions the model.

Readout: per store m = sum_i a_i * value_i with a = softmax(q . key_i),
then z = m_stm W_STM + m_ltm W_LTM (row-vector convention). An empty store
contributes a zero readout.

(c) 2025 Stanley Solutions
"""
################################################################################

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from icft.errors import MemoryEmptyError, MemoryLookupError, ShapeError
from icft.tensor import (
    Tensor,
    add,
    add_row,
    matmul,
    reshape,
    softmax_lastdim,
)

if TYPE_CHECKING:
    from icft.corpus import Vocabulary
    from icft.model import BaseLM


class MemoryConfig(BaseModel):
    """Store sizes, the promotion threshold and the query sharpness."""

    model_config = ConfigDict(extra="forbid")

    stm_capacity: int = Field(default=8, ge=1)
    promote_threshold: int = Field(default=2, ge=1)
    ltm_capacity: int = Field(default=64, ge=1)
    query_scale: float = Field(default=64.0, gt=0)


@dataclass
class MemoryItem:
    """One embedded dialogue round."""

    id: str
    text: str
    key: np.ndarray
    value: np.ndarray
    access_count: int = 0
    insert_time: int = -1


@dataclass
class ShortTermMemory:
    """FIFO store of the K most recent rounds, ordered by insert time."""

    capacity: int
    width: int
    items: list[MemoryItem] = field(default_factory=list)
    clock: int = 0


@dataclass
class LongTermMemory:
    """Promoted items keyed by id, in promotion order."""

    threshold: int
    capacity: int
    width: int
    items: dict[str, MemoryItem] = field(default_factory=dict)
    clock: int = 0

    def residents(self) -> list[MemoryItem]:
        """Items ordered by promotion time."""
        return sorted(self.items.values(), key=lambda item: item.insert_time)


Store = Union[ShortTermMemory, LongTermMemory]


def _residents(store: Store) -> list[MemoryItem]:
    if isinstance(store, LongTermMemory):
        return store.residents()
    return list(store.items)


@dataclass
class MemoryReadout:
    """Trainable projections plus the outcome of the latest retrieval."""

    w_stm: Tensor
    w_ltm: Tensor
    a_stm: Optional[np.ndarray] = None
    a_ltm: Optional[np.ndarray] = None
    m_stm: Optional[np.ndarray] = None
    m_ltm: Optional[np.ndarray] = None
    z: Optional[Tensor] = None
    stm_ids: tuple[str, ...] = ()
    stm_times: tuple[int, ...] = ()
    ltm_ids: tuple[str, ...] = ()

    @classmethod
    def identity(cls, width: int) -> "MemoryReadout":
        """Projections start as identity so memory is a pass-through."""
        return cls(
            w_stm=Tensor(
                np.eye(width), requires_grad=True, name="memory.w_stm"
            ),
            w_ltm=Tensor(
                np.eye(width), requires_grad=True, name="memory.w_ltm"
            ),
        )


def encode_item(
    model: "BaseLM",
    vocab: "Vocabulary",
    text: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the frozen token embeddings; used as both key and value."""
    ids = vocab.encode(text)
    pooled = model.params["embed.tokens"].data[ids].mean(axis=0)
    return pooled.copy(), pooled.copy()


def encode_query(
    model: "BaseLM",
    vocab: "Vocabulary",
    text: str,
    scale: float,
) -> np.ndarray:
    """Pooled prompt embedding rescaled to scale / |pooled|^2.

    A key k then scores `scale` times its projection coefficient onto the
    pooled prompt, which does not depend on the embedding norms.
    """
    pooled, _ = encode_item(model, vocab, text)
    energy = float(pooled @ pooled)
    if energy == 0.0:
        return pooled
    return pooled * (scale / energy)


def make_item(model, vocab, item_id: str, text: str) -> MemoryItem:
    """Embed a dialogue round as a fresh memory item."""
    key, value = encode_item(model, vocab, text)
    return MemoryItem(id=item_id, text=text, key=key, value=value)


def stm_insert(stm: ShortTermMemory, item: MemoryItem) -> Optional[MemoryItem]:
    """Append with the next clock value; evict and return the oldest on
    overflow."""
    if item.key.shape != (stm.width,) or item.value.shape != (stm.width,):
        raise ShapeError(
            f"memory item width {item.key.shape} does not match {stm.width}"
        )
    item.insert_time = stm.clock
    stm.clock += 1
    stm.items.append(item)
    if len(stm.items) > stm.capacity:
        return stm.items.pop(0)
    return None


def _admit(ltm: LongTermMemory, item: MemoryItem) -> bool:
    """LFU admission; the newcomer competes with residents."""
    if item.id in ltm.items:
        ltm.items[item.id].access_count = item.access_count
        return False
    candidate = replace(
        item, key=item.key.copy(), value=item.value.copy(),
        insert_time=ltm.clock,
    )
    ltm.clock += 1
    if len(ltm.items) < ltm.capacity:
        ltm.items[candidate.id] = candidate
        return True
    pool = ltm.residents() + [candidate]
    victim = min(pool, key=lambda i: (i.access_count, i.insert_time))
    if victim is candidate:
        logger.debug(f"LTM rejected {candidate.id} (count {item.access_count})")
        return False
    del ltm.items[victim.id]
    ltm.items[candidate.id] = candidate
    logger.debug(f"LTM evicted {victim.id} for {candidate.id}")
    return True


def record_access_and_promote(
    stm: ShortTermMemory,
    ltm: LongTermMemory,
    result: MemoryReadout,
) -> list[MemoryItem]:
    """Count a hit on the STM argmax item and promote it once it reaches
    the threshold. Returns the items newly admitted to LTM."""
    if result.a_stm is None or not result.stm_ids:
        return []
    winner_time = result.stm_times[int(np.argmax(result.a_stm))]
    winner = next((i for i in stm.items if i.insert_time == winner_time), None)
    if winner is None:
        return []
    winner.access_count += 1
    if winner.access_count >= ltm.threshold and _admit(ltm, winner):
        return [ltm.items[winner.id]]
    return []


def _attend(items: Sequence[MemoryItem], query: np.ndarray):
    keys = np.stack([item.key for item in items])
    weights = softmax_lastdim(Tensor(keys @ query)).data
    values = np.stack([item.value for item in items])
    return weights, weights @ values


def retrieve(
    stm: ShortTermMemory,
    ltm: LongTermMemory,
    readout: MemoryReadout,
    q: Union[Tensor, np.ndarray],
) -> MemoryReadout:
    """Attend over both stores and fuse the readouts into z.

    Pure: access counts are only changed by `record_access_and_promote`.
    """
    query = np.asarray(q.data if isinstance(q, Tensor) else q).reshape(-1)
    width = readout.w_stm.shape[0]
    if query.shape != (width,):
        raise ShapeError(f"query width {query.shape} does not match {width}")
    stm_items, ltm_items = list(stm.items), ltm.residents()
    if not stm_items and not ltm_items:
        raise MemoryEmptyError("both memory stores are empty")

    a_stm = a_ltm = None
    m_stm, m_ltm = np.zeros(width), np.zeros(width)
    if stm_items:
        a_stm, m_stm = _attend(stm_items, query)
    if ltm_items:
        a_ltm, m_ltm = _attend(ltm_items, query)
    z = add(
        matmul(Tensor(m_stm.reshape(1, -1)), readout.w_stm),
        matmul(Tensor(m_ltm.reshape(1, -1)), readout.w_ltm),
    )
    return replace(
        readout,
        a_stm=a_stm,
        a_ltm=a_ltm,
        m_stm=m_stm,
        m_ltm=m_ltm,
        z=reshape(z, (width,)),
        stm_ids=tuple(item.id for item in stm_items),
        stm_times=tuple(item.insert_time for item in stm_items),
        ltm_ids=tuple(item.id for item in ltm_items),
    )


def inject_readout(z: Tensor, embeddings: Tensor) -> Tensor:
    """Add z to every token embedding row before the first layer."""
    if embeddings.data.ndim != 2 or z.size != embeddings.shape[1]:
        raise ShapeError(
            f"readout width {z.shape} does not match embeddings "
            f"{embeddings.shape}"
        )
    return add_row(embeddings, z)


def retrieval_accuracy(
    store: Store,
    queries: Sequence[tuple[np.ndarray, str]],
) -> float:
    """Fraction of (query, expected id) pairs whose argmax-attention item
    is the expected one; ties go to the lowest insert time."""
    items = _residents(store)
    ids = [item.id for item in items]
    if not queries:
        raise ValueError("retrieval accuracy needs at least one query")
    if not items:
        raise MemoryEmptyError("cannot score an empty store")
    keys = np.stack([item.key for item in items])
    hits = 0
    for query, expected in queries:
        if expected not in ids:
            raise MemoryLookupError(f"expected item {expected!r} not in store")
        scores = keys @ np.asarray(query).reshape(-1)
        hits += ids[int(np.argmax(scores))] == expected
    return hits / len(queries)


@dataclass
class DualMemory:
    """Both stores, the trainable projections and the access log."""

    stm: ShortTermMemory
    ltm: LongTermMemory
    readout: MemoryReadout
    # (id, insert_time) of every STM argmax, in retrieval order
    access_log: list[tuple[str, int]] = field(default_factory=list)
    query_scale: float = 64.0

    @classmethod
    def create(cls, config: MemoryConfig, width: int) -> "DualMemory":
        """Empty stores with identity projections."""
        return cls(
            stm=ShortTermMemory(capacity=config.stm_capacity, width=width),
            ltm=LongTermMemory(
                threshold=config.promote_threshold,
                capacity=config.ltm_capacity,
                width=width,
            ),
            readout=MemoryReadout.identity(width),
            query_scale=config.query_scale,
        )

    @property
    def is_empty(self) -> bool:
        """True when neither store holds an item."""
        return not self.stm.items and not self.ltm.items

    def query(self, q) -> Optional[MemoryReadout]:
        """Retrieve, or None when both stores are empty."""
        if self.is_empty:
            return None
        return retrieve(self.stm, self.ltm, self.readout, q)

    def observe(self, result: MemoryReadout) -> list[MemoryItem]:
        """Record an access for a completed retrieval."""
        if result.a_stm is not None and result.stm_ids:
            winner = int(np.argmax(result.a_stm))
            self.access_log.append(
                (result.stm_ids[winner], result.stm_times[winner])
            )
        return record_access_and_promote(self.stm, self.ltm, result)

    def remember(self, item: MemoryItem) -> Optional[MemoryItem]:
        """Insert a new round into short-term memory."""
        return stm_insert(self.stm, item)
