################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Binary checkpoints. Layout, all integers little-endian:

    b"ICFTCKPT"                  magic
    u32                          format version
    u32 + bytes                  JSON block (configs, vocabulary, memory
                                 metadata, optimizer, cursor and the
                                 shuffle generator of the current epoch)
    u32                          buffer count
    per buffer: u16 + name, u8 ndim, u32 * ndim dims, float64 data
    u32                          CRC-32 of everything above

(c) 2025 Stanley Solutions
"""
################################################################################

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from loguru import logger

from icft.corpus import Vocabulary
from icft.errors import CheckpointError
from icft.memory import DualMemory, MemoryConfig, MemoryItem
from icft.model import IcftModel, ModelConfig, build_icft_model
from icft.tensor import SeededRng
from icft.training import (
    AblationFlags,
    OptimizerState,
    TrainingState,
    TrainPlan,
)

MAGIC = b"ICFTCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """A model with the run that produced it."""

    model: IcftModel
    plan: TrainPlan
    ablations: AblationFlags
    state: TrainingState
    version: int = FORMAT_VERSION


def _item_meta(item: MemoryItem) -> dict:
    return {
        "id": item.id,
        "text": item.text,
        "access_count": item.access_count,
        "insert_time": item.insert_time,
    }


def _buffers(checkpoint: Checkpoint) -> Iterator[tuple[str, np.ndarray]]:
    model = checkpoint.model
    for name, tensor in model.base.named_parameters():
        yield name, tensor.data
    for group in model.parameter_groups().values():
        for name, tensor in group.items():
            yield name, tensor.data
    for store, items in (
        ("stm", model.memory.stm.items),
        ("ltm", model.memory.ltm.residents()),
    ):
        for i, item in enumerate(items):
            yield f"memory.{store}.{i}.key", item.key
            yield f"memory.{store}.{i}.value", item.value
    for name, (m, v) in sorted(checkpoint.state.optimizer.moments.items()):
        yield f"adam.m.{name}", m
        yield f"adam.v.{name}", v


def _header(checkpoint: Checkpoint, buffer_count: int) -> dict:
    model, state = checkpoint.model, checkpoint.state
    memory, optimizer = model.memory, state.optimizer
    return {
        "model": model.base.config.model_dump(),
        "vocabulary": model.vocab.tokens,
        "plan": checkpoint.plan.model_dump(mode="json"),
        "ablations": checkpoint.ablations.model_dump(),
        "memory": {
            "config": {
                "stm_capacity": memory.stm.capacity,
                "promote_threshold": memory.ltm.threshold,
                "ltm_capacity": memory.ltm.capacity,
                "query_scale": memory.query_scale,
            },
            "stm": [_item_meta(item) for item in memory.stm.items],
            "ltm": [_item_meta(item) for item in memory.ltm.residents()],
            "stm_clock": memory.stm.clock,
            "ltm_clock": memory.ltm.clock,
            "access_log": memory.access_log,
        },
        "optimizer": {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step_count": optimizer.step_count,
            "steps": optimizer.steps,
        },
        "cursor": {
            "global_step": state.global_step,
            "stage": state.stage,
            "epoch": state.epoch,
        },
        "rng": {
            "algorithm": SeededRng.algorithm,
            "seed": checkpoint.plan.seed,
            "stream": state.rng,
        },
        "buffer_count": buffer_count,
    }


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize a checkpoint to bytes."""
    buffers = list(_buffers(checkpoint))
    header = json.dumps(
        _header(checkpoint, len(buffers)), sort_keys=True
    ).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", checkpoint.version),
        struct.pack("<I", len(header)),
        header,
        struct.pack("<I", len(buffers)),
    ]
    for name, data in buffers:
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    blob = encode_checkpoint(checkpoint)
    scratch = path.with_name(path.name + ".tmp")
    with open(scratch, "wb") as handle:
        handle.write(blob)
    os.replace(scratch, path)
    logger.info(
        f"Saved checkpoint at step {checkpoint.state.global_step} to {path}"
    )


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.payload):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_buffers(reader: _Reader, count: int) -> dict[str, np.ndarray]:
    buffers = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8")
        buffers[name] = data.reshape(shape).astype(np.float64)
    return buffers


def _restore_items(meta: list[dict], store: str, buffers) -> list[MemoryItem]:
    return [
        MemoryItem(
            id=entry["id"],
            text=entry["text"],
            key=buffers.pop(f"memory.{store}.{i}.key"),
            value=buffers.pop(f"memory.{store}.{i}.value"),
            access_count=entry["access_count"],
            insert_time=entry["insert_time"],
        )
        for i, entry in enumerate(meta)
    ]


def decode_checkpoint(blob: bytes) -> Checkpoint:
    """Parse and verify checkpoint bytes."""
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CheckpointError("not an ICFT checkpoint")
    payload, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(payload):
        raise CheckpointError("checkpoint integrity check failed (CRC-32)")
    reader = _Reader(payload)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {version}, expected {FORMAT_VERSION}"
        )
    (header_len,) = reader.unpack("<I")
    header = json.loads(reader.take(header_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    if count != header["buffer_count"]:
        raise CheckpointError(
            f"{count} buffers stored, header declares {header['buffer_count']}"
        )
    buffers = _read_buffers(reader, count)
    if reader.offset != len(payload):
        raise CheckpointError("trailing bytes after the last buffer")

    try:
        cfg = ModelConfig(**header["model"])
        memory_meta = header["memory"]
        memory = DualMemory.create(
            MemoryConfig(**memory_meta["config"]), cfg.d_model
        )
        model = build_icft_model(cfg, Vocabulary(header["vocabulary"]), memory)
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from exc

    expected = [name for name, _ in model.base.named_parameters()]
    for group in model.parameter_groups().values():
        expected.extend(group)
    missing = [name for name in expected if name not in buffers]
    if missing:
        raise CheckpointError(
            f"checkpoint lacks {len(missing)} parameter buffers for its "
            f"config, first {missing[0]}"
        )
    targets = dict(model.base.named_parameters())
    for group in model.parameter_groups().values():
        targets.update(group)
    for name, tensor in targets.items():
        data = buffers.pop(name)
        if data.shape != tensor.shape:
            raise CheckpointError(
                f"buffer {name} has shape {data.shape}, config says "
                f"{tensor.shape}"
            )
        tensor.data = data

    try:
        memory.stm.items = _restore_items(memory_meta["stm"], "stm", buffers)
        memory.ltm.items = {
            item.id: item
            for item in _restore_items(memory_meta["ltm"], "ltm", buffers)
        }
    except KeyError as exc:
        raise CheckpointError(f"missing memory buffer {exc}") from exc
    memory.stm.clock = memory_meta["stm_clock"]
    memory.ltm.clock = memory_meta["ltm_clock"]
    memory.access_log = [
        (str(item_id), int(time))
        for item_id, time in memory_meta["access_log"]
    ]

    opt = header["optimizer"]
    optimizer = OptimizerState(
        lr=opt["lr"],
        beta1=opt["beta1"],
        beta2=opt["beta2"],
        eps=opt["eps"],
        step_count=opt["step_count"],
        steps=dict(opt["steps"]),
    )
    for name in sorted(optimizer.steps):
        try:
            optimizer.moments[name] = (
                buffers.pop(f"adam.m.{name}"),
                buffers.pop(f"adam.v.{name}"),
            )
        except KeyError as exc:
            raise CheckpointError(f"missing optimizer buffer {exc}") from exc
    if buffers:
        raise CheckpointError(
            f"{len(buffers)} unexpected buffers, first {next(iter(buffers))}"
        )
    cursor, rng = header["cursor"], header["rng"]
    if rng["algorithm"] != SeededRng.algorithm:
        raise CheckpointError(f"unsupported generator {rng['algorithm']!r}")
    return Checkpoint(
        model=model,
        plan=TrainPlan(**header["plan"]),
        ablations=AblationFlags(**header["ablations"]),
        state=TrainingState(
            optimizer=optimizer,
            global_step=cursor["global_step"],
            stage=cursor["stage"],
            epoch=cursor["epoch"],
            rng=rng.get("stream"),
        ),
        version=version,
    )


def load_checkpoint(path: Path) -> Checkpoint:
    """Read and verify a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    checkpoint = decode_checkpoint(path.read_bytes())
    logger.info(
        f"Loaded checkpoint at step {checkpoint.state.global_step} from {path}"
    )
    return checkpoint
