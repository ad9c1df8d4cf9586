import struct

import numpy as np
import pytest

from icft.checkpoint import (
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from icft.errors import CheckpointError
from icft.training import (
    AblationFlags,
    CurriculumStage,
    TrainingState,
    TrainPlan,
    run_icft,
    stream_rng,
)


def _plan():
    return TrainPlan(
        stages=[
            CurriculumStage(
                index=1, groups=("adapters",),
                terms=("consistency", "task"), epochs=1, lr=1e-2,
            ),
            CurriculumStage(
                index=2, groups=("memory", "adapters"), terms=("task",),
                epochs=1, lr=1e-2,
            ),
            CurriculumStage(
                index=3, groups=("lora", "memory"), terms=("finetune",),
                epochs=1, lr=1e-2,
            ),
        ],
        batch_size=3,
        base_epochs=0,
    )


def _trained(model, corpus, max_steps=None):
    plan = _plan()
    result = run_icft(plan, model, corpus, max_steps=max_steps)
    return Checkpoint(
        model=result.model,
        plan=plan,
        ablations=AblationFlags(),
        state=result.state,
    )


def _all_buffers(model):
    named = dict(model.base.named_parameters())
    for group in model.parameter_groups().values():
        named.update(group)
    return {name: tensor.data for name, tensor in named.items()}


def test_fresh_checkpoint_round_trips(mini_model):
    mini_model.memory.query_scale = 12.5
    checkpoint = Checkpoint(
        model=mini_model,
        plan=_plan(),
        ablations=AblationFlags(no_lora=True),
        state=TrainingState.fresh(_plan()),
    )
    restored = decode_checkpoint(encode_checkpoint(checkpoint))
    assert restored.ablations.no_lora
    assert restored.plan == checkpoint.plan
    assert restored.model.vocab == mini_model.vocab
    assert restored.model.memory.is_empty
    assert restored.model.memory.query_scale == 12.5
    assert restored.model.base.frozen


def test_trained_checkpoint_restores_every_buffer(
    tmp_path, mini_model, mini_corpus
):
    checkpoint = _trained(mini_model, mini_corpus)
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, checkpoint)
    assert not (tmp_path / "checkpoint.bin.tmp").exists()
    restored = load_checkpoint(path)

    before, after = _all_buffers(mini_model), _all_buffers(restored.model)
    assert before.keys() == after.keys()
    for name in before:
        np.testing.assert_array_equal(before[name], after[name])

    memory, copy = mini_model.memory, restored.model.memory
    assert [i.id for i in copy.stm.items] == [i.id for i in memory.stm.items]
    assert [
        (i.id, i.access_count, i.insert_time) for i in copy.ltm.residents()
    ] == [
        (i.id, i.access_count, i.insert_time) for i in memory.ltm.residents()
    ]
    assert copy.access_log == memory.access_log
    assert (copy.stm.clock, copy.ltm.clock) == (
        memory.stm.clock, memory.ltm.clock,
    )
    assert restored.state.global_step == checkpoint.state.global_step
    assert restored.state.optimizer.steps == checkpoint.state.optimizer.steps


def test_resume_from_checkpoint_matches_straight_run(
    tmp_path, mini_model, mini_corpus
):
    straight = mini_model.clone()
    run_icft(_plan(), straight, mini_corpus)

    path = tmp_path / "partial.bin"
    save_checkpoint(path, _trained(mini_model, mini_corpus, max_steps=4))
    restored = load_checkpoint(path)
    run_icft(
        restored.plan, restored.model, mini_corpus, state=restored.state
    )

    left, right = _all_buffers(straight), _all_buffers(restored.model)
    for name in left:
        np.testing.assert_array_equal(left[name], right[name])


def test_checkpoint_carries_the_shuffle_generator(
    tmp_path, mini_model, mini_corpus
):
    checkpoint = _trained(mini_model, mini_corpus, max_steps=4)
    state = checkpoint.state
    assert (state.stage, state.epoch) == (3, 0)
    assert state.rng == stream_rng(0, 3, 0).state()
    path = tmp_path / "partial.bin"
    save_checkpoint(path, checkpoint)
    assert load_checkpoint(path).state.rng == state.rng


def test_resume_shuffles_with_the_stored_generator(mini_model, mini_corpus):
    straight = mini_model.clone()
    run_icft(_plan(), straight, mini_corpus)
    restored = decode_checkpoint(
        encode_checkpoint(_trained(mini_model, mini_corpus, max_steps=4))
    )
    restored.state.rng = stream_rng(99, 3, 0).state()
    run_icft(
        restored.plan, restored.model, mini_corpus, state=restored.state
    )
    left, right = _all_buffers(straight), _all_buffers(restored.model)
    assert any(not np.array_equal(left[name], right[name]) for name in left)


def test_single_flipped_byte_fails_the_integrity_check(mini_model):
    blob = bytearray(
        encode_checkpoint(
            Checkpoint(
                model=mini_model,
                plan=_plan(),
                ablations=AblationFlags(),
                state=TrainingState.fresh(_plan()),
            )
        )
    )
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC"):
        decode_checkpoint(bytes(blob))


def test_truncated_and_foreign_files_are_rejected(tmp_path, mini_model):
    blob = encode_checkpoint(
        Checkpoint(
            model=mini_model,
            plan=_plan(),
            ablations=AblationFlags(),
            state=TrainingState.fresh(_plan()),
        )
    )
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-100])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTACKPT" + blob[len(MAGIC):])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")


def test_unknown_format_version_is_rejected(mini_model):
    checkpoint = Checkpoint(
        model=mini_model,
        plan=_plan(),
        ablations=AblationFlags(),
        state=TrainingState.fresh(_plan()),
        version=2,
    )
    blob = encode_checkpoint(checkpoint)
    assert struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4]) == (2,)
    with pytest.raises(CheckpointError, match="format 2"):
        decode_checkpoint(blob)


def test_identical_runs_write_identical_checkpoints(mini_model, mini_corpus):
    first = encode_checkpoint(_trained(mini_model.clone(), mini_corpus))
    second = encode_checkpoint(_trained(mini_model.clone(), mini_corpus))
    assert first == second
