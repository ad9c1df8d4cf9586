import numpy as np
import pytest
from pydantic import ValidationError

from icft.corpus import SPECIALS, Vocabulary
from icft.errors import LoraError, ShapeError, TargetIndexError
from icft.memory import DualMemory, MemoryConfig, make_item
from icft.model import (
    BASE_GROUPS,
    TRAINABLE_GROUPS,
    LoRAPatch,
    ModelConfig,
    adapter_forward,
    apply_lora,
    build_icft_model,
    count_params,
    enumerate_parameters,
    forward_adapted,
    forward_base,
    generate,
    init_adapters,
    init_lora,
    init_model,
    merge_into,
    merge_lora,
    score_continuation,
)
from icft.tensor import (
    SeededRng,
    Tensor,
    add,
    check_gradients,
    cross_entropy,
    matmul,
)

WORDS = ["fever", "cough", "rest", "fluids", "pain", "sleep", "water"]


def _vocab():
    return Vocabulary(list(SPECIALS) + WORDS)


def _randomize(tensor, seed, std=0.3):
    tensor.data = SeededRng(seed).normal(std, tensor.shape)


def test_base_model_starts_frozen(tiny_config):
    model = init_model(tiny_config)
    assert model.frozen
    assert model.params["layers.0.ln1.gain"].data.tolist() == [1.0] * 16
    assert not model.params["final_ln.bias"].data.any()


def test_config_rejects_inconsistent_shapes():
    with pytest.raises(ValidationError):
        ModelConfig(d_model=10, n_heads=4, vocab_size=12)
    with pytest.raises(ValidationError):
        ModelConfig(d_model=16, n_heads=2, vocab_size=12, adapter_rank=9)


def test_forward_produces_one_row_of_logits_per_token(tiny_config):
    model = init_model(tiny_config)
    logits = forward_base(model, [1, 5, 7, 2])
    assert logits.shape == (4, tiny_config.vocab_size)


def test_forward_rejects_bad_sequences(tiny_config):
    model = init_model(tiny_config)
    with pytest.raises(ShapeError):
        forward_base(model, [])
    with pytest.raises(ShapeError):
        forward_base(model, [1] * (tiny_config.ctx_len + 1))
    with pytest.raises(TargetIndexError):
        forward_base(model, [1, tiny_config.vocab_size])


def test_zero_initialized_augmentations_are_exact_identities(tiny_config):
    model = init_model(tiny_config)
    adapters = init_adapters(tiny_config)
    patches = init_lora(tiny_config)
    zero = Tensor.zeros((tiny_config.d_model,))
    rng = SeededRng(21)
    for _ in range(50):
        length = int(rng.permutation(tiny_config.ctx_len)[0]) + 1
        tokens = [
            int(t) % tiny_config.vocab_size
            for t in rng.permutation(64)[:length]
        ]
        base = forward_base(model, tokens).data
        np.testing.assert_array_equal(
            forward_adapted(model, adapters, tokens).data, base
        )
        np.testing.assert_array_equal(
            apply_lora(model, patches, tokens).data, base
        )
        np.testing.assert_array_equal(
            apply_lora(model, patches, tokens, adapters, z=zero).data, base
        )


def test_adapter_forward_accepts_vectors_and_rows(tiny_config):
    adapter = init_adapters(tiny_config)[0]
    _randomize(adapter.w_up, 4)
    vector = Tensor(SeededRng(2).normal(1.0, (16,)))
    rows = Tensor(np.stack([vector.data, vector.data]))
    single = adapter_forward(adapter, vector)
    batch = adapter_forward(adapter, rows)
    assert single.shape == (16,)
    np.testing.assert_allclose(batch.data[1], single.data, atol=1e-12)
    with pytest.raises(ShapeError):
        adapter_forward(adapter, Tensor.zeros((3,)))


def test_merge_matches_unmerged_forward_on_random_shapes():
    rng = SeededRng(99)
    for trial in range(100):
        d, k = (int(v) + 1 for v in rng.permutation(16)[:2])
        r = int(rng.permutation(4)[0]) + 1
        w = Tensor(rng.normal(1.0, (d, k)))
        patch = LoRAPatch(
            target=f"trial.{trial}",
            a=Tensor(rng.normal(1.0, (d, r))),
            b=Tensor(rng.normal(1.0, (r, k))),
        )
        x = Tensor(rng.normal(1.0, (3, d)))
        unmerged = add(matmul(x, w), matmul(matmul(x, patch.a), patch.b))
        merged = matmul(x, merge_lora(patch, w))
        np.testing.assert_allclose(merged.data, unmerged.data, atol=1e-9)


def test_merged_model_matches_patched_model(tiny_config):
    model = init_model(tiny_config)
    patches = init_lora(tiny_config)
    for i, patch in enumerate(patches):
        _randomize(patch.b, 50 + i)
    tokens = [1, 6, 3, 9, 2]
    patched = apply_lora(model, patches, tokens).data
    merged = forward_base(merge_into(model, patches), tokens).data
    np.testing.assert_allclose(merged, patched, atol=1e-9)
    assert not any(patch.merged for patch in patches)


def test_merging_twice_is_an_error(tiny_config):
    model = init_model(tiny_config)
    patch = init_lora(tiny_config)[0]
    merge_lora(patch, model.params[patch.target])
    with pytest.raises(LoraError):
        merge_lora(patch, model.params[patch.target])
    with pytest.raises(LoraError):
        apply_lora(model, [patch], [1, 2])


def test_lora_rejects_unknown_and_non_projection_targets(tiny_config):
    model = init_model(tiny_config)
    patch = init_lora(tiny_config)[0]
    for target in ("layers.9.attn.wq", "embed.tokens"):
        bad = LoRAPatch(target=target, a=patch.a, b=patch.b)
        with pytest.raises(LoraError):
            apply_lora(model, [bad], [1, 2])


def test_logits_are_causal(tiny_config):
    model = init_model(tiny_config)
    adapters = init_adapters(tiny_config)
    _randomize(adapters[0].w_up, 8)
    first = forward_adapted(model, adapters, [1, 4, 7, 3, 5]).data
    second = forward_adapted(model, adapters, [1, 4, 7, 9, 11]).data
    np.testing.assert_allclose(first[:3], second[:3], rtol=0, atol=1e-12)
    assert not np.array_equal(first[3:], second[3:])


def test_lora_only_count_for_one_square_target():
    cfg = ModelConfig(
        d_model=16, n_layers=1, n_heads=2, vocab_size=12, lora_rank=2
    )
    patch = init_lora(cfg)[0]
    assert patch.a.size + patch.b.size == 64


@pytest.mark.parametrize("mode", list(TRAINABLE_GROUPS))
def test_count_params_matches_buffer_enumeration(mode):
    cfg = ModelConfig(
        d_model=64,
        n_layers=4,
        n_heads=4,
        vocab_size=100,
        adapter_rank=8,
        lora_rank=4,
    )
    sizes = {}
    for _, group, tensor in enumerate_parameters(
        init_model(cfg), init_adapters(cfg), init_lora(cfg)
    ):
        sizes[group] = sizes.get(group, 0) + tensor.size
    report = count_params(cfg, mode)
    assert report.total_params == sum(sizes[g] for g in BASE_GROUPS)
    assert report.trainable_params == sum(
        sizes[g] for g in TRAINABLE_GROUPS[mode]
    )
    if mode == "full":
        assert report.relative_size_percent == 100.0
    if mode == "icft":
        assert report.relative_size_percent < 5.0


def test_greedy_generation_is_deterministic_and_bounded(tiny_config):
    model = init_model(tiny_config)
    first = generate(model, [1, 5], max_new_tokens=6)
    second = generate(model, [1, 5], max_new_tokens=6)
    assert first == second
    assert len(first) == 6
    capped = generate(model, [1] * (tiny_config.ctx_len - 2), 10)
    assert len(capped) == 2


def test_generation_stops_at_end_token(tiny_config):
    model = init_model(tiny_config)
    greedy = generate(model, [1, 5], max_new_tokens=4)
    stopped = generate(model, [1, 5], max_new_tokens=4, eos_id=greedy[0])
    assert stopped == greedy[:1]


def test_temperature_sampling_needs_and_follows_its_rng(tiny_config):
    model = init_model(tiny_config)
    with pytest.raises(ValueError):
        generate(model, [1], 3, temperature=1.0)
    one = generate(model, [1], 5, temperature=1.0, rng=SeededRng(4))
    two = generate(model, [1], 5, temperature=1.0, rng=SeededRng(4))
    assert one == two


def test_score_continuation_sums_token_log_probabilities(tiny_config):
    model = init_model(tiny_config)
    whole = score_continuation(model, [1, 5], [6, 7])
    head = score_continuation(model, [1, 5], [6])
    tail = score_continuation(model, [1, 5, 6], [7])
    assert whole == pytest.approx(head + tail, abs=1e-12)
    assert whole < 0


def test_icft_model_groups_and_trainable_switch(tiny_config):
    model = build_icft_model(
        tiny_config, _vocab(), DualMemory.create(MemoryConfig(), 16)
    )
    groups = model.parameter_groups()
    assert list(groups) == ["adapters", "lora", "memory"]
    model.set_trainable(("lora",))
    assert all(t.requires_grad for t in groups["lora"].values())
    assert not any(t.requires_grad for t in groups["adapters"].values())
    assert not any(t.requires_grad for t in groups["memory"].values())
    assert model.base.frozen


def test_build_rejects_vocabulary_size_mismatch(tiny_config):
    vocab = Vocabulary(list(SPECIALS) + WORDS[:3])
    with pytest.raises(ShapeError):
        build_icft_model(
            tiny_config, vocab, DualMemory.create(MemoryConfig(), 16)
        )


def test_gradients_of_every_trainable_group_match_finite_differences(
    tiny_config,
):
    vocab = _vocab()
    memory = DualMemory.create(
        MemoryConfig(stm_capacity=4, promote_threshold=1), 16
    )
    model = build_icft_model(tiny_config, vocab, memory)
    for i, adapter in enumerate(model.adapters):
        _randomize(adapter.w_up, 10 + i)
    for i, patch in enumerate(model.patches):
        _randomize(patch.b, 20 + i)
    for i, text in enumerate(["fever rest", "cough fluids", "pain sleep"]):
        memory.remember(make_item(model.base, vocab, f"m{i}", text))
    query = model.query_vector("fever water")
    memory.observe(memory.query(query))
    assert memory.ltm.items

    tokens, targets = [1, 5, 8, 2], [5, 8, 2, 3]

    def loss(_):
        z = memory.query(query).z
        return cross_entropy(model.logits(tokens, z=z), targets)

    targets_to_check = [
        model.adapters[0].w_down,
        model.adapters[1].w_up,
        model.patches[0].a,
        model.patches[-1].b,
        memory.readout.w_stm,
        memory.readout.w_ltm,
        model.base.params["layers.0.ln1.gain"],
        model.base.params["layers.1.ln2.bias"],
        model.base.params["final_ln.gain"],
    ]
    for tensor in targets_to_check:
        report = check_gradients(loss, tensor)
        assert report.passed, (tensor.name, report.max_rel_error)
    assert model.base.frozen
