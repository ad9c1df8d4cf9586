"""Test fixtures and helpers for ICFT unit tests."""
import pytest

from icft import settings as settings_module
from icft.corpus import BUNDLED_CORPUS, GENERAL_CORPUS, CorpusRecord
from icft.corpus import Vocabulary, load_corpus
from icft.memory import DualMemory, MemoryConfig
from icft.model import ModelConfig, build_icft_model
from icft.tensor import reset_tapes


def pytest_addoption(parser):
    """Register the switch for the desk-scale training runs."""
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run the slow end-to-end training tests",
    )


def pytest_configure(config):
    """Declare the custom marker."""
    config.addinivalue_line("markers", "slow: end-to-end training run")


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless --runslow is given."""
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def reset_global_state():
    """Reset module-level globals so tests remain isolated."""
    settings_module.set_settings(settings_module.RunConfig())
    reset_tapes()

    yield

    settings_module.set_settings(settings_module.RunConfig())
    reset_tapes()


@pytest.fixture
def tiny_config():
    """A 2-layer, d=16 model over a 12-token vocabulary."""
    return ModelConfig(
        d_model=16,
        n_layers=2,
        n_heads=2,
        vocab_size=12,
        ctx_len=16,
        adapter_rank=4,
        lora_rank=2,
        seed=3,
    )


@pytest.fixture
def corpus():
    """The bundled toy corpus."""
    return load_corpus(BUNDLED_CORPUS)


@pytest.fixture
def mini_corpus():
    """Nine short records with known token lengths 2..10."""
    words = "one two three four five six seven eight nine".split()
    return [
        CorpusRecord(
            id=f"r{n}",
            prompt=" ".join(words[:1]),
            response=" ".join(words[:n - 1]),
        )
        for n in range(10, 1, -1)
    ]


@pytest.fixture
def mini_model(mini_corpus):
    """A small ICFT model sized for the mini corpus vocabulary."""
    vocab = Vocabulary.build(mini_corpus)
    cfg = ModelConfig(
        d_model=16,
        n_layers=1,
        n_heads=2,
        vocab_size=len(vocab),
        ctx_len=16,
        adapter_rank=2,
        lora_rank=2,
        seed=1,
    )
    memory = DualMemory.create(
        MemoryConfig(stm_capacity=4, promote_threshold=1, ltm_capacity=4),
        cfg.d_model,
    )
    return build_icft_model(cfg, vocab, memory)


@pytest.fixture
def general_corpus():
    """The bundled general text the base model is pretrained on."""
    return load_corpus(GENERAL_CORPUS)
