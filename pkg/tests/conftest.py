import numpy as np
import pytest

from mcout.config import RunConfig
from mcout.data import DatasetSpec, Tokenizer, generate_dataset
from mcout.model import DecoderConfig, EncoderConfig, ModelConfig, VisionLanguageModel
from mcout.tensor import default_dtype


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


def small_model_config(d_model=16, n_layers=2, n_heads=2, max_positions=64, image_size=8, patch_size=4):
    return ModelConfig(
        EncoderConfig(image_size=image_size, channels=3, patch_size=patch_size, d_model=d_model),
        DecoderConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, vocab_size=64,
                      max_positions=max_positions),
        latent_heads=2,
    )


@pytest.fixture
def tiny_model(f64):
    return VisionLanguageModel(small_model_config(), seed=3)


def random_batch(model, rng, lengths, vocab=64):
    """Images plus token rows of the given text lengths (right-padded batch)."""
    enc = model.cfg.encoder
    images = rng.random((len(lengths), enc.image_size, enc.image_size, enc.channels))
    e_v = model.encode_image(images)
    seqs = [list(rng.integers(3, vocab, size=n)) for n in lengths]
    return model.interleave(e_v, seqs, pad_id=0)


@pytest.fixture(scope="session")
def count_samples():
    return generate_dataset(DatasetSpec(task="count", n_samples=48, seed=11))


@pytest.fixture(scope="session")
def tokenizer():
    return Tokenizer()


def quick_config(**overrides):
    base = dict(d_model=16, n_layers=2, n_heads=2, latent_heads=2, batch_size=4, steps=6,
                warmup_steps=2, init_lr=1e-3, min_lr=1e-4, n_thoughts=2, eval_batch_size=16)
    base.update(overrides)
    return RunConfig(**base)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
