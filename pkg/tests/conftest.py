import numpy as np
import pytest

from lazyinfer import ModelConfig, generate_random_model


def make_model(num_layers=3, num_heads=2, d_model=16, d_ff=32,
               vocab_size=258, max_position=2048, seed=0):
    config = ModelConfig(num_layers=num_layers, num_heads=num_heads,
                         d_model=d_model, d_ff=d_ff, vocab_size=vocab_size,
                         max_position=max_position)
    return config, generate_random_model(config, seed)


def random_prompt(rng, n_tokens, vocab=258):
    """n_tokens ids: BOS then random bytes, like the tokenizer would produce."""
    body = rng.integers(0, 256, size=n_tokens - 1).tolist()
    return [256] + [int(b) for b in body]


@pytest.fixture
def small_model():
    return make_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
