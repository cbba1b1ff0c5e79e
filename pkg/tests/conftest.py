import numpy as np
import pytest

from userlm.corpus import Message, synthetic_vocabulary
from userlm.model import ModelConfig, TransformerParams
from userlm.recurrence import RecurrenceParams


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=23, d_model=8, n_layers=2, n_heads=2,
                       block_size=8, insert_layer=1, extract_layer=2,
                       max_blocks=3, dropout=0.0)


@pytest.fixture
def tiny_vocab():
    return synthetic_vocabulary(20)  # 23 tokens with the reserved three


@pytest.fixture
def tiny_model(tiny_cfg):
    rng = np.random.default_rng(11)
    params = TransformerParams.init(tiny_cfg, rng)
    rec = RecurrenceParams.init(tiny_cfg, params, rng)
    return tiny_cfg, params, rec


def random_messages(rng, n_msgs, vocab_size=20, lo=4, hi=8):
    msgs = []
    for i in range(n_msgs):
        n = int(rng.integers(lo, hi + 1))
        words = " ".join(f"w{j:04d}" for j in rng.integers(0, vocab_size, size=n))
        msgs.append(Message(i, words))
    return msgs
