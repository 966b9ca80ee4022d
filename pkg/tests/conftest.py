import numpy as np
import pytest

from domlora.linalg import RngState
from domlora.model import ModelConfig, init_params
from domlora.tasks import TaskSpec, generate_samples, make_task_data
from domlora.trainer import TrainConfig, pretrain_base

TINY = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=12,
                   vocab_size=16, max_seq_len=16)
TOY = ModelConfig()  # 4 layers, d_model 32, 4 heads, d_ff 96, vocab 64

MODSUM_TINY = TaskSpec(name="modsum", modsum_terms=2, modsum_modulus=11)
MODSUM_TOY = TaskSpec(name="modsum", modsum_terms=2, modsum_modulus=29)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture
def tiny_params():
    return init_params(TINY, RngState(7))


@pytest.fixture
def tiny_sample():
    gen = RngState(99).generator()
    tokens = gen.integers(0, TINY.vocab_size, size=8)
    mask = np.zeros(8, dtype=bool)
    mask[3] = True
    mask[6] = True
    from domlora.probe import ProbeSample
    return ProbeSample(tokens, mask)


@pytest.fixture(scope="session")
def pretrained_base():
    """Toy backbone pretrained on the copy task, shared across tests."""
    params = init_params(TOY, RngState(11).child(0))
    data = make_task_data(TaskSpec(name="copy", copy_prompt_len=8),
                          RngState(11).child(2), TOY.vocab_size,
                          train_size=128, eval_size=32)
    pretrain_base(params, TrainConfig(steps=120, batch_size=8, peak_lr=1e-2, seed=11),
                  data)
    return params


@pytest.fixture(scope="session")
def toy_probe_set():
    return generate_samples(MODSUM_TOY, 32, RngState(21), TOY.vocab_size)


@pytest.fixture(scope="session")
def modsum_data():
    return make_task_data(MODSUM_TOY, RngState(31), TOY.vocab_size,
                          train_size=128, eval_size=32)
