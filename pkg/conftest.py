"""
Shared fixtures: a tiny encoder spec, quick training settings and a small synthetic task.
"""
import pytest
import torch

from bitsplit.numerics import configure_determinism
from bitsplit.schemas import ModelSpec, QuantConfig, TrainConfig
from bitsplit.tasks import synth_task


def pytest_configure(config):
    configure_determinism()


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec(num_layers=2, hidden=16, heads=2, ffn_dim=32, vocab=64, max_seq_len=16, num_classes=2)


@pytest.fixture
def exact_quant() -> QuantConfig:
    """Weight quantization only, so split and unsplit forwards agree to rounding."""
    return QuantConfig(activation_bits=32)


@pytest.fixture
def quick_train() -> TrainConfig:
    return TrainConfig(
        batch_size=16,
        seq_len=12,
        epochs_teacher=1,
        epochs_int=1,
        epochs_pred=1,
        epochs_split=1,
        dropout=0.0,
    )


@pytest.fixture
def tiny_task():
    return synth_task("majority-token-class", seed=7, vocab=64, seq_len=12, train_size=48, dev_size=16)


@pytest.fixture
def token_batch(tiny_task):
    return tiny_task.dev.subset(torch.arange(8))
