import pytest

from gobctl.forward import TrainConfig, build_network, train
from gobctl.nn import NetworkSpec
from gobctl.pipeline import make_surrogate_dataset, temporal_split


@pytest.fixture(scope="session")
def surrogate_model():
    """Forward model fitted on noise-free closed-form samples (shared)."""
    samples = make_surrogate_dataset(12_000, seed=42)
    train_set, val_set = temporal_split(samples, 0.25)
    spec = NetworkSpec(dropout_rate=0.0)
    cfg = TrainConfig(max_epochs=80, patience=30, seed=0)
    return train(build_network(spec, seed=0), train_set, val_set, cfg)
