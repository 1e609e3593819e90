import numpy as np
import pytest

from fbtta import nn
from fbtta.streams import SegmentSpec, StreamSpec


@pytest.fixture(scope="session")
def tiny_arch():
    return nn.Architecture(in_dim=6, hidden=(10, 8), n_classes=3)


@pytest.fixture()
def tiny_model(tiny_arch):
    return nn.init_model(tiny_arch, dropout_rate=0.3, seed=11)


@pytest.fixture()
def tiny_inputs():
    rng = np.random.default_rng(5)
    return rng.normal(0.0, 1.0, size=(12, 6))


@pytest.fixture(scope="session")
def small_stream_spec():
    """Two short segments: enough structure for engine tests, fast to run."""
    return StreamSpec(
        n_classes=4,
        feature_dim=8,
        prototype_seed=3,
        segments=(SegmentSpec("mean_shift", 2.0), SegmentSpec("rotation", 0.5)),
        batch_size=16,
        batches_per_segment=3,
    )


@pytest.fixture(scope="session")
def pretrained_default(tmp_path_factory):
    """Checkpoint on the default benchmark spec, trained once per session."""
    from fbtta.harness import PretrainSettings, pretrain
    from fbtta.streams import default_stream_spec

    path = tmp_path_factory.mktemp("checkpoint") / "source.npz"
    _, accuracy = pretrain(default_stream_spec(), PretrainSettings(), seed=0,
                           out_path=path)
    return path, accuracy


@pytest.fixture(scope="session")
def pretrained_small(tmp_path_factory, small_stream_spec):
    """Checkpoint on the small test spec for fast engine and harness tests."""
    from fbtta.harness import PretrainSettings, pretrain

    settings = PretrainSettings(n_train=1024, n_holdout=256, epochs=12,
                                hidden=(16, 16), target_accuracy=0.85)
    path = tmp_path_factory.mktemp("checkpoint") / "small.npz"
    _, accuracy = pretrain(small_stream_spec, settings, seed=0, out_path=path)
    return path, accuracy
