import numpy as np
import pytest

from tgvid.data import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticSpec(samples_per_class=12, clip_frames=10, frame_size=16,
                                            object_size_range=(3, 5), seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
