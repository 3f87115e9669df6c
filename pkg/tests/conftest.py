import numpy as np
import pytest

from storyalign.synth import SyntheticGenConfig, generate_synthetic_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """A little mixed-size corpus shared by read-only tests."""
    cfg = SyntheticGenConfig(
        num_stories=12,
        images_per_story=3,
        sentences_per_article=4,
        articles_per_story=2,
        latent_dim=8,
        text_dim=10,
        image_dim=12,
        noise_scale=0.1,
        seed=3,
    )
    return generate_synthetic_corpus(cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
