import numpy as np
import pytest
import torch

from densecap_kit.codec import build_vocabulary
from densecap_kit.features import SyntheticExtractor
from densecap_kit.model import CaptionModel, ModelConfig
from densecap_kit.scenario import caption_corpus, generate_synthetic_dataset


@pytest.fixture(scope="session")
def small_set():
    return generate_synthetic_dataset(7, 8, (4, 5), (480, 640))


@pytest.fixture(scope="session")
def tok(small_set):
    return build_vocabulary(caption_corpus(small_set), 100)


@pytest.fixture(scope="session")
def extractor():
    return SyntheticExtractor(d=16, noise=0.05, seed=0)


@pytest.fixture
def tiny_model(tok):
    torch.manual_seed(0)
    cfg = ModelConfig(vocab_size=tok.vocab_size, d=16, F=20, P_max=8, k=2, heads=2,
                      encoder_layers=1, decoder_layers=1, L_max=160)
    return CaptionModel(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
