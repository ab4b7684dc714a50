from __future__ import annotations

import numpy as np
import pytest
import torch

from buding_asr import nd_core
from buding_asr.config import AsrConfig
from buding_asr.model import AsrModel
from buding_asr.synth_corpus import generate_corpus
from helpers import tiny_config


@pytest.fixture(autouse=True)
def _float32_default():
    nd_core.set_precision("float32")
    yield
    nd_core.set_precision("float32")


@pytest.fixture
def float64():
    nd_core.set_precision("float64")
    yield torch.float64


@pytest.fixture
def cfg() -> AsrConfig:
    return tiny_config()


@pytest.fixture
def corpus(cfg):
    return generate_corpus(cfg.data, seed=3)


@pytest.fixture
def model(cfg, corpus) -> AsrModel:
    torch.manual_seed(0)
    m = AsrModel(corpus.vocab, cfg.data.feature_dim, cfg.encoder, cfg.decoder)
    m.eval()
    return m


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
