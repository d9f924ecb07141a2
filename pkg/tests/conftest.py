import numpy as np
import pytest

from vlalign.corpus import CorpusConfig, generate_corpus
from vlalign.encoders import ModelConfig, MultiLevelAligner
from vlalign.inputs import SequenceCaps, build_vocabs
from vlalign.trainer import RunConfig, StageConfig, Trainer

TINY_MODEL = ModelConfig(hidden=16, heads=2, ff=32, feat_dim=8, max_positions=64)


def tiny_corpus_config(**overrides) -> CorpusConfig:
    base = dict(
        seed=11,
        n_pairs=24,
        n_categories=6,
        n_attributes=4,
        n_predicates=3,
        feat_dim=8,
        feature_noise_sigma=0.01,
        objects_per_scene=(2, 4),
    )
    base.update(overrides)
    return CorpusConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(tiny_corpus_config())


@pytest.fixture(scope="session")
def tiny_vocabs(tiny_corpus):
    return build_vocabs(tiny_corpus, min_phrase_freq=1)


@pytest.fixture()
def tiny_model(tiny_vocabs):
    tv, pv = tiny_vocabs
    return MultiLevelAligner(TINY_MODEL, tv, pv, seed=3, dtype=np.float64)


def tiny_run_config(**overrides) -> RunConfig:
    base = dict(
        model=TINY_MODEL,
        caps=SequenceCaps(),
        stage1=StageConfig(stage=1, epochs=1, batch_size=4, peak_lr=1e-3, seed=1),
        stage2=StageConfig(stage=2, epochs=1, batch_size=4, peak_lr=1e-3, seed=2),
        min_phrase_freq=1,
        fp64=True,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture()
def tiny_trainer(tiny_corpus):
    return Trainer(tiny_corpus, tiny_run_config())
