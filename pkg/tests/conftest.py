import numpy as np
import pytest

from fcsum import corpus
from fcsum.corpus import HyperParams
from fcsum.synthetic import fc_corpus, flatten


@pytest.fixture(scope="session")
def tiny_hp():
    return HyperParams.desk(n=3, m=5, tdatlen=6, astlen=8, comlen=6, code_vocab=64,
                            summary_vocab=32, ast_vocab=32, embed_code=6, embed_ast=4,
                            rnn_units=5, squash_units=4)


@pytest.fixture(scope="session")
def tiny_data(tiny_hp):
    """(vocabs, records) for a handful of planted files at tiny dimensions."""
    methods = flatten(fc_corpus(4, seed=11))
    vocabs = corpus.build_vocabs(methods, tiny_hp)
    return vocabs, corpus.encode_methods(methods, vocabs, tiny_hp)


@pytest.fixture(scope="session")
def desk_data():
    hp = HyperParams.desk()
    methods = flatten(fc_corpus(10, seed=5))
    vocabs = corpus.build_vocabs(methods, hp)
    return hp, vocabs, corpus.encode_methods(methods, vocabs, hp)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
