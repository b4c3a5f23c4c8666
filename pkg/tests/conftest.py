import pytest

from fvlm.synth import default_world, generate_corpus
from fvlm.training import load_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    return generate_corpus(default_world(), 16, seed=3, out_dir=tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return load_corpus(corpus_dir)
