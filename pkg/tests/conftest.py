import numpy as np
import pytest

from orderlab.corpus import Corpus, SynthConfig, synth_corpus
from orderlab.numkit import SeededRng
from orderlab.semantics import synth_semantics


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture(scope="session")
def small_synth():
    """A small but realistic corpus: 150 users, 60 items, 4 categories."""
    rng = SeededRng(77)
    cfg = SynthConfig(users=150, items=60, categories=4, mean_length=18)
    corpus, cats = synth_corpus(cfg, rng.child("synth"))
    table = synth_semantics(cats, 24, 0.1, rng.child("sem"))
    return corpus, cats, table


def toy_corpus(sequences, n_items):
    """Corpus from explicit dense-index sequences."""
    users = [f"u{i}" for i in range(len(sequences))]
    items = [f"i{j}" for j in range(n_items)]
    return Corpus(users, [np.asarray(s, dtype=np.int64) for s in sequences], items)
