import numpy as np
import pytest

from mme import fixture_path
from mme.docs import parse_doc_corpus
from mme.graph import build_graph, load_templates, load_verb_lexicon
from mme.sequence import EmbeddedDataset
from mme.transe import TranseConfig, train


@pytest.fixture(scope="session")
def mini_records():
    return parse_doc_corpus(fixture_path("docs_mini.jsonl"))


@pytest.fixture(scope="session")
def templates():
    return load_templates(fixture_path("templates.jsonl"))


@pytest.fixture(scope="session")
def verbs():
    return load_verb_lexicon(fixture_path("verbs.txt"))


@pytest.fixture(scope="session")
def mini_graph(mini_records, templates, verbs):
    return build_graph(mini_records, templates, verbs)


@pytest.fixture(scope="session")
def fixture_table(mini_graph):
    """Converged embeddings of the 12-doc fixture graph."""
    return train(mini_graph, TranseConfig(dim=64, epochs=200, seed=7))


def random_dataset(rng, n=24, max_len=8, width=10, n_families=2):
    """A labeled random dataset shaped like embedded traces."""
    X = rng.normal(size=(n, max_len, width))
    lengths = rng.integers(3, max_len + 1, size=n)
    for i in range(n):
        X[i, lengths[i]:] = 0.0
    half = n // 2
    y = np.array([0] * half + [1] * (n - half))
    family = np.zeros(n, dtype=int)
    fam_size = max(1, (n - half) // n_families)
    for j, i in enumerate(range(half, n)):
        family[i] = 1 + min(j // fam_size, n_families - 1)
    return EmbeddedDataset(
        ids=[f"t{i:03d}" for i in range(n)],
        X=X,
        lengths=lengths,
        y=y,
        family=family,
    )
