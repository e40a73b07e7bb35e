"""mme: a toolkit for studying concept drift in API-sequence malware detectors.

The pipeline: parse an API documentation corpus, build a heterogeneous API
knowledge graph, train translation-based name embeddings, hash resource-like
call arguments into signed bin vectors, train a convolutional sequence
detector (optionally with a family-aware contrastive loss), and evaluate it
over temporally split data with active-learning maintenance loops.
"""
from importlib import resources

__version__ = "0.1.0"
FORMAT_VERSION = 1


def fixture_path(name: str):
    """Path to a bundled fixture data file (corpus, templates, verb lexicon)."""
    return resources.files(__package__) / "fixtures" / name
