import numpy as np
import pytest

from advrewrite.lexicon import EmbeddingTable, StopwordSet, WordPieceVocab


@pytest.fixture
def tiny_vocab():
    return WordPieceVocab.build(["hyper", "##parameter", "a", "b", "cat", "sat", "the"])


def make_table(entries, level="word"):
    dim = len(next(iter(entries.values())))
    return EmbeddingTable(dim, {k: np.asarray(v, float) for k, v in entries.items()},
                          level=level)


@pytest.fixture
def empty_stop():
    return StopwordSet()
