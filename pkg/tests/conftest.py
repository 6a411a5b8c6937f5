import random

import pytest

from unikgqa.kg import KnowledgeGraph, QAInstance, random_graph


@pytest.fixture
def chain_graph() -> KnowledgeGraph:
    """a -r-> b -r-> c -r-> d."""
    return KnowledgeGraph(
        ["a", "b", "c", "d"], ["r"], [(0, 0, 1), (1, 0, 2), (2, 0, 3)]
    )


@pytest.fixture
def diamond_graph() -> KnowledgeGraph:
    """a -r1-> b -r2-> d and a -r3-> c -r4-> d."""
    return KnowledgeGraph(
        ["a", "b", "c", "d"],
        ["r1", "r2", "r3", "r4"],
        [(0, 0, 1), (1, 2, 3), (0, 4, 2), (2, 6, 3)],
    )


def make_random_graph(seed: int, n_entities=12, n_relations=3, n_triples=20):
    return random_graph(n_entities, n_relations, n_triples, random.Random(seed))
