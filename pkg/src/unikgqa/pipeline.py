"""Two-stage inference: abstract retrieval, then reasoning on the
grounded subgraph.

Retrieval builds the hop-limited neighborhood of the topic entities,
abstracts it, scores the abstract nodes with the retrieval model, grounds
the top-K nodes back to entities, and returns the KG-induced subgraph
over those entities (all stored triples among them, so the reasoner sees
the full local structure). Answering scores that subgraph with the
reasoning model and ranks non-topic entities.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .abstract import AbstractSubgraph, abstract, ground
from .kg import EntityId, KnowledgeGraph, QAInstance, Subgraph
from .model import (
    ModelParams,
    encode_graph_relations,
    forward_trace,
    prop_graph_from_abstract,
    prop_graph_from_subgraph,
    reason_scores,
)

log = logging.getLogger(__name__)

SCORE_MODES = ("accumulated", "final")


@dataclass
class RetrievalResult:
    question_id: str
    subgraph: Subgraph
    selected_nodes: list[tuple[int, float]]  # (abstract node id, score), rank order
    abstract_graph: AbstractSubgraph
    coverage: bool | None  # None when gold answers are unknown

    @property
    def subgraph_size(self) -> int:
        return self.subgraph.num_entities


def rank_abstract_nodes(scores: np.ndarray) -> list[int]:
    """Node ids by descending score; ties by ascending id."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def selection_scores(
    graph, q_vec: np.ndarray, rel_vecs: np.ndarray, params: ModelParams,
    mode: str = "accumulated",
) -> np.ndarray:
    """Node scores used for top-K selection.

    Ranking by the final-step distribution alone breaks down once the
    retriever is well trained: nearly all mass sits on answer nodes, and
    the nodes that connect topics to answers drop out of the top K,
    leaving the grounded subgraph without a path for the reasoner to
    walk. Averaging the score distributions across propagation steps
    keeps every node on the scored path ranked high, so "accumulated" is
    the default; "final" preserves the single-step behavior.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}, expected one of {SCORE_MODES}")
    trace = forward_trace(graph, q_vec, rel_vecs, params)
    if mode == "final" or params.num_steps == 1:
        return trace.states[-1].scores
    return np.mean([s.scores for s in trace.states[1:]], axis=0)


def _bfs_parents(neighborhood: Subgraph, topics) -> dict[int, int | None]:
    """Deterministic BFS tree over the neighborhood, rooted at the topic
    entities (edges head -> tail, neighbors visited in ascending id)."""
    adjacency: dict[int, list[int]] = {}
    for tr in neighborhood.triples:
        adjacency.setdefault(tr.head, []).append(tr.tail)
    for tails in adjacency.values():
        tails.sort()
    parent: dict[int, int | None] = {t: None for t in sorted(topics)}
    queue = deque(sorted(topics))
    while queue:
        u = queue.popleft()
        for v in adjacency.get(u, ()):
            if v not in parent:
                parent[v] = u
                queue.append(v)
    return parent


def _connecting_entities(parent: dict[int, int | None], targets) -> set[int]:
    """Entities on the BFS-tree paths from the roots to the targets."""
    path_nodes: set[int] = set()
    for e in targets:
        node: int | None = e
        while node is not None and node not in path_nodes:
            path_nodes.add(node)
            node = parent.get(node)
    return path_nodes


def retrieve(
    instance: QAInstance,
    kg: KnowledgeGraph,
    params: ModelParams,
    encoder,
    top_k: int,
    max_hops: int,
    score_mode: str = "accumulated",
    connect_paths: bool = True,
) -> RetrievalResult:
    """Select the top-K abstract nodes by match score and ground them.

    With ``connect_paths`` (the default), the grounded entity set is
    closed under one shortest path from the topics to every grounded
    entity, taken from a fixed BFS tree of the neighborhood. A subgraph
    that contains a high-scoring node but not the nodes linking it to
    the topics is useless to the reasoner: score propagation can never
    reach it. The tree is independent of K, so larger K still yields a
    superset subgraph.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if max_hops < 1:
        raise ValueError(f"max_hops must be >= 1, got {max_hops}")

    neighborhood = kg.k_hop_subgraph(instance.topic_entities, max_hops)
    if neighborhood.num_triples == 0:
        raise ValueError(
            f"instance {instance.id}: empty neighborhood around topic entities"
        )
    absg = abstract(neighborhood, instance.topic_entities)
    graph = prop_graph_from_abstract(absg)
    q_vec = encoder.encode(instance.question, kind="question")
    rel_vecs = encode_graph_relations(graph, kg, encoder)
    scores = selection_scores(graph, q_vec, rel_vecs, params, score_mode)

    ranked = rank_abstract_nodes(scores)
    selected = ranked[:top_k]
    entities = ground(absg, selected) | set(instance.topic_entities)
    if connect_paths:
        parent = _bfs_parents(neighborhood, instance.topic_entities)
        entities |= _connecting_entities(parent, sorted(entities))
    subgraph = kg.induced_subgraph(entities)

    coverage = None
    if instance.answers:
        coverage = bool(instance.answers & entities)
    return RetrievalResult(
        question_id=instance.id,
        subgraph=subgraph,
        selected_nodes=[(i, float(scores[i])) for i in selected],
        abstract_graph=absg,
        coverage=coverage,
    )


def answer(
    instance: QAInstance,
    retrieval: RetrievalResult | Subgraph,
    params: ModelParams,
    encoder,
    kg: KnowledgeGraph,
    top_n: int = 10,
) -> list[tuple[EntityId, float]]:
    """Rank non-topic entities of the retrieved subgraph by the reasoning
    model's final match scores (ties by ascending entity id)."""
    subgraph = retrieval.subgraph if isinstance(retrieval, RetrievalResult) else retrieval
    if subgraph.num_entities == 0:
        raise ValueError(f"instance {instance.id}: empty retrieved subgraph")
    topics = [t for t in instance.topic_entities if t in set(subgraph.entities)]
    if not topics:
        raise ValueError(f"instance {instance.id}: no topic entity in subgraph")

    graph = prop_graph_from_subgraph(subgraph, topics)
    q_vec = encoder.encode(instance.question, kind="question")
    rel_vecs = encode_graph_relations(graph, kg, encoder)
    scores = reason_scores(graph, q_vec, rel_vecs, params)

    topic_set = set(topics)
    index = {e: i for i, e in enumerate(subgraph.entities)}
    ranked = sorted(
        (e for e in subgraph.entities if e not in topic_set),
        key=lambda e: (-scores[index[e]], e),
    )
    return [(e, float(scores[index[e]])) for e in ranked[:top_n]]
