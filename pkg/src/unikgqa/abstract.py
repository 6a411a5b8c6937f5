"""Abstract-subgraph reduction.

Entities that hang off the same (head, relation) prefix are merged into a
single abstract node, shrinking the retrieval search space while keeping
every original triple representable. Merging runs in exactly two passes:
tails first, then heads that share (relation, abstract tail). Topic
entities are exempt from merging so the score initialization stays
well-defined. Node identity is the member set, so a merged head group
that happens to equal an existing tail group reuses its node.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .kg import EntityId, KnowledgeGraph, RelationId, Subgraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AbstractNode:
    id: int
    members: frozenset[EntityId]

    def __post_init__(self):
        if not self.members:
            raise ValueError("abstract node must have at least one member")


class AbstractTriple(NamedTuple):
    head: int
    relation: RelationId
    tail: int


@dataclass(frozen=True)
class AbstractSubgraph:
    nodes: tuple[AbstractNode, ...]
    triples: tuple[AbstractTriple, ...]
    topic_node_ids: tuple[int, ...]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def members(self, node_id: int) -> frozenset[EntityId]:
        if not (0 <= node_id < len(self.nodes)):
            raise KeyError(f"unknown abstract node id: {node_id}")
        return self.nodes[node_id].members


def abstract(subgraph: Subgraph, topics: Iterable[EntityId]) -> AbstractSubgraph:
    """Reduce ``subgraph`` to its abstract form.

    Pass 1 groups triples by (head, relation) and makes one abstract node
    from each group's tails. Pass 2 merges heads that share (relation,
    abstract tail). Topic entities always stay singleton nodes. Every
    entity of the subgraph is a member of at least one node, and every
    original triple is covered by some abstract triple.
    """
    topics = set(topics)
    if subgraph.num_entities == 0:
        raise ValueError("cannot abstract an empty subgraph")
    missing = topics - set(subgraph.entities)
    if missing:
        raise ValueError(f"topic entities not in subgraph: {sorted(missing)}")

    node_ids: dict[frozenset[int], int] = {}
    nodes: list[AbstractNode] = []

    def intern(members: frozenset[int]) -> int:
        if members not in node_ids:
            node_ids[members] = len(nodes)
            nodes.append(AbstractNode(len(nodes), members))
        return node_ids[members]

    def split_topics(group: set[int]) -> list[frozenset[int]]:
        parts = [frozenset([e]) for e in sorted(group & topics)]
        rest = group - topics
        if rest:
            parts.append(frozenset(rest))
        return parts

    # pass 1: merge tails per (head, relation) prefix
    by_prefix: dict[tuple[int, int], set[int]] = {}
    for tr in subgraph.triples:
        by_prefix.setdefault((tr.head, tr.relation), set()).add(tr.tail)

    intermediate: list[tuple[int, int, int]] = []  # (head entity, relation, tail node)
    for (head, relation) in sorted(by_prefix):
        for part in split_topics(by_prefix[(head, relation)]):
            intermediate.append((head, relation, intern(part)))

    # pass 2: merge heads per (relation, abstract tail)
    by_suffix: dict[tuple[int, int], set[int]] = {}
    for head, relation, tail_node in intermediate:
        by_suffix.setdefault((relation, tail_node), set()).add(head)

    triples: set[AbstractTriple] = set()
    for (relation, tail_node) in sorted(by_suffix):
        for part in split_topics(by_suffix[(relation, tail_node)]):
            triples.add(AbstractTriple(intern(part), relation, tail_node))

    # entities untouched by any triple (isolated topics, typically)
    covered = set()
    for node in nodes:
        covered |= node.members
    for e in sorted(set(subgraph.entities) - covered):
        intern(frozenset([e]))

    topic_ids = tuple(intern(frozenset([t])) for t in sorted(topics))
    return AbstractSubgraph(tuple(nodes), tuple(sorted(triples)), topic_ids)


def ground(abs_graph: AbstractSubgraph, node_ids: Iterable[int]) -> set[EntityId]:
    """Union of member sets of the given abstract nodes."""
    out: set[EntityId] = set()
    for nid in node_ids:
        out |= abs_graph.members(nid)
    return out


def ground_truth_vector(
    abs_graph: AbstractSubgraph, answers: Iterable[EntityId]
) -> np.ndarray | None:
    """Target distribution over abstract nodes: uniform over the nodes
    containing at least one answer entity. Returns None when no node
    contains an answer (the instance must be skipped in training)."""
    answers = set(answers)
    hit = np.array(
        [1.0 if node.members & answers else 0.0 for node in abs_graph.nodes]
    )
    total = hit.sum()
    if total == 0:
        return None
    return hit / total


def answer_node_ids(abs_graph: AbstractSubgraph, answers: Iterable[EntityId]) -> set[int]:
    answers = set(answers)
    return {node.id for node in abs_graph.nodes if node.members & answers}


def dump_abstract_jsonl(
    path: str,
    items: Sequence[tuple[str, AbstractSubgraph]],
    graph: KnowledgeGraph,
) -> None:
    """Debugging dump: one line per question with node member labels and
    abstract triples."""
    with open(path, "w", encoding="utf-8") as f:
        for qid, absg in items:
            f.write(json.dumps({
                "id": qid,
                "nodes": [
                    {"id": n.id, "members": sorted(graph.entity_labels[e] for e in n.members)}
                    for n in absg.nodes
                ],
                "triples": [
                    [t.head, graph.relation_labels[t.relation], t.tail]
                    for t in absg.triples
                ],
                "topic_nodes": list(absg.topic_node_ids),
            }) + "\n")
