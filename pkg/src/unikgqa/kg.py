"""In-memory knowledge graph store.

Triples are loaded from TSV and closed under inversion: for every stored
``<head, relation, tail>`` the triple ``<tail, inverse(relation), head>``
is stored as well. Relation ids are allocated in pairs so that
``inverse(r) == r ^ 1``. After closure, the incoming neighborhood of an
entity (all triples whose tail is that entity) captures both edge
directions, which is the only adjacency view the propagation model needs.

The graph is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
import logging
import random
from collections import deque
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

EntityId = int
RelationId = int

INVERSE_LABEL_PREFIX = "inverse "


class Triple(NamedTuple):
    head: EntityId
    relation: RelationId
    tail: EntityId


class GraphFormatError(ValueError):
    """Raised for malformed triple files or unresolvable labels."""


def inverse_relation(r: RelationId) -> RelationId:
    """Paired inverse id; an involution by construction."""
    return r ^ 1


def is_inverse_relation(r: RelationId) -> bool:
    return bool(r & 1)


@dataclass(frozen=True)
class Subgraph:
    """An induced fragment of a knowledge graph: entity ids plus the
    triples among them (in the same id space as the parent graph)."""

    entities: tuple[EntityId, ...]
    triples: tuple[Triple, ...]

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_triples(self) -> int:
        return len(self.triples)


class KnowledgeGraph:
    """Immutable triple store with inverse closure and adjacency indexes."""

    def __init__(
        self,
        entity_labels: Sequence[str],
        relation_labels: Sequence[str],
        triples: Iterable[tuple[int, int, int]],
    ):
        """Build from already-resolved ids.

        ``relation_labels`` must list original relations only; inverses are
        materialized here (ids interleaved: original 2k, inverse 2k+1).
        """
        self.entity_labels: tuple[str, ...] = tuple(entity_labels)
        self.entity_ids: dict[str, int] = {lbl: i for i, lbl in enumerate(self.entity_labels)}
        if len(self.entity_ids) != len(self.entity_labels):
            raise GraphFormatError("duplicate entity labels")

        rel_labels: list[str] = []
        for lbl in relation_labels:
            rel_labels.append(lbl)
            rel_labels.append(INVERSE_LABEL_PREFIX + lbl)
        self.relation_labels: tuple[str, ...] = tuple(rel_labels)
        self.relation_ids: dict[str, int] = {lbl: i for i, lbl in enumerate(rel_labels)}
        if len(self.relation_ids) != len(rel_labels):
            raise GraphFormatError(
                "relation label collides with a generated inverse label"
            )

        closed: set[Triple] = set()
        for h, r, t in triples:
            closed.add(Triple(h, r, t))
            closed.add(Triple(t, inverse_relation(r), h))
        self.triples: tuple[Triple, ...] = tuple(sorted(closed))

        n = len(self.entity_labels)
        incoming: list[list[int]] = [[] for _ in range(n)]
        outgoing: list[list[int]] = [[] for _ in range(n)]
        for idx, tr in enumerate(self.triples):
            if not (0 <= tr.head < n and 0 <= tr.tail < n):
                raise GraphFormatError(f"triple references unknown entity id: {tr}")
            incoming[tr.tail].append(idx)
            outgoing[tr.head].append(idx)
        self._incoming = tuple(tuple(ix) for ix in incoming)
        self._outgoing = tuple(tuple(ix) for ix in outgoing)

    # -- basic queries ----------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self.entity_labels)

    @property
    def num_relations(self) -> int:
        """Relation count including materialized inverses."""
        return len(self.relation_labels)

    def entity_id(self, label: str) -> EntityId:
        try:
            return self.entity_ids[label]
        except KeyError:
            raise KeyError(f"unknown entity label: {label!r}") from None

    def check_entity(self, e: EntityId) -> None:
        if not (0 <= e < self.num_entities):
            raise KeyError(f"unknown entity id: {e}")

    def neighborhood(self, e: EntityId) -> tuple[Triple, ...]:
        """All triples with tail ``e`` in the inverse-closed graph (both
        original directions, by closure)."""
        self.check_entity(e)
        return tuple(self.triples[i] for i in self._incoming[e])

    def out_triples(self, e: EntityId) -> tuple[Triple, ...]:
        self.check_entity(e)
        return tuple(self.triples[i] for i in self._outgoing[e])

    # -- subgraph extraction ----------------------------------------------

    def induced_subgraph(self, entities: Iterable[EntityId]) -> Subgraph:
        """All stored triples whose endpoints both lie in ``entities``."""
        ents = set(entities)
        for e in ents:
            self.check_entity(e)
        kept = []
        for e in ents:
            for i in self._outgoing[e]:
                tr = self.triples[i]
                if tr.tail in ents:
                    kept.append(tr)
        return Subgraph(tuple(sorted(ents)), tuple(sorted(set(kept))))

    def k_hop_subgraph(self, topics: Iterable[EntityId], k: int) -> Subgraph:
        """Induced subgraph over entities within distance ``k`` of any
        topic entity (distances in the inverse-closed graph)."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        topics = list(topics)
        if not topics:
            raise ValueError("at least one topic entity required")
        dist = self._bfs(topics, max_depth=k)
        return self.induced_subgraph(dist.keys())

    def _bfs(
        self,
        sources: Sequence[EntityId],
        max_depth: int | None = None,
        reverse: bool = False,
        original_relations_only: bool = False,
    ) -> dict[EntityId, int]:
        """Multi-source BFS distances. ``reverse`` walks edges tail->head;
        ``original_relations_only`` ignores materialized inverse triples."""
        for s in sources:
            self.check_entity(s)
        dist: dict[EntityId, int] = {s: 0 for s in sources}
        queue = deque(sources)
        index = self._incoming if reverse else self._outgoing
        while queue:
            u = queue.popleft()
            d = dist[u]
            if max_depth is not None and d >= max_depth:
                continue
            for i in index[u]:
                tr = self.triples[i]
                if original_relations_only and is_inverse_relation(tr.relation):
                    continue
                v = tr.head if reverse else tr.tail
                if v not in dist:
                    dist[v] = d + 1
                    queue.append(v)
        return dist

    # -- weak supervision ---------------------------------------------------

    def shortest_path_relations(
        self, instance: "QAInstance", use_inverse: bool = True
    ) -> set[RelationId]:
        """Relations on any shortest topic->answer path, unioned over all
        (topic, answer) pairs.

        A triple <u, r, v> lies on a shortest path from s to a exactly when
        dist(s, u) + 1 + dist(v, a) == dist(s, a), so two BFS sweeps per
        pair enumerate every minimal-length path's relations without
        materializing the paths. Unreachable pairs contribute nothing.

        ``use_inverse=False`` restricts paths to original (non-inverse)
        relations.
        """
        relations: set[RelationId] = set()
        for s in sorted(instance.topic_entities):
            dist_from = self._bfs([s], original_relations_only=not use_inverse)
            for a in sorted(instance.answers):
                self.check_entity(a)
                if a not in dist_from:
                    log.debug(
                        "instance %s: answer %s unreachable from topic %s",
                        instance.id, self.entity_labels[a], self.entity_labels[s],
                    )
                    continue
                total = dist_from[a]
                if total == 0:
                    continue
                dist_to = self._bfs(
                    [a], reverse=True, original_relations_only=not use_inverse
                )
                for tr in self.triples:
                    if use_inverse or not is_inverse_relation(tr.relation):
                        du = dist_from.get(tr.head)
                        dv = dist_to.get(tr.tail)
                        if du is not None and dv is not None and du + 1 + dv == total:
                            relations.add(tr.relation)
        return relations

    # -- PPR baseline -------------------------------------------------------

    def ppr_scores(
        self,
        topics: Sequence[EntityId],
        damping: float = 0.85,
        tol: float = 1e-8,
        max_iter: int = 200,
    ) -> np.ndarray:
        """Personalized PageRank by power iteration, seeded uniformly on
        the topic entities. Dangling mass is returned to the seed so the
        scores stay a probability distribution."""
        if not 0.0 < damping < 1.0:
            raise ValueError(f"damping must be in (0, 1), got {damping}")
        topics = list(topics)
        if not topics:
            raise ValueError("at least one topic entity required")
        for t in topics:
            self.check_entity(t)

        n = self.num_entities
        seed = np.zeros(n)
        seed[list(set(topics))] = 1.0 / len(set(topics))

        out_deg = np.array([len(ix) for ix in self._outgoing], dtype=float)
        heads = np.array([tr.head for tr in self.triples], dtype=np.intp)
        tails = np.array([tr.tail for tr in self.triples], dtype=np.intp)

        p = seed.copy()
        for _ in range(max_iter):
            spread = np.zeros(n)
            weights = np.where(out_deg[heads] > 0, p[heads] / out_deg[heads], 0.0)
            np.add.at(spread, tails, weights)
            dangling = p[out_deg == 0].sum()
            new_p = (1.0 - damping) * seed + damping * (spread + dangling * seed)
            if np.abs(new_p - p).sum() < tol:
                p = new_p
                break
            p = new_p
        return p

    def ppr_retrieve(
        self,
        topics: Sequence[EntityId],
        damping: float = 0.85,
        top_n: int = 10,
    ) -> Subgraph:
        """Induced subgraph on the ``top_n`` highest-PPR entities. Topics
        are always kept; ties break by ascending entity id."""
        topics = list(topics)
        if top_n < len(set(topics)):
            raise ValueError("top_n must be at least the number of topics")
        scores = self.ppr_scores(topics, damping=damping)
        order = sorted(range(self.num_entities), key=lambda e: (-scores[e], e))
        kept = set(topics)
        for e in order:
            if len(kept) >= top_n:
                break
            kept.add(e)
        return self.induced_subgraph(kept)


# -- QA instances ------------------------------------------------------------


@dataclass(frozen=True)
class QAInstance:
    id: str
    question: str
    topic_entities: frozenset[EntityId]
    answers: frozenset[EntityId]

    def __post_init__(self):
        if not self.topic_entities:
            raise ValueError(f"instance {self.id}: topic entities must be nonempty")


def load_graph(
    triples_path: str,
    extra_entity_labels: Sequence[str] = (),
) -> KnowledgeGraph:
    """Load a TSV triple file (``head<TAB>relation<TAB>tail`` per line).

    Duplicate lines are deduplicated; inverse closure is applied.
    ``extra_entity_labels`` admits entities that appear in no triple.
    """
    ent_labels: list[str] = []
    ent_seen: dict[str, int] = {}
    rel_labels: list[str] = []
    rel_seen: dict[str, int] = {}

    def ent(label: str) -> int:
        if label not in ent_seen:
            ent_seen[label] = len(ent_labels)
            ent_labels.append(label)
        return ent_seen[label]

    def rel(label: str) -> int:
        if label not in rel_seen:
            rel_seen[label] = len(rel_labels)
            rel_labels.append(label)
        return rel_seen[label]

    raw: list[tuple[int, int, int]] = []
    with open(triples_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise GraphFormatError(
                    f"{triples_path}:{lineno}: expected head<TAB>relation<TAB>tail, "
                    f"got {line!r}"
                )
            h, r, t = parts
            raw.append((ent(h), rel(r), ent(t)))
    if not raw:
        raise GraphFormatError(f"{triples_path}: no triples found")

    for label in extra_entity_labels:
        ent(label)

    # original relation id k becomes 2k once inverses are interleaved
    triples = [(h, 2 * r, t) for h, r, t in raw]
    return KnowledgeGraph(ent_labels, rel_labels, triples)


def load_instances(questions_path: str, graph: KnowledgeGraph) -> list[QAInstance]:
    """Read questions JSONL and resolve labels against the graph.

    Each line holds ``id``, ``question``, ``topic_entities`` (labels) and
    ``answers`` (labels). Any unresolved label is a hard error listing all
    offenders.
    """
    instances = []
    unresolved: list[str] = []
    with open(questions_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(
                    f"{questions_path}:{lineno}: invalid JSON: {exc}"
                ) from None
            for key in ("id", "question", "topic_entities", "answers"):
                if key not in obj:
                    raise GraphFormatError(
                        f"{questions_path}:{lineno}: missing field {key!r}"
                    )

            def resolve(labels: list[str], kind: str) -> frozenset[int]:
                ids = set()
                for lbl in labels:
                    if lbl in graph.entity_ids:
                        ids.add(graph.entity_ids[lbl])
                    else:
                        unresolved.append(f"line {lineno} ({kind}): {lbl!r}")
                return frozenset(ids)

            topics = resolve(obj["topic_entities"], "topic")
            answers = resolve(obj["answers"], "answer")
            if not unresolved:
                instances.append(
                    QAInstance(str(obj["id"]), str(obj["question"]), topics, answers)
                )
    if unresolved:
        raise GraphFormatError(
            f"{questions_path}: unresolved entity labels: " + "; ".join(unresolved)
        )
    return instances


def write_instances(path: str, instances: Iterable[QAInstance], graph: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps({
                "id": inst.id,
                "question": inst.question,
                "topic_entities": sorted(graph.entity_labels[e] for e in inst.topic_entities),
                "answers": sorted(graph.entity_labels[e] for e in inst.answers),
            }) + "\n")


def random_graph(
    n_entities: int,
    n_relations: int,
    n_triples: int,
    rng: random.Random,
) -> KnowledgeGraph:
    """Uniform random graph for tests and experiments (pre-closure ids)."""
    ent_labels = [f"e{i}" for i in range(n_entities)]
    rel_labels = [f"r{i}" for i in range(n_relations)]
    triples = set()
    while len(triples) < n_triples:
        h = rng.randrange(n_entities)
        t = rng.randrange(n_entities)
        if h == t:
            continue
        r = rng.randrange(n_relations)
        triples.add((h, 2 * r, t))
    return KnowledgeGraph(ent_labels, rel_labels, sorted(triples))
