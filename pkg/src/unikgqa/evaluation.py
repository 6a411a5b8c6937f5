"""Metrics, evaluation reports, and the synthetic benchmark generator.

The metrics follow the usual multi-answer KGQA protocol: hits@1 on the
top-ranked entity, set F1 against the gold answers (prediction set built
by an absolute score threshold), and the answer coverage rate of the
retrieval stage.

The synthetic generator plants relation-path templates in a random
entity pool: each question's topic is wired to its answer through a
dedicated chain of template relations, decoy edges lead from the topic
into other templates' chains, and noise edges add fan-out without ever
touching answers. By construction the only shortest topic-to-answer path
is the planted chain, so weak supervision recovers exactly the template
relations; the generator verifies this before writing anything.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass, field

import numpy as np

from .kg import KnowledgeGraph, QAInstance, write_instances

log = logging.getLogger(__name__)

GREEK = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
    "iota", "kappa", "lambda", "mu", "nu", "xi", "omicron", "pi", "rho",
    "sigma", "tau", "upsilon", "phi", "chi", "psi", "omega",
]


# -- metrics -------------------------------------------------------------------


def hits_at_1(ranked_answers: list, gold: set) -> int:
    """1 when the top-ranked answer is a gold answer."""
    if not ranked_answers or not gold:
        return 0
    return 1 if ranked_answers[0] in gold else 0


def f1_score(predicted: set, gold: set) -> float:
    """Harmonic mean of set precision and recall. Two empty sets agree
    perfectly (1.0); exactly one empty scores 0.0."""
    if not predicted and not gold:
        return 1.0
    if not predicted or not gold:
        return 0.0
    overlap = len(predicted & gold)
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def coverage_rate(flags: list) -> float:
    flags = [bool(f) for f in flags]
    return sum(flags) / len(flags) if flags else 0.0


def threshold_prediction(scored_answers: list[tuple[str, float]], threshold: float) -> set:
    return {label for label, score in scored_answers if score >= threshold}


F1_THRESHOLD_GRID = (0.01, 0.05, 0.1, 0.2, 0.5)


def tune_f1_threshold(
    results: list[dict], gold: dict[str, set], grid=F1_THRESHOLD_GRID
) -> float:
    """Pick the grid threshold with the best macro F1 on validation
    results (ties favor the smaller threshold)."""
    best_t, best_f1 = grid[0], -1.0
    for t in grid:
        scores = [
            f1_score(threshold_prediction(r["answers"], t), gold.get(r["id"], set()))
            for r in results
        ]
        mean = float(np.mean(scores)) if scores else 0.0
        if mean > best_f1:
            best_t, best_f1 = t, mean
    return best_t


@dataclass
class EvalReport:
    per_question: list[dict]
    hits1: float
    macro_f1: float
    coverage: float
    f1_threshold: float
    config_fingerprint: str = ""
    seed: int | None = None
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "aggregates": {
                "hits1": self.hits1,
                "macro_f1": self.macro_f1,
                "coverage": self.coverage,
            },
            "f1_threshold": self.f1_threshold,
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "flags": self.flags,
            "per_question": self.per_question,
        }


def evaluate_results(
    results: list[dict],
    gold: dict[str, set],
    f1_threshold: float = 0.05,
    config_fingerprint: str = "",
    seed: int | None = None,
) -> EvalReport:
    """Score answer-command results (each with ``id``, ranked ``answers``
    as [label, score] pairs, and ``coverage``) against gold answers.

    Aggregates are plain means of the per-question records. Questions
    with an empty ranking or empty gold are scored 0 and counted in
    ``flags``.
    """
    per_question = []
    empty_rankings = 0
    empty_gold = 0
    for r in results:
        gold_set = gold.get(r["id"], set())
        ranked = [label for label, _ in r["answers"]]
        if not ranked:
            empty_rankings += 1
        if not gold_set:
            empty_gold += 1
        hit = hits_at_1(ranked, gold_set)
        f1 = f1_score(threshold_prediction(r["answers"], f1_threshold), gold_set)
        per_question.append({
            "id": r["id"],
            "hit": hit,
            "f1": f1,
            "coverage": bool(r.get("coverage")),
            "subgraph_size": r.get("subgraph_size", 0),
        })
    n = len(per_question)
    return EvalReport(
        per_question=per_question,
        hits1=float(np.mean([q["hit"] for q in per_question])) if n else 0.0,
        macro_f1=float(np.mean([q["f1"] for q in per_question])) if n else 0.0,
        coverage=coverage_rate([q["coverage"] for q in per_question]),
        f1_threshold=f1_threshold,
        config_fingerprint=config_fingerprint,
        seed=seed,
        flags={"empty_rankings": empty_rankings, "empty_gold": empty_gold},
    )


# -- synthetic benchmark -------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    entities: int = 500
    relations: int = 12
    hops: int = 2
    n_train: int = 200
    n_valid: int = 50
    n_test: int = 100
    seed: int = 0
    decoys_per_question: int = 2
    noise_edges_per_topic: int = 1
    noise_edges_per_chain: int = 1

    def __post_init__(self):
        if self.hops not in (1, 2, 3):
            raise ValueError(f"hops must be 1, 2, or 3, got {self.hops}")
        if self.relations < 4:
            raise ValueError(f"need at least 4 relations, got {self.relations}")


@dataclass
class SynthDataset:
    kg: KnowledgeGraph
    train: list[QAInstance]
    valid: list[QAInstance]
    test: list[QAInstance]
    templates: list[tuple[str, ...]]
    config: SynthConfig

    @property
    def splits(self) -> dict[str, list[QAInstance]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def _question_text(relations: list[str], topic: str) -> str:
    """'who is the R2 of the R1 of X' for the chain X -R1-> . -R2-> answer."""
    phrase = topic
    for rel in relations:
        phrase = f"the {rel} of {phrase}"
    return f"who is {phrase}"


def _make_templates(rels: list[str], hops: int) -> list[tuple[str, ...]]:
    """Position-partitioned relation sequences: hop position j draws from
    its own slice of the pool, so a relation name always identifies its
    position along the chain; round s advances later positions by s,
    giving class_size * rounds distinct sequences."""
    class_size = len(rels) // hops
    classes = [rels[j * class_size:(j + 1) * class_size] for j in range(hops)]
    rounds = min(4, class_size) if hops > 1 else 1
    out = []
    for s in range(rounds):
        for k in range(class_size):
            out.append(tuple(classes[j][(k + j * s) % class_size] for j in range(hops)))
    return out


def synth_dataset(config: SynthConfig) -> SynthDataset:
    """Build a deterministic planted-path benchmark.

    Entity budget: one topic per question, ``hops`` chain entities per
    (template, branch), and a pool of noise targets split between topics
    and chains so noise can never shorten a planted path.
    """
    rng = random.Random(config.seed)
    n_questions = config.n_train + config.n_valid + config.n_test

    noise_rel_count = 2 if config.relations - 2 >= config.hops else 0
    if config.relations - noise_rel_count < config.hops:
        raise ValueError(
            f"infeasible config: {config.relations} relations cannot host "
            f"{config.hops}-hop templates"
        )

    rel_names = [
        GREEK[i] if i < len(GREEK) else f"{GREEK[i % len(GREEK)]}{i // len(GREEK)}"
        for i in range(config.relations)
    ]
    base = config.relations - noise_rel_count
    template_rels = _make_templates(rel_names[:base], config.hops)
    noise_rels = rel_names[base:]

    # fit templates and branches (distinct chains per template) into the
    # entity budget left after one topic per question
    budget = config.entities - n_questions
    min_noise = 4 if noise_rels else 0
    per_branch = config.hops  # chain entities, last one is the answer
    max_templates = (budget - min_noise) // per_branch
    if budget < per_branch or max_templates < 1:
        raise ValueError(
            f"infeasible config: {config.entities} entities cannot host "
            f"{n_questions} questions with {config.hops}-hop chains"
        )
    template_rels = template_rels[:max_templates]
    n_templates = len(template_rels)
    branches = max(1, min(10, (budget - min_noise) // (n_templates * per_branch)))
    chain_entities = n_templates * branches * per_branch
    n_noise = config.entities - n_questions - chain_entities
    if n_noise < min_noise:
        raise ValueError(
            f"infeasible config: {config.entities} entities cannot host "
            f"{n_questions} questions with {config.hops}-hop chains"
        )

    labels = [f"ent_{i}" for i in range(config.entities)]
    next_id = iter(range(config.entities))
    topic_ids = [next(next_id) for _ in range(n_questions)]
    chains: dict[tuple[int, int], list[int]] = {}
    for t in range(n_templates):
        for b in range(branches):
            chains[(t, b)] = [next(next_id) for _ in range(per_branch)]
    noise_ids = [next(next_id) for _ in range(n_noise)]
    half = max(1, len(noise_ids) // 2) if noise_ids else 0
    topic_noise_pool = noise_ids[:half]
    chain_noise_pool = noise_ids[half:] or topic_noise_pool

    rel_ids = {name: 2 * i for i, name in enumerate(rel_names)}
    triples: set[tuple[int, int, int]] = set()

    # chain edges: first chain entity is reached from each question topic
    for (t, b), chain in chains.items():
        rels = template_rels[t]
        for j in range(len(chain) - 1):
            triples.add((chain[j], rel_ids[rels[j + 1]], chain[j + 1]))

    instances: list[tuple[str, str, int, int]] = []
    for i, topic in enumerate(topic_ids):
        t = i % n_templates
        b = (i // n_templates) % branches
        chain = chains[(t, b)]
        rels = template_rels[t]
        triples.add((topic, rel_ids[rels[0]], chain[0]))

        # decoys: same position edge into other templates' chains
        others = [x for x in range(n_templates) if x != t]
        rng.shuffle(others)
        for other in others[:config.decoys_per_question]:
            ob = rng.randrange(branches)
            triples.add((topic, rel_ids[template_rels[other][0]], chains[(other, ob)][0]))

        # noise fan-out, never pointing at answers or topics
        for _ in range(config.noise_edges_per_topic):
            if topic_noise_pool and noise_rels:
                triples.add((
                    topic,
                    rel_ids[rng.choice(noise_rels)],
                    rng.choice(topic_noise_pool),
                ))

        answer = chain[-1]
        question = _question_text(list(rels), labels[topic])
        instances.append((f"q{i:04d}", question, topic, answer))

    for (t, b), chain in chains.items():
        for node in chain[:-1]:  # answers stay noise-free
            for _ in range(config.noise_edges_per_chain):
                if chain_noise_pool and noise_rels:
                    triples.add((
                        node,
                        rel_ids[rng.choice(noise_rels)],
                        rng.choice(chain_noise_pool),
                    ))

    kg = KnowledgeGraph(labels, rel_names, sorted(triples))
    qa = [
        QAInstance(qid, question, frozenset([topic]), frozenset([answer]))
        for qid, question, topic, answer in instances
    ]

    _verify_planted_paths(kg, qa, instances, template_rels, rel_ids, n_templates)

    dataset = SynthDataset(
        kg=kg,
        train=qa[:config.n_train],
        valid=qa[config.n_train:config.n_train + config.n_valid],
        test=qa[config.n_train + config.n_valid:],
        templates=[tuple(t) for t in template_rels],
        config=config,
    )
    return dataset


def _verify_planted_paths(kg, qa, instances, template_rels, rel_ids, n_templates):
    """Generation-time oracle: every answer reachable in exactly ``hops``
    steps and weak supervision recovers exactly the planted relations."""
    for i, (inst, (_, _, topic, answer)) in enumerate(zip(qa, instances)):
        t = i % n_templates
        expected = {rel_ids[name] for name in template_rels[t]}
        got = kg.shortest_path_relations(inst)
        if got != expected:
            raise AssertionError(
                f"instance {inst.id}: planted relations {sorted(expected)} "
                f"but shortest paths carry {sorted(got)}"
            )


def write_synth_dataset(dataset: SynthDataset, outdir: str) -> dict[str, str]:
    """TSV triples plus one JSONL file per split; byte-identical for a
    fixed config."""
    os.makedirs(outdir, exist_ok=True)
    paths = {"kg": os.path.join(outdir, "kg.tsv")}
    kg = dataset.kg
    with open(paths["kg"], "w", encoding="utf-8") as f:
        seen = set()
        for tr in kg.triples:
            if tr.relation % 2 == 0:  # original direction only
                line = (
                    f"{kg.entity_labels[tr.head]}\t"
                    f"{kg.relation_labels[tr.relation]}\t"
                    f"{kg.entity_labels[tr.tail]}"
                )
                if line not in seen:
                    seen.add(line)
                    f.write(line + "\n")
    for split, instances in dataset.splits.items():
        paths[split] = os.path.join(outdir, f"{split}.jsonl")
        write_instances(paths[split], instances, kg)
    meta = {
        "config": dataset.config.__dict__,
        "templates": [list(t) for t in dataset.templates],
        "entities": kg.num_entities,
        "relations_with_inverses": kg.num_relations,
        "triples_closed": len(kg.triples),
    }
    paths["meta"] = os.path.join(outdir, "meta.json")
    with open(paths["meta"], "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return paths


def fingerprint(payload: dict) -> str:
    """Stable hash of a resolved configuration for artifact provenance."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
