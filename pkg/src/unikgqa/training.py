"""Three-phase parameter learning.

Phase 1 pre-trains the text encoder contrastively on question/relation
pairs mined from shortest topic-to-answer paths (weak supervision), then
freezes it. Phase 2 fine-tunes the propagation parameters of the
retrieval model against KL targets on abstract subgraphs. Phase 3 copies
those parameters into the reasoning model and fine-tunes them on
retrieved (original-entity) subgraphs.

All gradients are hand-derived; the optimizer is AdamW with decoupled
weight decay. Runs are deterministic for a fixed seed on a single
thread.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .abstract import abstract, ground_truth_vector
from .encoders import ToyEncoder
from .kg import KnowledgeGraph, QAInstance, Subgraph
from .model import (
    ModelParams,
    PropagationGraph,
    backward,
    encode_graph_relations,
    forward_trace,
    prop_graph_from_abstract,
    prop_graph_from_subgraph,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    temperature: float = 0.05
    batch_size: int = 40
    negatives_per_positive: int = 1
    lr_encoder: float = 1e-5
    lr_model: float = 5e-4
    epochs_pretrain: int = 10
    epochs_retrieval: int = 20
    epochs_reasoning: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    kl_target_first: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.negatives_per_positive < 0:
            raise ValueError("negatives_per_positive must be >= 0")


class AdamW:
    """Adaptive moment estimation with decoupled weight decay over a
    fixed set of named arrays; update order is the declaration order."""

    def __init__(self, named_shapes: Sequence[tuple[str, tuple]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros(shape) for name, shape in named_shapes}
        self.v = {name: np.zeros(shape) for name, shape in named_shapes}

    def step(self, named_params: Sequence[tuple[str, np.ndarray]],
             named_grads: Sequence[tuple[str, np.ndarray]]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, arr), (gname, g) in zip(named_params, named_grads):
            if name != gname:
                raise ValueError(f"parameter/gradient mismatch: {name} vs {gname}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            arr -= self.lr * (update + self.weight_decay * arr)


# -- KL loss -------------------------------------------------------------------


def kl_loss(
    s_pred: np.ndarray, s_target: np.ndarray, target_first: bool = True
) -> tuple[float, np.ndarray]:
    """KL divergence between prediction and target distributions plus its
    gradient with respect to the prediction's pre-softmax logits.

    ``target_first`` gives KL(target || pred), whose logit gradient is
    the classic ``pred - target``. The reversed direction KL(pred ||
    target) is available for comparison but diverges whenever the target
    has zeros outside the prediction's support, which sparse answer
    targets always do.
    """
    s_pred = np.asarray(s_pred, dtype=np.float64)
    s_target = np.asarray(s_target, dtype=np.float64)
    if s_pred.shape != s_target.shape:
        raise ValueError(f"shape mismatch: {s_pred.shape} vs {s_target.shape}")

    if target_first:
        support = s_target > 0
        if np.any(s_pred[support] <= 0):
            raise ValueError("prediction has zero mass on target support")
        terms = np.zeros_like(s_target)
        terms[support] = s_target[support] * (
            np.log(s_target[support]) - np.log(s_pred[support])
        )
        return float(terms.sum()), s_pred - s_target

    support = s_pred > 0
    if np.any(s_target[support] <= 0):
        raise ValueError("target has zero mass on prediction support")
    ratio = np.zeros_like(s_pred)
    ratio[support] = np.log(s_pred[support]) - np.log(s_target[support])
    loss = float((s_pred[support] * ratio[support]).sum())
    grad_scores = ratio + 1.0
    grad_logits = s_pred * (grad_scores - np.dot(grad_scores, s_pred))
    return loss, grad_logits


# -- contrastive pre-training --------------------------------------------------


@dataclass(frozen=True)
class QRPair:
    question: str
    positive_relation: int
    instance_id: str


@dataclass(frozen=True)
class RelevanceRecord:
    instance_id: str
    question: str
    relevant: frozenset[int]


def build_relevance_records(
    kg: KnowledgeGraph,
    instances: Iterable[QAInstance],
    use_inverse: bool = True,
) -> list[RelevanceRecord]:
    """Weak supervision: the relations on shortest topic-to-answer paths
    of each instance. Instances with no reachable answer are dropped."""
    records = []
    dropped = 0
    for inst in instances:
        relevant = kg.shortest_path_relations(inst, use_inverse=use_inverse)
        if relevant:
            records.append(RelevanceRecord(inst.id, inst.question, frozenset(relevant)))
        else:
            dropped += 1
    if dropped:
        log.info("dropped %d instances with no topic-to-answer path", dropped)
    return records


def sample_qr_pairs(
    records: Sequence[RelevanceRecord], rng: np.random.Generator
) -> list[QRPair]:
    return [
        QRPair(rec.question, int(rng.choice(sorted(rec.relevant))), rec.instance_id)
        for rec in records
    ]


def _cosine_matrix(q_vecs: np.ndarray, c_vecs: np.ndarray):
    qn = np.maximum(np.linalg.norm(q_vecs, axis=1), 1e-12)
    cn = np.maximum(np.linalg.norm(c_vecs, axis=1), 1e-12)
    sims = (q_vecs @ c_vecs.T) / np.outer(qn, cn)
    return sims, qn, cn


def contrastive_batch(
    encoder,
    kg: KnowledgeGraph,
    questions: Sequence[str],
    positives: Sequence[int],
    negatives: Sequence[Sequence[int]],
    temperature: float,
    grad_table: np.ndarray | None = None,
) -> float:
    """In-batch contrastive loss over cosine similarities.

    Candidates are every instance's positive plus its sampled negatives;
    for instance i, candidates sharing the exact relation of its own
    positive are excluded from the denominator (they are not negatives
    for i). Optionally accumulates the encoder-table gradient.
    """
    m = len(questions)
    cand_rels = list(positives)
    for negs in negatives:
        cand_rels.extend(negs)

    q_vecs = np.array([encoder.encode(q, kind="question") for q in questions])
    cand_labels = [kg.relation_labels[r] for r in cand_rels]
    c_vecs = np.array(
        [encoder.encode(lbl, kind="relation") for lbl in cand_labels]
    )

    sims, qn, cn = _cosine_matrix(q_vecs, c_vecs)
    logits = sims / temperature

    cand_rel_arr = np.array(cand_rels)
    pos_rel_arr = np.array(positives)
    include = cand_rel_arr[None, :] != pos_rel_arr[:, None]
    include[np.arange(m), np.arange(m)] = True  # own positive always counts

    masked = np.where(include, logits, -np.inf)
    row_max = masked.max(axis=1)
    exp = np.exp(masked - row_max[:, None])
    denom = exp.sum(axis=1)
    log_probs = masked - row_max[:, None] - np.log(denom)[:, None]
    losses = -log_probs[np.arange(m), np.arange(m)]
    loss = float(losses.mean())

    if grad_table is not None:
        probs = exp / denom[:, None]
        d_logits = probs.copy()
        d_logits[np.arange(m), np.arange(m)] -= 1.0
        d_logits /= m
        d_sims = d_logits / temperature

        q_hat = q_vecs / qn[:, None]
        c_hat = c_vecs / cn[:, None]
        weighted = (d_sims * sims).sum(axis=1)
        d_q = (d_sims @ c_hat - weighted[:, None] * q_hat) / qn[:, None]
        weighted_c = (d_sims * sims).sum(axis=0)
        d_c = (d_sims.T @ q_hat - weighted_c[:, None] * c_hat) / cn[:, None]

        for i, question in enumerate(questions):
            encoder.accumulate_grad(question, "question", d_q[i], grad_table)
        for j, label in enumerate(cand_labels):
            encoder.accumulate_grad(label, "relation", d_c[j], grad_table)
    return loss


def pretrain_matching(
    records: Sequence[RelevanceRecord],
    kg: KnowledgeGraph,
    encoder: ToyEncoder,
    config: TrainConfig,
) -> list[dict]:
    """Contrastive pre-training of the encoder; freezes it when done."""
    if not getattr(encoder, "trainable", False):
        raise ValueError("pre-training requires a trainable encoder backend")
    if not records:
        raise ValueError("no training records with usable supervision")

    rng = np.random.default_rng(config.seed)
    all_relations = np.arange(kg.num_relations)
    optimizer = AdamW(
        [("table", encoder.table.shape)], lr=config.lr_encoder,
        beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )

    history = []
    for epoch in range(1, config.epochs_pretrain + 1):
        started = time.perf_counter()
        order = rng.permutation(len(records))
        pair_list = sample_qr_pairs([records[i] for i in order], rng)
        epoch_losses = []
        for lo in range(0, len(pair_list), config.batch_size):
            batch = pair_list[lo:lo + config.batch_size]
            questions = [p.question for p in batch]
            positives = [p.positive_relation for p in batch]
            negatives = []
            for pair, rec_idx in zip(batch, order[lo:lo + config.batch_size]):
                forbidden = records[rec_idx].relevant
                pool = np.array([r for r in all_relations if r not in forbidden])
                if pool.size == 0 or config.negatives_per_positive == 0:
                    negatives.append([])
                else:
                    negatives.append([
                        int(r) for r in rng.choice(
                            pool, size=config.negatives_per_positive, replace=True
                        )
                    ])
            grad = np.zeros_like(encoder.table)
            loss = contrastive_batch(
                encoder, kg, questions, positives, negatives,
                config.temperature, grad_table=grad,
            )
            epoch_losses.append(loss)
            optimizer.step([("table", encoder.table)], [("table", grad)])
            encoder.invalidate_cache()
        history.append({
            "phase": "pretrain",
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "valid_hits1": None,
            "seconds": time.perf_counter() - started,
        })
    encoder.freeze()
    return history


def pair_separation(
    records: Sequence[RelevanceRecord],
    kg: KnowledgeGraph,
    encoder,
    rng: np.random.Generator,
) -> list[float]:
    """sim(q, r+) - sim(q, r-) for one sampled pair per record."""
    gaps = []
    all_relations = np.arange(kg.num_relations)
    for rec in records:
        positive = int(rng.choice(sorted(rec.relevant)))
        pool = np.array([r for r in all_relations if r not in rec.relevant])
        if pool.size == 0:
            continue
        negative = int(rng.choice(pool))
        q = encoder.encode(rec.question, kind="question")
        rp = encoder.encode(kg.relation_labels[positive], kind="relation")
        rn = encoder.encode(kg.relation_labels[negative], kind="relation")

        def cos(a, b):
            return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12))

        gaps.append(cos(q, rp) - cos(q, rn))
    return gaps


# -- KL fine-tuning ------------------------------------------------------------


@dataclass
class CompiledInstance:
    """A training instance reduced to pure numerics."""

    qid: str
    graph: PropagationGraph
    q_vec: np.ndarray
    rel_vecs: np.ndarray
    target: np.ndarray
    gold_nodes: frozenset[int]
    exclude_nodes: frozenset[int]


def compile_retrieval_instances(
    instances: Sequence[QAInstance],
    kg: KnowledgeGraph,
    encoder,
    max_hops: int,
) -> tuple[list[CompiledInstance], int]:
    """Abstract-subgraph instances with answer-node targets; instances
    whose abstract graph holds no answer are skipped, not retargeted."""
    compiled = []
    skipped = 0
    for inst in instances:
        sub = kg.k_hop_subgraph(inst.topic_entities, max_hops)
        if sub.num_triples == 0:
            skipped += 1
            continue
        absg = abstract(sub, inst.topic_entities)
        target = ground_truth_vector(absg, inst.answers)
        if target is None:
            skipped += 1
            continue
        graph = prop_graph_from_abstract(absg)
        compiled.append(CompiledInstance(
            qid=inst.id,
            graph=graph,
            q_vec=encoder.encode(inst.question, kind="question"),
            rel_vecs=encode_graph_relations(graph, kg, encoder),
            target=target,
            gold_nodes=frozenset(
                n.id for n in absg.nodes if n.members & inst.answers
            ),
            exclude_nodes=frozenset(absg.topic_node_ids),
        ))
    return compiled, skipped


def compile_reasoning_instances(
    instances: Sequence[QAInstance],
    subgraphs: dict[str, Subgraph],
    kg: KnowledgeGraph,
    encoder,
) -> tuple[list[CompiledInstance], int]:
    """Entity-level instances on retrieved subgraphs; target is uniform
    over the answers present in the subgraph."""
    compiled = []
    skipped = 0
    for inst in instances:
        sub = subgraphs.get(inst.id)
        if sub is None or sub.num_entities == 0:
            skipped += 1
            continue
        present = [e for e in sub.entities if e in inst.answers]
        if not present:
            skipped += 1
            continue
        topics = [t for t in inst.topic_entities if t in set(sub.entities)]
        graph = prop_graph_from_subgraph(sub, topics)
        index = {e: i for i, e in enumerate(sub.entities)}
        target = np.zeros(graph.num_nodes)
        target[[index[e] for e in present]] = 1.0 / len(present)
        compiled.append(CompiledInstance(
            qid=inst.id,
            graph=graph,
            q_vec=encoder.encode(inst.question, kind="question"),
            rel_vecs=encode_graph_relations(graph, kg, encoder),
            target=target,
            gold_nodes=frozenset(index[e] for e in present),
            exclude_nodes=frozenset(index[t] for t in topics),
        ))
    return compiled, skipped


def instance_loss_and_grads(
    inst: CompiledInstance, params: ModelParams, target_first: bool = True
) -> tuple[float, ModelParams]:
    trace = forward_trace(inst.graph, inst.q_vec, inst.rel_vecs, params)
    loss, grad_logits = kl_loss(
        trace.states[-1].scores, inst.target, target_first=target_first
    )
    grads = backward(trace, params, grad_logits=grad_logits)
    return loss, grads


def hits_at_1_over(compiled: Sequence[CompiledInstance], params: ModelParams) -> float:
    """Fraction whose top non-topic node is a gold node."""
    if not compiled:
        return 0.0
    hits = 0
    for inst in compiled:
        trace = forward_trace(inst.graph, inst.q_vec, inst.rel_vecs, params)
        scores = trace.states[-1].scores.copy()
        scores[list(inst.exclude_nodes)] = -np.inf
        if int(np.argmax(scores)) in inst.gold_nodes:
            hits += 1
    return hits / len(compiled)


def finetune(
    compiled: Sequence[CompiledInstance],
    params: ModelParams,
    config: TrainConfig,
    epochs: int,
    phase: str,
    valid: Sequence[CompiledInstance] | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Mini-batch KL fine-tuning of the propagation parameters.

    Mutates ``params`` in place epoch by epoch and returns the best
    parameters by validation hits@1 (the final ones when no validation
    set is given), along with the per-epoch history.
    """
    if not compiled:
        raise ValueError("no trainable instances (all were skipped?)")
    rng = np.random.default_rng(config.seed)
    named_shapes = [(name, arr.shape) for name, arr in params.named_arrays()]
    optimizer = AdamW(
        named_shapes, lr=config.lr_model, beta1=config.beta1,
        beta2=config.beta2, eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )

    history = []
    best = params.copy()
    best_hits = -1.0
    if valid:
        best_hits = hits_at_1_over(valid, params)
        history.append({
            "phase": phase, "epoch": 0, "loss": None,
            "valid_hits1": best_hits, "seconds": 0.0,
        })

    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(compiled))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [compiled[i] for i in order[lo:lo + config.batch_size]]
            total = params.zeros_like()
            batch_loss = 0.0
            for inst in batch:
                loss, grads = instance_loss_and_grads(
                    inst, params, target_first=config.kl_target_first
                )
                batch_loss += loss
                for (_, acc), (_, g) in zip(total.named_arrays(), grads.named_arrays()):
                    acc += g
            for _, acc in total.named_arrays():
                acc /= len(batch)
            epoch_losses.append(batch_loss / len(batch))
            optimizer.step(params.named_arrays(), total.named_arrays())

        row = {
            "phase": phase,
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "valid_hits1": None,
            "seconds": time.perf_counter() - started,
        }
        if valid:
            row["valid_hits1"] = hits_at_1_over(valid, params)
            if row["valid_hits1"] > best_hits:
                best_hits = row["valid_hits1"]
                best = params.copy()
        history.append(row)

    if valid and best_hits >= 0:
        return best, history
    return params.copy(), history


def finetune_retrieval(
    instances: Sequence[QAInstance],
    kg: KnowledgeGraph,
    params: ModelParams,
    encoder,
    config: TrainConfig,
    max_hops: int,
    valid_instances: Sequence[QAInstance] | None = None,
) -> tuple[ModelParams, list[dict]]:
    if getattr(encoder, "trainable", False):
        raise ValueError("encoder must be frozen before fine-tuning")
    compiled, skipped = compile_retrieval_instances(instances, kg, encoder, max_hops)
    if skipped:
        log.info("retrieval fine-tuning: skipped %d uncovered instances", skipped)
    valid = None
    if valid_instances:
        valid, _ = compile_retrieval_instances(valid_instances, kg, encoder, max_hops)
    return finetune(compiled, params, config, config.epochs_retrieval,
                    "train-retriever", valid)


def finetune_reasoning(
    instances: Sequence[QAInstance],
    subgraphs: dict[str, Subgraph],
    kg: KnowledgeGraph,
    params: ModelParams,
    encoder,
    config: TrainConfig,
    valid_instances: Sequence[QAInstance] | None = None,
    valid_subgraphs: dict[str, Subgraph] | None = None,
) -> tuple[ModelParams, list[dict], dict]:
    if getattr(encoder, "trainable", False):
        raise ValueError("encoder must be frozen before fine-tuning")
    compiled, skipped = compile_reasoning_instances(instances, subgraphs, kg, encoder)
    coverage_report = {
        "trainable": len(compiled),
        "skipped_uncovered": skipped,
    }
    if skipped:
        log.info("reasoning fine-tuning: skipped %d uncovered instances", skipped)
    valid = None
    if valid_instances and valid_subgraphs is not None:
        valid, _ = compile_reasoning_instances(
            valid_instances, valid_subgraphs, kg, encoder
        )
    best, history = finetune(compiled, params, config, config.epochs_reasoning,
                             "train-reasoner", valid)
    return best, history, coverage_report


def transfer_params(source: ModelParams, num_steps: int | None = None,
                    feat_dim: int | None = None, enc_dim: int | None = None) -> ModelParams:
    """Deep-copy retrieval parameters to seed the reasoning model.

    The optional expected dimensions assert that the two models share one
    architecture; mismatches are an error, not a silent re-init.
    """
    if num_steps is not None and num_steps != source.num_steps:
        raise ValueError(
            f"step count mismatch: source has {source.num_steps}, expected {num_steps}"
        )
    if feat_dim is not None and feat_dim != source.feat_dim:
        raise ValueError(
            f"feature dim mismatch: source has {source.feat_dim}, expected {feat_dim}"
        )
    if enc_dim is not None and enc_dim != source.enc_dim:
        raise ValueError(
            f"encoder dim mismatch: source has {source.enc_dim}, expected {enc_dim}"
        )
    return source.copy()
