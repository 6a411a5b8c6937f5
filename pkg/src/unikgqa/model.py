"""The unified node-scoring model.

One architecture serves both stages: per-step semantic matching between
the question vector and each relation vector produces a feature per
relation; those features are aggregated along incoming edges, weighted by
the previous step's node scores; the concatenation of the old node
representation and the aggregate goes through a linear projection; and a
shared score head plus softmax turns representations into a probability
distribution over nodes.

Step 1 is initialization: scores are uniform over the topic nodes, and
node representations are the sigmoid of the summed projected incoming
relation vectors. Propagation runs for steps 2..T, each with its own
projection matrices.

Everything is float64 numpy. Gradients are hand-derived reverse-mode (no
autodiff) and validated against central finite differences in the test
suite. Scoring is pure given frozen parameters, so questions can be
processed concurrently; parameters are only mutated by the training
module.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .abstract import AbstractSubgraph
from .kg import KnowledgeGraph, Subgraph

CHECKPOINT_MAGIC = b"UKQM"


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_backward(s: np.ndarray, grad_s: np.ndarray) -> np.ndarray:
    """d(loss)/d(logits) given s = softmax(logits) and d(loss)/ds."""
    return s * (grad_s - np.dot(grad_s, s))


# -- propagation graph ---------------------------------------------------------


@dataclass(frozen=True)
class PropagationGraph:
    """Uniform graph view the model runs on.

    Nodes are either original entities or abstract nodes; the model does
    not care. Edges are directed head -> tail; ``edge_rel`` indexes into
    ``relation_ids`` (the unique relations of this graph), so relation
    vectors are encoded once and shared across steps.
    """

    num_nodes: int
    edge_head: np.ndarray  # (E,) node index
    edge_rel: np.ndarray   # (E,) index into relation_ids
    edge_tail: np.ndarray  # (E,) node index
    relation_ids: tuple[int, ...]   # global relation ids, one per unique relation
    topic_nodes: tuple[int, ...]
    node_keys: tuple = ()  # entity ids or abstract node ids, for reporting

    @property
    def num_edges(self) -> int:
        return len(self.edge_head)


def _build_prop_graph(
    node_keys: Sequence,
    edges: Sequence[tuple[int, int, int]],
    topic_nodes: Sequence[int],
) -> PropagationGraph:
    rel_ids = tuple(sorted({r for _, r, _ in edges}))
    rel_index = {r: i for i, r in enumerate(rel_ids)}
    if edges:
        head, rel, tail = zip(*((h, rel_index[r], t) for h, r, t in edges))
    else:
        head, rel, tail = (), (), ()
    return PropagationGraph(
        num_nodes=len(node_keys),
        edge_head=np.asarray(head, dtype=np.intp),
        edge_rel=np.asarray(rel, dtype=np.intp),
        edge_tail=np.asarray(tail, dtype=np.intp),
        relation_ids=rel_ids,
        topic_nodes=tuple(sorted(set(topic_nodes))),
        node_keys=tuple(node_keys),
    )


def prop_graph_from_subgraph(subgraph: Subgraph, topics: Sequence[int]) -> PropagationGraph:
    """Nodes are the subgraph's entities (sorted); topics must be present."""
    index = {e: i for i, e in enumerate(subgraph.entities)}
    missing = [t for t in topics if t not in index]
    if missing:
        raise ValueError(f"topic entities not in subgraph: {missing}")
    edges = [(index[tr.head], tr.relation, index[tr.tail]) for tr in subgraph.triples]
    return _build_prop_graph(subgraph.entities, edges, [index[t] for t in topics])


def prop_graph_from_abstract(absg: AbstractSubgraph) -> PropagationGraph:
    edges = [(t.head, t.relation, t.tail) for t in absg.triples]
    return _build_prop_graph(
        tuple(range(absg.num_nodes)), edges, absg.topic_node_ids
    )


# -- parameters ----------------------------------------------------------------


@dataclass
class StepParams:
    """Projection matrices for one propagation step."""

    question_proj: np.ndarray  # (h, d)
    relation_proj: np.ndarray  # (h, d)
    combine_proj: np.ndarray   # (2d, d)


@dataclass
class ModelParams:
    """All trainable weights outside the text encoder.

    ``steps[i]`` holds the matrices for propagation step ``i + 2`` (step 1
    is parameter-free initialization apart from ``relation_init``).
    """

    steps: list[StepParams]
    relation_init: np.ndarray  # (h, d), projects summed relation vectors at step 1
    score_head: np.ndarray     # (d,)
    num_steps: int             # T
    feat_dim: int              # d
    enc_dim: int               # h
    encoder_ref: str = ""

    @classmethod
    def init_random(
        cls, num_steps: int, feat_dim: int, enc_dim: int,
        rng: np.random.Generator, encoder_ref: str = "",
    ) -> "ModelParams":
        """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) per matrix."""
        if num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {num_steps}")

        def mat(rows: int, cols: int) -> np.ndarray:
            a = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-a, a, size=(rows, cols))

        steps = [
            StepParams(
                question_proj=mat(enc_dim, feat_dim),
                relation_proj=mat(enc_dim, feat_dim),
                combine_proj=mat(2 * feat_dim, feat_dim),
            )
            for _ in range(num_steps - 1)
        ]
        a = np.sqrt(6.0 / (feat_dim + 1))
        return cls(
            steps=steps,
            relation_init=mat(enc_dim, feat_dim),
            score_head=rng.uniform(-a, a, size=feat_dim),
            num_steps=num_steps,
            feat_dim=feat_dim,
            enc_dim=enc_dim,
            encoder_ref=encoder_ref,
        )

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Deterministic (name, array) pairs in checkpoint order."""
        out = []
        for i, sp in enumerate(self.steps):
            out.append((f"step{i + 2}.question_proj", sp.question_proj))
        for i, sp in enumerate(self.steps):
            out.append((f"step{i + 2}.relation_proj", sp.relation_proj))
        for i, sp in enumerate(self.steps):
            out.append((f"step{i + 2}.combine_proj", sp.combine_proj))
        out.append(("relation_init", self.relation_init))
        out.append(("score_head", self.score_head))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            steps=[
                StepParams(sp.question_proj.copy(), sp.relation_proj.copy(),
                           sp.combine_proj.copy())
                for sp in self.steps
            ],
            relation_init=self.relation_init.copy(),
            score_head=self.score_head.copy(),
            num_steps=self.num_steps,
            feat_dim=self.feat_dim,
            enc_dim=self.enc_dim,
            encoder_ref=self.encoder_ref,
        )

    def zeros_like(self) -> "ModelParams":
        z = self.copy()
        for _, arr in z.named_arrays():
            arr[:] = 0.0
        return z

    def checksum(self) -> float:
        return float(sum(np.abs(arr).sum() for _, arr in self.named_arrays()))

    def validate(self) -> None:
        d, h, t = self.feat_dim, self.enc_dim, self.num_steps
        if len(self.steps) != t - 1:
            raise ValueError(f"expected {t - 1} step parameter blocks, got {len(self.steps)}")
        for i, sp in enumerate(self.steps):
            if sp.question_proj.shape != (h, d) or sp.relation_proj.shape != (h, d):
                raise ValueError(f"step {i + 2}: projection shape mismatch")
            if sp.combine_proj.shape != (2 * d, d):
                raise ValueError(f"step {i + 2}: combine projection shape mismatch")
        if self.relation_init.shape != (h, d):
            raise ValueError("relation_init shape mismatch")
        if self.score_head.shape != (d,):
            raise ValueError("score_head shape mismatch")
        for name, arr in self.named_arrays():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")


# -- forward -------------------------------------------------------------------


@dataclass
class MatchState:
    """Per-step node representations and match-score distribution."""

    step: int
    reps: np.ndarray    # (n, d)
    scores: np.ndarray  # (n,)


def match_features(
    h_q: np.ndarray, h_r: np.ndarray, step: StepParams
) -> np.ndarray:
    """Semantic matching feature for one question/relation pair:
    sigmoid of the elementwise product of the two projections."""
    h_q = np.asarray(h_q, dtype=np.float64)
    h_r = np.asarray(h_r, dtype=np.float64)
    if h_q.shape != (step.question_proj.shape[0],):
        raise ValueError(
            f"question vector has shape {h_q.shape}, "
            f"expected ({step.question_proj.shape[0]},)"
        )
    if h_r.shape != (step.relation_proj.shape[0],):
        raise ValueError(
            f"relation vector has shape {h_r.shape}, "
            f"expected ({step.relation_proj.shape[0]},)"
        )
    return sigmoid((h_q @ step.question_proj) * (h_r @ step.relation_proj))


def _summed_incoming_relations(
    graph: PropagationGraph, relation_vecs: np.ndarray, enc_dim: int
) -> np.ndarray:
    rel_in = np.zeros((graph.num_nodes, enc_dim))
    if graph.num_edges:
        np.add.at(rel_in, graph.edge_tail, relation_vecs[graph.edge_rel])
    return rel_in


def init_state(
    graph: PropagationGraph,
    params: ModelParams,
    relation_vecs: np.ndarray,
) -> MatchState:
    """Step-1 state: uniform scores on topic nodes; representations are
    the sigmoid of each node's summed projected incoming relation
    vectors (nodes with no incoming edges sit at sigmoid(0) = 0.5)."""
    if not graph.topic_nodes:
        raise ValueError("graph has no topic nodes")
    scores = np.zeros(graph.num_nodes)
    scores[list(graph.topic_nodes)] = 1.0 / len(graph.topic_nodes)
    rel_in = _summed_incoming_relations(graph, relation_vecs, params.enc_dim)
    reps = sigmoid(rel_in @ params.relation_init)
    return MatchState(step=1, reps=reps, scores=scores)


def _step_forward(
    state: MatchState,
    graph: PropagationGraph,
    question_vec: np.ndarray,
    relation_vecs: np.ndarray,
    params: ModelParams,
) -> tuple[MatchState, dict]:
    t = state.step + 1
    if t > params.num_steps:
        raise ValueError(f"step {t} exceeds configured step count {params.num_steps}")
    sp = params.steps[t - 2]

    q_proj = question_vec @ sp.question_proj            # (d,)
    r_proj = relation_vecs @ sp.relation_proj           # (K, d)
    feats = sigmoid(q_proj[None, :] * r_proj)           # (K, d)

    agg = np.zeros((graph.num_nodes, params.feat_dim))
    if graph.num_edges:
        contrib = state.scores[graph.edge_head][:, None] * feats[graph.edge_rel]
        np.add.at(agg, graph.edge_tail, contrib)

    combined = np.hstack([state.reps, agg])
    reps = combined @ sp.combine_proj
    scores = softmax(reps @ params.score_head)
    cache = {"q_proj": q_proj, "r_proj": r_proj, "feats": feats, "combined": combined}
    return MatchState(step=t, reps=reps, scores=scores), cache


def propagate_step(
    state: MatchState,
    graph: PropagationGraph,
    question_vec: np.ndarray,
    relation_vecs: np.ndarray,
    params: ModelParams,
) -> MatchState:
    """One propagation step: previous scores weight relation matching
    features along edges; aggregates concatenate with the previous
    representations through a linear projection; softmax over the score
    head re-normalizes."""
    new_state, _ = _step_forward(state, graph, question_vec, relation_vecs, params)
    return new_state


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward run."""

    graph: PropagationGraph
    question_vec: np.ndarray
    relation_vecs: np.ndarray
    rel_in: np.ndarray                       # (n, h) summed incoming relation vecs
    states: list[MatchState]                 # states[0] is step 1
    step_cache: list[dict]                   # per propagation step


def forward_trace(
    graph: PropagationGraph,
    question_vec: np.ndarray,
    relation_vecs: np.ndarray,
    params: ModelParams,
) -> ForwardTrace:
    params.validate()
    states = [init_state(graph, params, relation_vecs)]
    rel_in = _summed_incoming_relations(graph, relation_vecs, params.enc_dim)
    cache: list[dict] = []
    for _ in range(2, params.num_steps + 1):
        state, step_cache = _step_forward(
            states[-1], graph, question_vec, relation_vecs, params
        )
        states.append(state)
        cache.append(step_cache)
    return ForwardTrace(graph, question_vec, relation_vecs, rel_in, states, cache)


def backward(
    trace: ForwardTrace,
    params: ModelParams,
    grad_scores: np.ndarray | None = None,
    grad_logits: np.ndarray | None = None,
) -> ModelParams:
    """Reverse-mode gradients of a scalar loss through the whole forward
    pass. Supply either d(loss)/d(final scores) or, when the loss
    collapses with the softmax (as KL does), d(loss)/d(final logits)
    directly. Returns a ModelParams-shaped gradient container.
    """
    grads = params.zeros_like()
    graph = trace.graph
    n = graph.num_nodes
    d = params.feat_dim
    states = trace.states

    if params.num_steps == 1:
        return grads  # step-1 scores are a constant indicator

    if grad_logits is not None:
        gz = np.asarray(grad_logits, dtype=np.float64)
    elif grad_scores is not None:
        gz = softmax_backward(states[-1].scores, np.asarray(grad_scores))
    else:
        raise ValueError("provide grad_scores or grad_logits")

    g_reps = np.zeros((n, d))
    for t in range(params.num_steps, 1, -1):
        sp = params.steps[t - 2]
        gsp = grads.steps[t - 2]
        cache = trace.step_cache[t - 2]
        state = states[t - 1]
        prev = states[t - 2]

        # scores -> logits -> reps and score head
        grads.score_head += state.reps.T @ gz
        g_reps += np.outer(gz, params.score_head)

        # reps = combined @ combine_proj
        gsp.combine_proj += cache["combined"].T @ g_reps
        g_combined = g_reps @ sp.combine_proj.T
        g_prev_reps = g_combined[:, :d]
        g_agg = g_combined[:, d:]

        # agg[tail] += prev_scores[head] * feats[rel]
        g_feats = np.zeros_like(cache["feats"])
        g_prev_scores = np.zeros(n)
        if graph.num_edges:
            g_contrib = g_agg[graph.edge_tail]
            np.add.at(
                g_feats, graph.edge_rel,
                prev.scores[graph.edge_head][:, None] * g_contrib,
            )
            np.add.at(
                g_prev_scores, graph.edge_head,
                np.sum(cache["feats"][graph.edge_rel] * g_contrib, axis=1),
            )

        # feats = sigmoid(q_proj * r_proj)
        g_pre = g_feats * cache["feats"] * (1.0 - cache["feats"])
        g_q_proj = np.sum(g_pre * cache["r_proj"], axis=0)
        g_r_proj = g_pre * cache["q_proj"][None, :]
        gsp.question_proj += np.outer(trace.question_vec, g_q_proj)
        gsp.relation_proj += trace.relation_vecs.T @ g_r_proj

        g_reps = g_prev_reps
        if t - 1 >= 2:
            gz = softmax_backward(prev.scores, g_prev_scores)
        # at t - 1 == 1 the scores are the constant topic indicator

    # step-1 representations: sigmoid(rel_in @ relation_init)
    e1 = states[0].reps
    g_pre1 = g_reps * e1 * (1.0 - e1)
    grads.relation_init += trace.rel_in.T @ g_pre1
    return grads


def reason_scores(
    graph: PropagationGraph,
    question_vec: np.ndarray,
    relation_vecs: np.ndarray,
    params: ModelParams,
) -> np.ndarray:
    """Final match-score distribution over graph nodes."""
    return forward_trace(graph, question_vec, relation_vecs, params).states[-1].scores


def encode_graph_relations(graph: PropagationGraph, kg: KnowledgeGraph, encoder) -> np.ndarray:
    """Relation vectors for a propagation graph, one row per unique
    relation, computed once per question and reused across steps."""
    labels = [kg.relation_labels[r] for r in graph.relation_ids]
    if not labels:
        return np.zeros((0, encoder.dim))
    return np.array(encoder.encode_batch(labels, kind="relation"))


def reason(
    question: str,
    graph: PropagationGraph,
    params: ModelParams,
    encoder,
    kg: KnowledgeGraph,
) -> np.ndarray:
    """Encode the question and relation labels, then score the nodes."""
    if graph.num_nodes == 0:
        raise ValueError("cannot reason over an empty graph")
    q_vec = encoder.encode(question, kind="question")
    rel_vecs = encode_graph_relations(graph, kg, encoder)
    return reason_scores(graph, q_vec, rel_vecs, params)


# -- checkpoint io -------------------------------------------------------------
#
# magic "UKQM" | u32 version | u32 T | u32 d | u32 h
# | u32 ref length | encoder ref utf-8
# | f64 little-endian blocks: question projections for steps 2..T, then
#   relation projections, combine projections, relation_init, score_head.


def save_checkpoint(path: str, params: ModelParams) -> None:
    params.validate()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIII", 1, params.num_steps, params.feat_dim,
                            params.enc_dim))
        ref = params.encoder_ref.encode("utf-8")
        f.write(struct.pack("<I", len(ref)))
        f.write(ref)
        for _, arr in params.named_arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        version, t, d, h = struct.unpack("<IIII", f.read(16))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (ref_len,) = struct.unpack("<I", f.read(4))
        ref = f.read(ref_len).decode("utf-8")

        def block(rows: int, cols: int | None = None) -> np.ndarray:
            count = rows if cols is None else rows * cols
            arr = np.frombuffer(f.read(8 * count), dtype="<f8").astype(np.float64)
            return arr if cols is None else arr.reshape(rows, cols)

        q_projs = [block(h, d) for _ in range(t - 1)]
        r_projs = [block(h, d) for _ in range(t - 1)]
        c_projs = [block(2 * d, d) for _ in range(t - 1)]
        relation_init = block(h, d)
        score_head = block(d)
        trailing = f.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after checkpoint payload")

    params = ModelParams(
        steps=[StepParams(q, r, c) for q, r, c in zip(q_projs, r_projs, c_projs)],
        relation_init=relation_init,
        score_head=score_head,
        num_steps=t,
        feat_dim=d,
        enc_dim=h,
        encoder_ref=ref,
    )
    params.validate()
    return params
