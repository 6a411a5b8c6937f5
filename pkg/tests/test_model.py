import math
import random

import numpy as np
import pytest

from unikgqa.abstract import abstract
from unikgqa.kg import random_graph
from unikgqa.model import (
    MatchState,
    ModelParams,
    PropagationGraph,
    StepParams,
    backward,
    forward_trace,
    init_state,
    load_checkpoint,
    match_features,
    propagate_step,
    prop_graph_from_abstract,
    prop_graph_from_subgraph,
    reason_scores,
    save_checkpoint,
    softmax,
)

from gradcheck import check_param_grads


def make_graph(num_nodes, edges, topics):
    """edges: (head, relation, tail) with relation indexes 0..K-1."""
    rels = sorted({r for _, r, _ in edges}) or []
    rel_pos = {r: i for i, r in enumerate(rels)}
    return PropagationGraph(
        num_nodes=num_nodes,
        edge_head=np.array([e[0] for e in edges], dtype=np.intp),
        edge_rel=np.array([rel_pos[e[1]] for e in edges], dtype=np.intp),
        edge_tail=np.array([e[2] for e in edges], dtype=np.intp),
        relation_ids=tuple(rels),
        topic_nodes=tuple(topics),
        node_keys=tuple(range(num_nodes)),
    )


def random_instance(seed, n_nodes=5, n_rels=3, n_edges=8, d=3, h=4, t=3):
    rng = np.random.default_rng(seed)
    edges = []
    for _ in range(n_edges):
        edges.append((
            int(rng.integers(n_nodes)),
            int(rng.integers(n_rels)),
            int(rng.integers(n_nodes)),
        ))
    graph = make_graph(n_nodes, edges, topics=[0])
    params = ModelParams.init_random(t, d, h, rng)
    q_vec = rng.normal(size=h)
    rel_vecs = rng.normal(size=(len(graph.relation_ids), h))
    return graph, params, q_vec, rel_vecs


def reason_dense(graph, params, q_vec, rel_vecs):
    """Independent re-implementation with explicit scalar loops."""
    n = graph.num_nodes
    d, h, t_max = params.feat_dim, params.enc_dim, params.num_steps
    edges = list(zip(graph.edge_head, graph.edge_rel, graph.edge_tail))

    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    scores = [0.0] * n
    for tnode in graph.topic_nodes:
        scores[tnode] = 1.0 / len(graph.topic_nodes)

    reps = [[0.0] * d for _ in range(n)]
    for i in range(n):
        summed = [0.0] * h
        for head, rel, tail in edges:
            if tail == i:
                for j in range(h):
                    summed[j] += rel_vecs[rel][j]
        for k in range(d):
            pre = sum(summed[j] * params.relation_init[j][k] for j in range(h))
            reps[i][k] = sig(pre)

    for t in range(2, t_max + 1):
        sp = params.steps[t - 2]
        q_proj = [sum(q_vec[j] * sp.question_proj[j][k] for j in range(h)) for k in range(d)]
        feats = []
        for rel in range(len(rel_vecs)):
            r_proj = [
                sum(rel_vecs[rel][j] * sp.relation_proj[j][k] for j in range(h))
                for k in range(d)
            ]
            feats.append([sig(q_proj[k] * r_proj[k]) for k in range(d)])

        agg = [[0.0] * d for _ in range(n)]
        for head, rel, tail in edges:
            for k in range(d):
                agg[tail][k] += scores[head] * feats[rel][k]

        new_reps = []
        for i in range(n):
            combined = reps[i] + agg[i]
            new_reps.append([
                sum(combined[j] * sp.combine_proj[j][k] for j in range(2 * d))
                for k in range(d)
            ])
        reps = new_reps

        logits = [sum(reps[i][k] * params.score_head[k] for k in range(d)) for i in range(n)]
        m = max(logits)
        exps = [math.exp(z - m) for z in logits]
        total = sum(exps)
        scores = [e / total for e in exps]

    return np.array(scores)


class TestMatchFeatures:
    def test_zero_question_gives_half(self):
        rng = np.random.default_rng(0)
        sp = StepParams(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)),
                        rng.normal(size=(6, 3)))
        m = match_features(np.zeros(4), rng.normal(size=4), sp)
        np.testing.assert_array_equal(m, np.full(3, 0.5))

    def test_identity_projections_all_ones(self):
        sp = StepParams(np.eye(4), np.eye(4), np.zeros((8, 4)))
        m = match_features(np.ones(4), np.ones(4), sp)
        np.testing.assert_allclose(m, np.full(4, 0.7310585786300049), atol=1e-15)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(7)
        sp = StepParams(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)),
                        rng.normal(size=(8, 4)))
        hq, hr = rng.normal(size=5), rng.normal(size=5)
        got = match_features(hq, hr, sp)
        for k in range(4):
            q = sum(hq[j] * sp.question_proj[j][k] for j in range(5))
            r = sum(hr[j] * sp.relation_proj[j][k] for j in range(5))
            assert got[k] == pytest.approx(1.0 / (1.0 + math.exp(-q * r)), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        sp = StepParams(np.eye(4), np.eye(4), np.zeros((8, 4)))
        with pytest.raises(ValueError):
            match_features(np.ones(3), np.ones(4), sp)


class TestInitState:
    def test_single_topic_indicator(self):
        graph = make_graph(4, [(0, 0, 1), (1, 0, 2)], topics=[0])
        params = ModelParams.init_random(2, 3, 4, np.random.default_rng(0))
        state = init_state(graph, params, np.random.default_rng(1).normal(size=(1, 4)))
        np.testing.assert_array_equal(state.scores, [1.0, 0.0, 0.0, 0.0])

    def test_two_topics_normalized(self):
        graph = make_graph(4, [(0, 0, 1)], topics=[0, 2])
        params = ModelParams.init_random(2, 3, 4, np.random.default_rng(0))
        state = init_state(graph, params, np.ones((1, 4)))
        np.testing.assert_array_equal(state.scores, [0.5, 0.0, 0.5, 0.0])

    def test_single_incoming_relation_identity_init(self):
        # with the identity projection, the node rep is sigmoid(h_r)
        graph = make_graph(2, [(0, 0, 1)], topics=[0])
        params = ModelParams.init_random(2, 4, 4, np.random.default_rng(0))
        params.relation_init = np.eye(4)
        hr = np.array([[0.3, -1.2, 0.0, 2.0]])
        state = init_state(graph, params, hr)
        np.testing.assert_allclose(state.reps[1], 1 / (1 + np.exp(-hr[0])), rtol=1e-15)

    def test_no_incoming_edges_sits_at_half(self):
        graph = make_graph(2, [(0, 0, 1)], topics=[0])
        params = ModelParams.init_random(2, 3, 4, np.random.default_rng(0))
        state = init_state(graph, params, np.ones((1, 4)))
        np.testing.assert_array_equal(state.reps[0], np.full(3, 0.5))


class TestPropagateStep:
    def test_single_edge_aggregation(self):
        # a -r-> b with inverse b -r'-> a; all mass on a:
        # agg_b = feats[r], agg_a = 0 * feats[r'] = 0
        graph = make_graph(2, [(0, 0, 1), (1, 1, 0)], topics=[0])
        rng = np.random.default_rng(3)
        params = ModelParams.init_random(2, 3, 4, rng)
        q_vec = rng.normal(size=4)
        rel_vecs = rng.normal(size=(2, 4))
        state = init_state(graph, params, rel_vecs)

        sp = params.steps[0]
        feats_r = match_features(q_vec, rel_vecs[0], sp)
        expected_agg_b = 1.0 * feats_r
        combined_b = np.concatenate([state.reps[1], expected_agg_b])
        combined_a = np.concatenate([state.reps[0], np.zeros(3)])
        expected_reps = np.vstack([combined_a @ sp.combine_proj,
                                   combined_b @ sp.combine_proj])

        new_state = propagate_step(state, graph, q_vec, rel_vecs, params)
        np.testing.assert_allclose(new_state.reps, expected_reps, atol=1e-14)
        np.testing.assert_allclose(
            new_state.scores, softmax(expected_reps @ params.score_head), atol=1e-14
        )

    def test_isolated_mass_still_normalizes(self):
        graph = make_graph(3, [(1, 0, 2)], topics=[0])  # topic 0 has no edges
        rng = np.random.default_rng(5)
        params = ModelParams.init_random(3, 3, 4, rng)
        q_vec = rng.normal(size=4)
        rel_vecs = rng.normal(size=(1, 4))
        state = init_state(graph, params, rel_vecs)
        for _ in range(2):
            state = propagate_step(state, graph, q_vec, rel_vecs, params)
        assert state.scores.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(state.scores > 0)

    def test_matches_dense_oracle(self):
        for seed in range(10):
            graph, params, q_vec, rel_vecs = random_instance(seed)
            fast = reason_scores(graph, q_vec, rel_vecs, params)
            slow = reason_dense(graph, params, q_vec, rel_vecs)
            np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-15)


class TestReason:
    def test_single_node_graph(self):
        graph = make_graph(1, [], topics=[0])
        params = ModelParams.init_random(3, 3, 4, np.random.default_rng(0))
        scores = reason_scores(graph, np.ones(4), np.zeros((0, 4)), params)
        np.testing.assert_array_equal(scores, [1.0])

    def test_t_equals_one_returns_topic_indicator(self):
        graph = make_graph(3, [(0, 0, 1), (1, 0, 2)], topics=[0, 1])
        params = ModelParams.init_random(1, 3, 4, np.random.default_rng(0))
        scores = reason_scores(graph, np.ones(4), np.ones((1, 4)), params)
        np.testing.assert_array_equal(scores, [0.5, 0.5, 0.0])

    def test_distribution_properties(self):
        for seed in range(10):
            graph, params, q_vec, rel_vecs = random_instance(seed, n_nodes=7, t=4)
            trace = forward_trace(graph, q_vec, rel_vecs, params)
            for state in trace.states[1:]:
                assert state.scores.sum() == pytest.approx(1.0, abs=1e-6)
                assert np.all(state.scores > 0) and np.all(state.scores < 1)

    def test_permutation_equivariance(self):
        graph, params, q_vec, rel_vecs = random_instance(2, n_nodes=6, n_edges=10)
        rng = np.random.default_rng(0)
        perm = rng.permutation(graph.num_nodes)  # perm[old] = new
        permuted = PropagationGraph(
            num_nodes=graph.num_nodes,
            edge_head=perm[graph.edge_head],
            edge_rel=graph.edge_rel.copy(),
            edge_tail=perm[graph.edge_tail],
            relation_ids=graph.relation_ids,
            topic_nodes=tuple(int(perm[t]) for t in graph.topic_nodes),
            node_keys=graph.node_keys,
        )
        base = reason_scores(graph, q_vec, rel_vecs, params)
        moved = reason_scores(permuted, q_vec, rel_vecs, params)
        np.testing.assert_allclose(moved[perm], base, atol=1e-12)

    def test_locality_of_propagation(self):
        # with score mass only on S, edges whose head lies outside S
        # cannot influence the next aggregation
        graph, params, q_vec, rel_vecs = random_instance(4, n_nodes=6, n_edges=12, t=2)
        state = init_state(graph, params, rel_vecs)
        support = {0}  # init mass sits on topic 0 only

        keep = [i for i in range(graph.num_edges) if graph.edge_head[i] in support]
        pruned = PropagationGraph(
            num_nodes=graph.num_nodes,
            edge_head=graph.edge_head[keep],
            edge_rel=graph.edge_rel[keep],
            edge_tail=graph.edge_tail[keep],
            relation_ids=graph.relation_ids,
            topic_nodes=graph.topic_nodes,
            node_keys=graph.node_keys,
        )
        full_next = propagate_step(state, graph, q_vec, rel_vecs, params)
        pruned_next = propagate_step(state, pruned, q_vec, rel_vecs, params)
        np.testing.assert_allclose(pruned_next.scores, full_next.scores, atol=1e-12)


def finite_difference_check(graph, params, q_vec, rel_vecs, weights):
    """Probe loss weights . final_scores, all parameter blocks."""
    trace = forward_trace(graph, q_vec, rel_vecs, params)
    grads = backward(trace, params, grad_scores=weights)

    def loss():
        return float(weights @ reason_scores(graph, q_vec, rel_vecs, params))

    check_param_grads(loss, params.named_arrays(), grads.named_arrays())


class TestGradients:
    def test_final_scores_gradients_match_finite_differences(self):
        for seed in range(3):
            graph, params, q_vec, rel_vecs = random_instance(
                seed, n_nodes=5, n_rels=3, n_edges=8, d=4, h=4, t=3
            )
            weights = np.random.default_rng(seed + 100).normal(size=graph.num_nodes)
            finite_difference_check(graph, params, q_vec, rel_vecs, weights)

    def test_gradients_on_abstract_graph(self):
        g = random_graph(12, 3, 20, random.Random(3))
        sub = g.k_hop_subgraph([0], 2)
        absg = abstract(sub, topics=[0])
        graph = prop_graph_from_abstract(absg)
        rng = np.random.default_rng(8)
        params = ModelParams.init_random(3, 4, 4, rng)
        q_vec = rng.normal(size=4)
        rel_vecs = rng.normal(size=(len(graph.relation_ids), 4))
        weights = rng.normal(size=graph.num_nodes)
        finite_difference_check(graph, params, q_vec, rel_vecs, weights)

    def test_t1_has_no_gradient(self):
        graph, params, q_vec, rel_vecs = random_instance(0, t=1)
        trace = forward_trace(graph, q_vec, rel_vecs, params)
        grads = backward(trace, params, grad_scores=np.ones(graph.num_nodes))
        assert grads.checksum() == 0.0


class TestPropGraphBuilders:
    def test_from_subgraph_roundtrip(self):
        g = random_graph(10, 2, 15, random.Random(1))
        sub = g.k_hop_subgraph([0], 2)
        graph = prop_graph_from_subgraph(sub, [0])
        assert graph.num_nodes == sub.num_entities
        assert graph.num_edges == sub.num_triples
        assert graph.node_keys == sub.entities

    def test_from_subgraph_missing_topic_rejected(self):
        g = random_graph(10, 2, 15, random.Random(1))
        sub = g.k_hop_subgraph([0], 1)
        outside = next(e for e in range(g.num_entities) if e not in sub.entities)
        with pytest.raises(ValueError):
            prop_graph_from_subgraph(sub, [outside])

    def test_from_abstract_keeps_topics(self):
        g = random_graph(12, 3, 20, random.Random(5))
        sub = g.k_hop_subgraph([2], 2)
        absg = abstract(sub, topics=[2])
        graph = prop_graph_from_abstract(absg)
        assert graph.topic_nodes == absg.topic_node_ids
        assert graph.num_nodes == absg.num_nodes


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = ModelParams.init_random(
            4, 5, 6, np.random.default_rng(0), encoder_ref="enc.bin"
        )
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.num_steps == 4
        assert loaded.feat_dim == 5
        assert loaded.enc_dim == 6
        assert loaded.encoder_ref == "enc.bin"
        for (n1, a1), (n2, a2) in zip(params.named_arrays(), loaded.named_arrays()):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(str(path))

    def test_truncated_file_rejected(self, tmp_path):
        params = ModelParams.init_random(2, 3, 4, np.random.default_rng(0))
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, params)
        data = open(path, "rb").read()
        open(path, "wb").write(data[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)
