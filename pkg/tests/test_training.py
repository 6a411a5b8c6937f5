import math
import random

import numpy as np
import pytest

from unikgqa.encoders import ToyEncoder
from unikgqa.kg import KnowledgeGraph, QAInstance, random_graph
from unikgqa.model import ModelParams, forward_trace, reason_scores
from unikgqa.training import (
    AdamW,
    CompiledInstance,
    TrainConfig,
    build_relevance_records,
    compile_retrieval_instances,
    contrastive_batch,
    finetune,
    finetune_retrieval,
    hits_at_1_over,
    instance_loss_and_grads,
    kl_loss,
    pair_separation,
    pretrain_matching,
    sample_qr_pairs,
    transfer_params,
)

from gradcheck import check_param_grads, grads_close


class TestKLLoss:
    def test_identical_distributions_zero(self):
        s = np.array([0.2, 0.3, 0.5])
        loss, grad = kl_loss(s, s)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros(3))

    def test_one_hot_target_uniform_prediction(self):
        n = 7
        target = np.zeros(n)
        target[3] = 1.0
        pred = np.full(n, 1.0 / n)
        loss, _ = kl_loss(pred, target)
        assert loss == pytest.approx(math.log(n), rel=1e-12)

    def test_matches_termwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pred = rng.dirichlet(np.ones(6))
            target = rng.dirichlet(np.ones(6))
            loss, grad = kl_loss(pred, target)
            oracle = sum(
                t * (math.log(t) - math.log(p))
                for p, t in zip(pred, target) if t > 0
            )
            assert loss == pytest.approx(oracle, abs=1e-12)
            np.testing.assert_allclose(grad, pred - target, atol=1e-15)

    def test_zero_prediction_on_support_rejected(self):
        with pytest.raises(ValueError):
            kl_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5]))

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred = rng.dirichlet(np.ones(5))
            target = rng.dirichlet(np.ones(5))
            loss, _ = kl_loss(pred, target)
            assert loss >= 0.0

    def test_reversed_direction(self):
        # when both distributions are dense: KL(pred || target)
        pred = np.array([0.4, 0.6])
        target = np.array([0.5, 0.5])
        loss, _ = kl_loss(pred, target, target_first=False)
        oracle = 0.4 * math.log(0.4 / 0.5) + 0.6 * math.log(0.6 / 0.5)
        assert loss == pytest.approx(oracle, abs=1e-12)

    def test_reversed_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=5)
        target = rng.dirichlet(np.ones(5))

        def softmax(z):
            e = np.exp(z - z.max())
            return e / e.sum()

        _, grad = kl_loss(softmax(logits), target, target_first=False)
        eps = 1e-6
        for i in range(5):
            z = logits.copy()
            z[i] += eps
            up, _ = kl_loss(softmax(z), target, target_first=False)
            z[i] -= 2 * eps
            down, _ = kl_loss(softmax(z), target, target_first=False)
            assert grads_close(grad[i], (up - down) / (2 * eps))


class TestAdamW:
    def test_descends_on_quadratic(self):
        x = np.array([5.0, -3.0])
        opt = AdamW([("x", (2,))], lr=0.1)
        for _ in range(500):
            opt.step([("x", x)], [("x", 2 * x)])
        np.testing.assert_allclose(x, np.zeros(2), atol=1e-3)

    def test_decoupled_weight_decay(self):
        # with zero gradient, decay shrinks weights geometrically
        x = np.array([1.0])
        opt = AdamW([("x", (1,))], lr=0.5, weight_decay=0.1)
        opt.step([("x", x)], [("x", np.zeros(1))])
        assert x[0] == pytest.approx(1.0 - 0.5 * 0.1)

    def test_name_mismatch_rejected(self):
        opt = AdamW([("x", (1,))], lr=0.1)
        with pytest.raises(ValueError):
            opt.step([("x", np.ones(1))], [("y", np.ones(1))])


def tiny_kg():
    # spokes: t -r0-> m, m -r1-> a, t -r2-> d (decoy)
    return KnowledgeGraph(
        ["t", "m", "a", "d"],
        ["born in", "lives at", "color of"],
        [(0, 0, 1), (1, 2, 2), (0, 4, 3)],
    )


class TestContrastiveLoss:
    def test_single_pair_no_negatives_zero_loss(self):
        kg = tiny_kg()
        enc = ToyEncoder.from_corpus(["who was born in town"], dim=8, seed=0)
        loss = contrastive_batch(
            enc, kg, ["who was born in town"], [0], [[]], temperature=0.05
        )
        assert loss == 0.0

    def test_high_temperature_limit_log_2m(self):
        kg = tiny_kg()
        enc = ToyEncoder.from_corpus(
            ["q one", "q two", "born in", "lives at", "color of"], dim=8, seed=1
        )
        m = 2
        loss = contrastive_batch(
            enc, kg, ["q one", "q two"], [0, 2], [[4], [4]], temperature=1e9
        )
        assert loss == pytest.approx(math.log(2 * m), abs=1e-6)

    def test_duplicate_positive_excluded_from_denominator(self):
        kg = tiny_kg()
        enc = ToyEncoder.from_corpus(["a b", "c d"], dim=8, seed=2)
        # both instances share positive relation 0: each sees only its own
        # positive plus the negatives, not the twin positive
        loss_dup = contrastive_batch(
            enc, kg, ["a b", "a b"], [0, 0], [[], []], temperature=0.05
        )
        assert loss_dup == 0.0

    def test_gradient_matches_finite_differences(self):
        kg = tiny_kg()
        corpus = ["who was born in town", "what color is it",
                  "born in", "lives at", "color of"]
        enc = ToyEncoder.from_corpus(corpus, dim=6, seed=3)
        questions = ["who was born in town", "what color is it"]
        positives = [0, 4]
        negatives = [[2], [2]]

        grad = np.zeros_like(enc.table)
        contrastive_batch(enc, kg, questions, positives, negatives,
                          temperature=0.5, grad_table=grad)

        def loss():
            enc.invalidate_cache()
            return contrastive_batch(enc, kg, questions, positives, negatives,
                                     temperature=0.5)

        check_param_grads(loss, [("table", enc.table)], [("table", grad)])
        enc.invalidate_cache()


def planted_one_hop(n_questions=12, seed=0):
    """Questions 'who is the R of the X' over a star KG, 1 hop."""
    rng = random.Random(seed)
    rels = ["alpha", "beta", "gamma"]
    ents = []
    triples = []
    instances = []
    for i in range(n_questions):
        t, a = f"t{i}", f"a{i}"
        ents += [t, a]
        r = rng.randrange(len(rels))
        triples.append((2 * i, 2 * r, 2 * i + 1))
        instances.append((f"q{i}", f"who is the {rels[r]} of {t}", t, a))
    kg = KnowledgeGraph(ents, rels, triples)
    qa = [
        QAInstance(qid, text, frozenset([kg.entity_id(t)]), frozenset([kg.entity_id(a)]))
        for qid, text, t, a in instances
    ]
    return kg, qa


class TestPretraining:
    def test_frozen_encoder_rejected(self):
        kg, qa = planted_one_hop()
        enc = ToyEncoder.from_corpus([q.question for q in qa], dim=8, seed=0)
        enc.freeze()
        records = build_relevance_records(kg, qa)
        with pytest.raises(ValueError, match="trainable"):
            pretrain_matching(records, kg, enc, TrainConfig(epochs_pretrain=1))

    def test_empty_records_rejected(self):
        kg, qa = planted_one_hop()
        enc = ToyEncoder.from_corpus(["x"], dim=8, seed=0)
        with pytest.raises(ValueError):
            pretrain_matching([], kg, enc, TrainConfig())

    def test_training_separates_relations(self):
        kg, qa = planted_one_hop(n_questions=30, seed=1)
        corpus = [q.question for q in qa] + list(kg.relation_labels)
        enc = ToyEncoder.from_corpus(corpus, dim=16, seed=0)
        records = build_relevance_records(kg, qa)
        held_out = records[:6]
        train = records[6:]
        config = TrainConfig(
            epochs_pretrain=30, batch_size=8, lr_encoder=0.05, seed=0,
            temperature=0.05,
        )
        history = pretrain_matching(train, kg, enc, config)
        assert not enc.trainable
        assert len(history) == 30
        gaps = pair_separation(held_out, kg, enc, np.random.default_rng(0))
        assert np.mean(gaps) > 0.0
        assert np.mean([g > 0 for g in gaps]) >= 0.8

    def test_deterministic_given_seed(self):
        kg, qa = planted_one_hop(n_questions=8)
        records = build_relevance_records(kg, qa)
        tables = []
        for _ in range(2):
            enc = ToyEncoder.from_corpus([q.question for q in qa], dim=8, seed=4)
            config = TrainConfig(epochs_pretrain=3, batch_size=4,
                                 lr_encoder=0.01, seed=7)
            pretrain_matching(records, kg, enc, config)
            tables.append(enc.table.copy())
        np.testing.assert_array_equal(tables[0], tables[1])

    def test_sampled_positives_come_from_relevant(self):
        kg, qa = planted_one_hop(n_questions=10, seed=2)
        records = build_relevance_records(kg, qa)
        pairs = sample_qr_pairs(records, np.random.default_rng(0))
        by_id = {r.instance_id: r for r in records}
        for pair in pairs:
            assert pair.positive_relation in by_id[pair.instance_id].relevant


class TestFinetune:
    def make_compiled(self, seed=0, d=4, h=4, t=3):
        kg = random_graph(14, 3, 25, random.Random(seed))
        rng = np.random.default_rng(seed)
        enc = ToyEncoder.from_corpus(
            ["q"] + [kg.relation_labels[i] for i in range(kg.num_relations)],
            dim=h, seed=seed,
        )
        enc.freeze()
        topic = int(rng.integers(kg.num_entities))
        answers = {int(a) for a in rng.integers(0, kg.num_entities, size=2)}
        inst = QAInstance("q0", "q", frozenset([topic]), frozenset(answers))
        compiled, _ = compile_retrieval_instances([inst], kg, enc, max_hops=2)
        return compiled

    def test_single_abstract_node_zero_loss_zero_grad(self):
        graph_params = ModelParams.init_random(3, 4, 4, np.random.default_rng(0))
        from unikgqa.model import PropagationGraph
        graph = PropagationGraph(
            num_nodes=1,
            edge_head=np.array([], dtype=np.intp),
            edge_rel=np.array([], dtype=np.intp),
            edge_tail=np.array([], dtype=np.intp),
            relation_ids=(),
            topic_nodes=(0,),
            node_keys=(0,),
        )
        inst = CompiledInstance(
            qid="x", graph=graph, q_vec=np.ones(4),
            rel_vecs=np.zeros((0, 4)), target=np.array([1.0]),
            gold_nodes=frozenset([0]), exclude_nodes=frozenset(),
        )
        loss, grads = instance_loss_and_grads(inst, graph_params)
        assert loss == 0.0
        assert grads.checksum() == 0.0

    def test_kl_gradients_through_propagation(self):
        for seed in range(3):
            compiled = self.make_compiled(seed)
            if not compiled:
                continue
            inst = compiled[0]
            params = ModelParams.init_random(3, 4, 4, np.random.default_rng(seed))
            _, grads = instance_loss_and_grads(inst, params)

            def loss():
                trace = forward_trace(inst.graph, inst.q_vec, inst.rel_vecs, params)
                value, _ = kl_loss(trace.states[-1].scores, inst.target)
                return value

            check_param_grads(loss, params.named_arrays(), grads.named_arrays())

    def test_loss_decreases_on_planted_one_hop(self):
        kg, qa = planted_one_hop(n_questions=16, seed=3)
        corpus = [q.question for q in qa] + list(kg.relation_labels)
        enc = ToyEncoder.from_corpus(corpus, dim=8, seed=0)
        records = build_relevance_records(kg, qa)
        pre_cfg = TrainConfig(epochs_pretrain=20, batch_size=8,
                              lr_encoder=0.05, seed=0)
        pretrain_matching(records, kg, enc, pre_cfg)

        params = ModelParams.init_random(2, 8, 8, np.random.default_rng(0))
        cfg = TrainConfig(epochs_retrieval=5, batch_size=8, lr_model=0.01, seed=0)
        _, history = finetune_retrieval(qa, kg, params, enc, cfg, max_hops=2)
        losses = [row["loss"] for row in history if row["loss"] is not None]
        assert len(losses) == 5
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_empty_dataset_rejected(self):
        params = ModelParams.init_random(2, 4, 4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            finetune([], params, TrainConfig(), epochs=1, phase="x")

    def test_trainable_encoder_rejected(self):
        kg, qa = planted_one_hop()
        enc = ToyEncoder.from_corpus(["x"], dim=4, seed=0)
        params = ModelParams.init_random(2, 4, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="frozen"):
            finetune_retrieval(qa, kg, params, enc, TrainConfig(), max_hops=2)

    def test_deterministic_trajectories(self):
        compiled = self.make_compiled(1)
        results = []
        for _ in range(2):
            params = ModelParams.init_random(3, 4, 4, np.random.default_rng(5))
            cfg = TrainConfig(epochs_retrieval=3, batch_size=2, lr_model=0.01, seed=2)
            out, _ = finetune(compiled, params, cfg, epochs=3, phase="x")
            results.append(out)
        for (_, a), (_, b) in zip(results[0].named_arrays(), results[1].named_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_encoder_untouched_by_finetuning(self):
        kg, qa = planted_one_hop(n_questions=6)
        enc = ToyEncoder.from_corpus([q.question for q in qa], dim=8, seed=0)
        enc.freeze()
        checksum_before = enc.checksum()
        params = ModelParams.init_random(2, 4, 8, np.random.default_rng(0))
        cfg = TrainConfig(epochs_retrieval=2, batch_size=4, lr_model=0.01, seed=0)
        finetune_retrieval(qa, kg, params, enc, cfg, max_hops=2)
        assert enc.checksum() == checksum_before

    def test_uncovered_instances_counted_in_coverage_report(self):
        from unikgqa.training import finetune_reasoning
        kg, qa = planted_one_hop(n_questions=6)
        enc = ToyEncoder.from_corpus([q.question for q in qa], dim=8, seed=0)
        enc.freeze()
        # first two instances get a subgraph without their answer
        subgraphs = {}
        for i, q in enumerate(qa):
            if i < 2:
                subgraphs[q.id] = kg.induced_subgraph(q.topic_entities)
            else:
                subgraphs[q.id] = kg.k_hop_subgraph(q.topic_entities, 2)
        params = ModelParams.init_random(2, 4, 8, np.random.default_rng(0))
        cfg = TrainConfig(epochs_reasoning=1, batch_size=4, lr_model=0.01, seed=0)
        _, _, coverage_report = finetune_reasoning(qa, subgraphs, kg, params, enc, cfg)
        assert coverage_report["skipped_uncovered"] == 2
        assert coverage_report["trainable"] == 4

    def test_phase_isolation_reasoning_leaves_retriever_intact(self):
        from unikgqa.training import finetune_reasoning
        kg, qa = planted_one_hop(n_questions=8)
        enc = ToyEncoder.from_corpus([q.question for q in qa], dim=8, seed=0)
        enc.freeze()
        retriever = ModelParams.init_random(2, 4, 8, np.random.default_rng(1))
        retriever_sum = retriever.checksum()
        encoder_sum = enc.checksum()
        subgraphs = {q.id: kg.k_hop_subgraph(q.topic_entities, 2) for q in qa}
        reasoner = transfer_params(retriever)
        cfg = TrainConfig(epochs_reasoning=2, batch_size=4, lr_model=0.01, seed=0)
        finetune_reasoning(qa, subgraphs, kg, reasoner, enc, cfg)
        assert retriever.checksum() == retriever_sum
        assert enc.checksum() == encoder_sum
        assert reasoner.checksum() != retriever_sum


class TestTransfer:
    def test_copy_is_bitwise_identical(self):
        src = ModelParams.init_random(3, 4, 5, np.random.default_rng(0))
        dst = transfer_params(src, num_steps=3, feat_dim=4, enc_dim=5)
        for (_, a), (_, b) in zip(src.named_arrays(), dst.named_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_transferred_model_reproduces_outputs(self):
        src = ModelParams.init_random(3, 4, 4, np.random.default_rng(1))
        dst = transfer_params(src)
        rng = np.random.default_rng(2)
        from unikgqa.model import PropagationGraph
        graph = PropagationGraph(
            num_nodes=3,
            edge_head=np.array([0, 1], dtype=np.intp),
            edge_rel=np.array([0, 0], dtype=np.intp),
            edge_tail=np.array([1, 2], dtype=np.intp),
            relation_ids=(0,),
            topic_nodes=(0,),
            node_keys=(0, 1, 2),
        )
        q = rng.normal(size=4)
        r = rng.normal(size=(1, 4))
        np.testing.assert_array_equal(
            reason_scores(graph, q, r, src), reason_scores(graph, q, r, dst)
        )

    def test_mutation_does_not_leak_back(self):
        src = ModelParams.init_random(2, 3, 4, np.random.default_rng(0))
        before = src.checksum()
        dst = transfer_params(src)
        dst.score_head += 1.0
        dst.steps[0].question_proj *= 2.0
        assert src.checksum() == before

    def test_mismatched_steps_rejected(self):
        src = ModelParams.init_random(2, 3, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="step count"):
            transfer_params(src, num_steps=4)

    def test_mismatched_dims_rejected(self):
        src = ModelParams.init_random(2, 3, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="feature dim"):
            transfer_params(src, feat_dim=8)
        with pytest.raises(ValueError, match="encoder dim"):
            transfer_params(src, enc_dim=16)
