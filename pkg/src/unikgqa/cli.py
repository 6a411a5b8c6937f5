"""Command-line front-end.

One command per pipeline phase:

  ingest          validate a KG TSV plus question JSONL files
  synth-data      generate a planted-path benchmark
  pretrain        contrastive pre-training of the toy encoder
  train-retriever KL fine-tuning on abstract subgraphs
  retrieve        top-K abstract retrieval to results JSONL
  train-reasoner  KL fine-tuning on retrieved subgraphs
  answer          rank entities on retrieved subgraphs
  eval            score answers against gold, emit report + figures

Exit codes: 0 success, 1 runtime failure, 2 usage error. Runtime
failures print a single ``unikgqa: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .abstract import dump_abstract_jsonl
from .config import (
    ConfigError,
    RunConfig,
    coerce,
    config_fingerprint,
    load_config,
    train_config,
)
from .encoders import FileEncoder, RemoteEncoder, ToyEncoder
from .evaluation import (
    SynthConfig,
    evaluate_results,
    synth_dataset,
    tune_f1_threshold,
    write_synth_dataset,
)
from .kg import KnowledgeGraph, load_graph, load_instances
from .model import ModelParams, load_checkpoint, save_checkpoint
from .pipeline import answer as answer_instance
from .pipeline import retrieve as retrieve_instance
from .training import (
    build_relevance_records,
    finetune_retrieval,
    finetune_reasoning,
    pretrain_matching,
    transfer_params,
)

log = logging.getLogger(__name__)


class CommandError(RuntimeError):
    pass


def _require_file(path: str, what: str) -> str:
    if not path:
        raise CommandError(f"missing required input: {what}")
    if not os.path.exists(path):
        raise CommandError(f"{what} not found: {path}")
    return path


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def _write_jsonl(path: str, rows: list[dict]) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _write_metrics(path: str, history: list[dict], fp: str) -> None:
    _write_jsonl(path, [dict(row, config_fingerprint=fp) for row in history])


def build_encoder_ref(backend: str, location: str) -> str:
    return f"{backend}:{location}"


def load_encoder_from_ref(ref: str, enc_dim: int, base_dir: str = "."):
    backend, _, location = ref.partition(":")
    if backend == "toy":
        path = location if os.path.isabs(location) else os.path.join(base_dir, location)
        return ToyEncoder.load(_require_file(path, "encoder checkpoint"))
    if backend == "file":
        path = location if os.path.isabs(location) else os.path.join(base_dir, location)
        return FileEncoder(_require_file(path, "embedding file"))
    if backend == "remote":
        return RemoteEncoder(location, dim=enc_dim)
    raise CommandError(f"unknown encoder backend in reference {ref!r}")


def _load_encoder_for(args, config: RunConfig, params: ModelParams):
    if getattr(args, "encoder", None):
        return load_encoder_from_ref(
            build_encoder_ref("toy", args.encoder), config.enc_dim
        )
    if params.encoder_ref:
        base = os.path.dirname(os.path.abspath(args.checkpoint))
        return load_encoder_from_ref(params.encoder_ref, params.enc_dim, base)
    if config.encoder_backend == "file" and config.encoder_file:
        return load_encoder_from_ref(
            build_encoder_ref("file", config.encoder_file), config.enc_dim
        )
    if config.encoder_backend == "remote" and config.remote_url:
        return load_encoder_from_ref(
            build_encoder_ref("remote", config.remote_url), config.enc_dim
        )
    raise CommandError("checkpoint carries no encoder reference; pass --encoder")


def _with_persistent_cache(encoder, config: RunConfig):
    """Preload the on-disk embedding cache when a cache dir is set;
    returns a callback that persists it afterwards."""
    if not config.cache_dir:
        return lambda: None
    os.makedirs(config.cache_dir, exist_ok=True)
    path = os.path.join(config.cache_dir, encoder.cache_identity() + ".npz")
    if os.path.exists(path):
        encoder.load_cache(path)
    return lambda: encoder.save_cache(path)


def _overrides_from(args) -> dict:
    overrides = {}
    for flag, key in (
        ("kg", "paths.kg"),
        ("questions", "paths.questions"),
        ("valid_questions", "paths.valid_questions"),
        ("out_dir", "paths.out_dir"),
        ("seed", "seed"),
        ("k", "retrieval.K"),
        ("max_hops", "retrieval.max_hops"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_figures", False):
        overrides["report.figures"] = False
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = coerce(value)
    return overrides


def _setup(args) -> tuple[RunConfig, str]:
    config = load_config(getattr(args, "config", None), _overrides_from(args))
    return config, config_fingerprint(config)


def _load_kg_and_questions(config: RunConfig, questions_attr: str = "questions"):
    kg = load_graph(_require_file(config.kg, "knowledge graph TSV"))
    questions_path = getattr(config, questions_attr)
    instances = load_instances(
        _require_file(questions_path, "questions JSONL"), kg
    )
    return kg, instances


# -- commands ------------------------------------------------------------------


def cmd_ingest(args) -> int:
    config, fp = _setup(args)
    kg, instances = _load_kg_and_questions(config)
    extra = {}
    if config.valid_questions:
        extra["valid_questions"] = len(load_instances(config.valid_questions, kg))
    summary = {
        "entities": kg.num_entities,
        "relations_with_inverses": kg.num_relations,
        "triples_closed": len(kg.triples),
        "questions": len(instances),
        **extra,
        "config_fingerprint": fp,
    }
    out = args.out or os.path.join(config.out_dir, "ingest.json")
    _ensure_parent(out)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    print(json.dumps(summary))
    return 0


def cmd_synth_data(args) -> int:
    config, fp = _setup(args)
    synth = SynthConfig(
        entities=args.entities, relations=args.relations, hops=args.hops,
        n_train=args.train, n_valid=args.valid, n_test=args.test,
        seed=config.seed,
    )
    dataset = synth_dataset(synth)
    paths = write_synth_dataset(dataset, args.out_dir or config.out_dir)
    print(json.dumps({"written": paths, "config_fingerprint": fp}))
    return 0


def cmd_pretrain(args) -> int:
    config, fp = _setup(args)
    kg, instances = _load_kg_and_questions(config)
    tcfg = train_config(config)

    corpus = [inst.question for inst in instances] + list(kg.relation_labels)
    encoder = ToyEncoder.from_corpus(corpus, dim=config.enc_dim, seed=config.seed)
    history = []
    if args.no_pretrain:
        encoder.freeze()
        log.info("pre-training skipped (--no-pretrain); encoder frozen at random init")
    else:
        records = build_relevance_records(
            kg, instances, use_inverse=config.paths_use_inverse
        )
        history = pretrain_matching(records, kg, encoder, tcfg)

    out = args.out or os.path.join(config.out_dir, "encoder.bin")
    _ensure_parent(out)
    encoder.save(out)
    _write_metrics(out + ".metrics.jsonl", history, fp)
    if config.figures and history:
        from .plotting import plot_training_curves
        plot_training_curves(history, out + ".loss.png", "encoder pre-training")
    print(json.dumps({
        "encoder": out, "epochs": len(history),
        "final_loss": history[-1]["loss"] if history else None,
        "config_fingerprint": fp,
    }))
    return 0


def cmd_train_retriever(args) -> int:
    config, fp = _setup(args)
    kg, instances = _load_kg_and_questions(config)
    valid = None
    if config.valid_questions:
        valid = load_instances(
            _require_file(config.valid_questions, "validation questions"), kg
        )
    encoder_path = _require_file(args.encoder, "encoder checkpoint")
    encoder = ToyEncoder.load(encoder_path)
    tcfg = train_config(config)

    rng = np.random.default_rng(config.seed)
    out = args.out or os.path.join(config.out_dir, "retriever.ckpt")
    params = ModelParams.init_random(
        config.num_steps, config.feat_dim, config.enc_dim, rng,
        encoder_ref=build_encoder_ref("toy", os.path.abspath(encoder_path)),
    )
    best, history = finetune_retrieval(
        instances, kg, params, encoder, tcfg,
        max_hops=config.max_hops, valid_instances=valid,
    )
    _ensure_parent(out)
    save_checkpoint(out, best)
    _write_sidecar(out, fp, phase="train-retriever")
    _write_metrics(out + ".metrics.jsonl", history, fp)
    if config.figures:
        from .plotting import plot_training_curves
        plot_training_curves(history, out + ".loss.png", "retriever fine-tuning")
    print(json.dumps({
        "checkpoint": out,
        "final_loss": history[-1]["loss"],
        "best_valid_hits1": max(
            (r["valid_hits1"] for r in history if r["valid_hits1"] is not None),
            default=None,
        ),
        "config_fingerprint": fp,
    }))
    return 0


def _write_sidecar(ckpt_path: str, fp: str, phase: str) -> None:
    with open(ckpt_path + ".meta.json", "w", encoding="utf-8") as f:
        json.dump({"config_fingerprint": fp, "phase": phase}, f, indent=2)
        f.write("\n")


def cmd_retrieve(args) -> int:
    config, fp = _setup(args)
    kg, instances = _load_kg_and_questions(config)
    params = load_checkpoint(_require_file(args.checkpoint, "retriever checkpoint"))
    encoder = _load_encoder_for(args, config, params)
    persist_cache = _with_persistent_cache(encoder, config)

    rows = []
    dumps = []
    for inst in instances:
        result = retrieve_instance(
            inst, kg, params, encoder,
            top_k=config.top_k, max_hops=config.max_hops,
            score_mode=config.score_mode, connect_paths=config.connect_paths,
        )
        rows.append({
            "id": inst.id,
            "coverage": result.coverage,
            "subgraph_size": result.subgraph_size,
            "entities": [kg.entity_labels[e] for e in result.subgraph.entities],
            "selected": [
                {
                    "node": nid,
                    "score": score,
                    "members": sorted(
                        kg.entity_labels[e]
                        for e in result.abstract_graph.members(nid)
                    ),
                }
                for nid, score in result.selected_nodes
            ],
            "config_fingerprint": fp,
        })
        if args.dump_abstract:
            dumps.append((inst.id, result.abstract_graph))

    out = args.out or os.path.join(config.out_dir, "retrieved.jsonl")
    _write_jsonl(out, rows)
    if args.dump_abstract:
        _ensure_parent(args.dump_abstract)
        dump_abstract_jsonl(args.dump_abstract, dumps, kg)
    persist_cache()
    covered = [r["coverage"] for r in rows if r["coverage"] is not None]
    print(json.dumps({
        "results": out,
        "questions": len(rows),
        "coverage": (sum(covered) / len(covered)) if covered else None,
        "config_fingerprint": fp,
    }))
    return 0


def _subgraphs_from_results(kg: KnowledgeGraph, rows: list[dict]):
    subgraphs = {}
    for row in rows:
        entities = []
        for label in row["entities"]:
            if label not in kg.entity_ids:
                raise CommandError(
                    f"results reference unknown entity label {label!r}"
                )
            entities.append(kg.entity_ids[label])
        subgraphs[row["id"]] = kg.induced_subgraph(entities)
    return subgraphs


def cmd_train_reasoner(args) -> int:
    config, fp = _setup(args)
    kg, instances = _load_kg_and_questions(config)
    retrieved = _read_jsonl(_require_file(args.retrieved, "retrieved results JSONL"))
    subgraphs = _subgraphs_from_results(kg, retrieved)
    tcfg = train_config(config)

    valid = valid_subgraphs = None
    if config.valid_questions and args.valid_retrieved:
        valid = load_instances(
            _require_file(config.valid_questions, "validation questions"), kg
        )
        valid_subgraphs = _subgraphs_from_results(
            kg, _read_jsonl(_require_file(args.valid_retrieved,
                                          "validation retrieved JSONL"))
        )

    if args.no_transfer or not args.init_from:
        if args.encoder is None:
            raise CommandError("fresh initialization requires --encoder")
        encoder = ToyEncoder.load(_require_file(args.encoder, "encoder checkpoint"))
        rng = np.random.default_rng(config.seed)
        params = ModelParams.init_random(
            config.num_steps, config.feat_dim, config.enc_dim, rng,
            encoder_ref=build_encoder_ref("toy", os.path.abspath(args.encoder)),
        )
        init_mode = "fresh"
    else:
        source = load_checkpoint(_require_file(args.init_from, "retriever checkpoint"))
        params = transfer_params(
            source, num_steps=config.num_steps,
            feat_dim=config.feat_dim, enc_dim=config.enc_dim,
        )
        args.checkpoint = args.init_from  # encoder resolution base
        encoder = _load_encoder_for(args, config, params)
        init_mode = "transfer"

    best, history, coverage_report = finetune_reasoning(
        instances, subgraphs, kg, params, encoder, tcfg,
        valid_instances=valid, valid_subgraphs=valid_subgraphs,
    )
    out = args.out or os.path.join(config.out_dir, "reasoner.ckpt")
    _ensure_parent(out)
    save_checkpoint(out, best)
    _write_sidecar(out, fp, phase="train-reasoner")
    _write_metrics(out + ".metrics.jsonl", history, fp)
    if config.figures:
        from .plotting import plot_training_curves
        plot_training_curves(history, out + ".loss.png",
                             f"reasoner fine-tuning ({init_mode} init)")
    print(json.dumps({
        "checkpoint": out,
        "init": init_mode,
        "final_loss": history[-1]["loss"],
        "coverage_report": coverage_report,
        "config_fingerprint": fp,
    }))
    return 0


def cmd_answer(args) -> int:
    config, fp = _setup(args)
    kg, instances = _load_kg_and_questions(config)
    retrieved = _read_jsonl(_require_file(args.retrieved, "retrieved results JSONL"))
    retrieved_by_id = {row["id"]: row for row in retrieved}
    subgraphs = _subgraphs_from_results(kg, retrieved)
    params = load_checkpoint(_require_file(args.checkpoint, "reasoner checkpoint"))
    encoder = _load_encoder_for(args, config, params)
    persist_cache = _with_persistent_cache(encoder, config)

    rows = []
    for inst in instances:
        if inst.id not in subgraphs:
            raise CommandError(f"no retrieval result for question {inst.id!r}")
        ranked = answer_instance(
            inst, subgraphs[inst.id], params, encoder, kg,
            top_n=config.answer_top_n,
        )
        source = retrieved_by_id[inst.id]
        rows.append({
            "id": inst.id,
            "answers": [[kg.entity_labels[e], score] for e, score in ranked],
            "coverage": source.get("coverage"),
            "subgraph_size": source.get("subgraph_size"),
            "config_fingerprint": fp,
        })
    out = args.out or os.path.join(config.out_dir, "answers.jsonl")
    _write_jsonl(out, rows)
    persist_cache()
    print(json.dumps({
        "results": out, "questions": len(rows), "config_fingerprint": fp,
    }))
    return 0


def _gold_from_jsonl(path: str) -> dict[str, set]:
    gold = {}
    for row in _read_jsonl(path):
        gold[str(row["id"])] = set(row.get("answers", []))
    return gold


def cmd_eval(args) -> int:
    config, fp = _setup(args)
    results = _read_jsonl(_require_file(args.results, "results JSONL"))
    gold = _gold_from_jsonl(_require_file(args.gold, "gold JSONL"))

    threshold = config.f1_threshold
    if args.valid_results and args.valid_gold:
        threshold = tune_f1_threshold(
            _read_jsonl(args.valid_results), _gold_from_jsonl(args.valid_gold)
        )
    report = evaluate_results(
        results, gold, f1_threshold=threshold,
        config_fingerprint=fp, seed=config.seed,
    )
    out = args.out or os.path.join(config.out_dir, "report.json")
    _ensure_parent(out)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
        f.write("\n")

    tsv = os.path.splitext(out)[0] + ".tsv"
    with open(tsv, "w", encoding="utf-8") as f:
        f.write("id\thit\tf1\tcoverage\tsubgraph_size\n")
        for q in report.per_question:
            f.write(f"{q['id']}\t{q['hit']}\t{q['f1']:.6f}"
                    f"\t{int(q['coverage'])}\t{q['subgraph_size']}\n")

    if config.figures:
        from .plotting import plot_eval_report
        plot_eval_report(report.to_dict(), os.path.splitext(out)[0] + ".png")

    print(json.dumps({
        "report": out,
        "hits1": report.hits1,
        "macro_f1": report.macro_f1,
        "coverage": report.coverage,
        "f1_threshold": threshold,
        "config_fingerprint": fp,
    }))
    return 0


# -- parser --------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, questions: bool = True) -> None:
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--seed", type=int, help="random seed override")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--out-dir", help="default directory for artifacts")
    p.add_argument("--no-figures", action="store_true",
                   help="skip figure rendering")
    if questions:
        p.add_argument("--kg", help="knowledge graph TSV")
        p.add_argument("--questions", help="questions JSONL")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unikgqa",
        description="Unified retrieve-then-reason engine for multi-hop KGQA",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate KG and question files")
    _add_common(p)
    p.add_argument("--valid-questions", help="extra questions JSONL to validate")
    p.add_argument("--out", help="summary JSON path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth-data", help="generate a planted-path benchmark")
    _add_common(p, questions=False)
    p.add_argument("--entities", type=int, default=500)
    p.add_argument("--relations", type=int, default=12)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--valid", type=int, default=50)
    p.add_argument("--test", type=int, default=100)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="contrastive encoder pre-training")
    _add_common(p)
    p.add_argument("--out", help="encoder checkpoint path")
    p.add_argument("--no-pretrain", action="store_true",
                   help="skip training; freeze the random-initialized encoder")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-retriever", help="fine-tune on abstract subgraphs")
    _add_common(p)
    p.add_argument("--valid-questions", help="validation questions JSONL")
    p.add_argument("--encoder", required=True, help="encoder checkpoint")
    p.add_argument("--out", help="retriever checkpoint path")
    p.set_defaults(func=cmd_train_retriever)

    p = sub.add_parser("retrieve", help="top-K abstract retrieval")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="retriever checkpoint")
    p.add_argument("--encoder", help="override encoder checkpoint")
    p.add_argument("--k", type=int, help="top-K abstract nodes")
    p.add_argument("--max-hops", type=int, help="neighborhood radius")
    p.add_argument("--out", help="results JSONL path")
    p.add_argument("--dump-abstract", help="write abstract subgraphs JSONL here")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train-reasoner", help="fine-tune on retrieved subgraphs")
    _add_common(p)
    p.add_argument("--valid-questions", help="validation questions JSONL")
    p.add_argument("--retrieved", required=True, help="retrieve results JSONL")
    p.add_argument("--valid-retrieved", help="validation retrieve results JSONL")
    p.add_argument("--init-from", help="retriever checkpoint to transfer from")
    p.add_argument("--no-transfer", action="store_true",
                   help="ignore --init-from and start from random weights")
    p.add_argument("--encoder", help="encoder checkpoint (fresh init)")
    p.add_argument("--out", help="reasoner checkpoint path")
    p.set_defaults(func=cmd_train_reasoner)

    p = sub.add_parser("answer", help="rank answer entities")
    _add_common(p)
    p.add_argument("--retrieved", required=True, help="retrieve results JSONL")
    p.add_argument("--checkpoint", required=True, help="reasoner checkpoint")
    p.add_argument("--encoder", help="override encoder checkpoint")
    p.add_argument("--out", help="answers JSONL path")
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("eval", help="score answers against gold")
    _add_common(p, questions=False)
    p.add_argument("--results", required=True, help="answers JSONL")
    p.add_argument("--gold", required=True, help="gold questions JSONL")
    p.add_argument("--valid-results", help="validation answers JSONL for "
                                           "F1-threshold tuning")
    p.add_argument("--valid-gold", help="validation gold JSONL")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CommandError, ConfigError) as exc:
        print(f"unikgqa: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"unikgqa: error: missing file: {exc.filename}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"unikgqa: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
