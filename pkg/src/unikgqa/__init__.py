"""Unified retrieve-then-reason engine for multi-hop KGQA.

A single propagation model scores graph nodes for question relevance and
is used twice: once on a merged "abstract" view of the neighborhood to
retrieve a compact subgraph, and once on the retrieved subgraph to rank
answer entities. Training runs in three phases: contrastive pre-training
of the text encoder, KL fine-tuning of the retriever, and KL fine-tuning
of the reasoner initialized from the retriever's weights.
"""

from .abstract import AbstractSubgraph, abstract, ground, ground_truth_vector
from .encoders import FileEncoder, RemoteEncoder, ToyEncoder
from .kg import KnowledgeGraph, QAInstance, Subgraph, Triple, load_graph, load_instances
from .model import ModelParams, load_checkpoint, reason, save_checkpoint
from .pipeline import RetrievalResult, answer, retrieve
from .training import (
    TrainConfig,
    finetune_reasoning,
    finetune_retrieval,
    kl_loss,
    pretrain_matching,
    transfer_params,
)

__version__ = "0.1.0"

__all__ = [
    "AbstractSubgraph",
    "FileEncoder",
    "KnowledgeGraph",
    "ModelParams",
    "QAInstance",
    "RemoteEncoder",
    "RetrievalResult",
    "Subgraph",
    "ToyEncoder",
    "TrainConfig",
    "Triple",
    "abstract",
    "answer",
    "finetune_reasoning",
    "finetune_retrieval",
    "ground",
    "ground_truth_vector",
    "kl_loss",
    "load_checkpoint",
    "load_graph",
    "load_instances",
    "pretrain_matching",
    "reason",
    "retrieve",
    "save_checkpoint",
    "transfer_params",
    "__version__",
]
