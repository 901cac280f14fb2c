"""Recursive graph networks for text classification, on numpy."""

from .errors import ConfigError, ContractError, DimensionError, IngestionError, NumericError, RegnnError, VocabLookupError
from .model import AblationFlags, ModelConfig, ModelParams, forward, graph_vector, init_params, load_checkpoint, save_checkpoint
from .textgraph import Document, PmiTable, TextGraph, Vocab, build_graph, build_vocab, compute_pmi, read_corpus
from .training import TrainConfig, evaluate, prepare, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "Document",
    "IngestionError",
    "ModelConfig",
    "ModelParams",
    "NumericError",
    "PmiTable",
    "RegnnError",
    "TextGraph",
    "TrainConfig",
    "Vocab",
    "VocabLookupError",
    "build_graph",
    "build_vocab",
    "compute_pmi",
    "evaluate",
    "forward",
    "graph_vector",
    "init_params",
    "load_checkpoint",
    "prepare",
    "read_corpus",
    "save_checkpoint",
    "train",
]
