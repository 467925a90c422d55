"""Sparse autoencoders over frame-level speech embeddings."""
from .errors import (
    ContractError,
    CorruptInputError,
    InputError,
    ParseError,
    SpeechSaeError,
)
from .ingest import Alignment, AudioMeta, EmbeddingSequence, Span, Store, ingest_corpus, trim_padding
from .sae import SaeConfig, SaeParams, SparseActivation, decode, encode, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Alignment",
    "AudioMeta",
    "ContractError",
    "CorruptInputError",
    "EmbeddingSequence",
    "InputError",
    "ParseError",
    "SaeConfig",
    "SaeParams",
    "Span",
    "SparseActivation",
    "SpeechSaeError",
    "Store",
    "TrainConfig",
    "decode",
    "encode",
    "ingest_corpus",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "trim_padding",
]
