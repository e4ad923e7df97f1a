"""Streaming code-switching ASR with language-aware mixture-of-experts layers, on a numpy autodiff core."""

from .data import SynthLanguageSpec, generate_corpus
from .encoder import FULL_CONTEXT, STREAMING_16_8, ChunkSpec
from .model import DECODE_WEIGHTS, TRAIN_WEIGHTS, LossWeights, ModelConfig, build_model, count_parameters

__all__ = [
    "ChunkSpec", "DECODE_WEIGHTS", "FULL_CONTEXT", "LossWeights", "ModelConfig", "STREAMING_16_8",
    "SynthLanguageSpec", "TRAIN_WEIGHTS", "build_model", "count_parameters", "generate_corpus",
]
