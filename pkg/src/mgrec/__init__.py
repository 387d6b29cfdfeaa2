"""Multimodal generative recommendation with semantic IDs.

Residual quantization turns each item's per-modality embedding into a short
code; fusion strategies assemble those codes into token sequences; an
encoder-decoder transformer learns to generate the next item's tokens.
"""

from .formats import EmbeddingTable, InteractionDataset, SemanticIdMap
from .quant import ResidualQuantizer
from .seqrec import GenerativeRecommender
from .sid import FusionStrategy, TokenVocab
from .synth import SynthConfig

__version__ = "0.1.0"

__all__ = [
    "EmbeddingTable",
    "InteractionDataset",
    "SemanticIdMap",
    "ResidualQuantizer",
    "GenerativeRecommender",
    "FusionStrategy",
    "TokenVocab",
    "SynthConfig",
]
