"""Group-fusion Transformer for sequence-to-sequence learning, on a small numpy autograd engine."""

from .autograd import NonFiniteError, ParameterError, ShapeError, Tape, Tensor, backward, no_grad
from .data import DataError, SentencePair, Vocabulary, gen_synthetic, load_tsv, make_batches
from .fusion import GroupScheme, group_boundaries
from .inference import PruneSpec, apply_prune, beam_search, greedy_decode, greedy_decode_batch
from .model import ConfigError, Model, ModelConfig, build_model, decode, encode, multi_level_loss
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "GroupScheme", "Model", "ModelConfig", "NonFiniteError",
    "ParameterError", "PruneSpec", "SentencePair", "ShapeError", "Tape", "Tensor", "TrainConfig",
    "Vocabulary", "apply_prune", "backward", "beam_search", "build_model", "decode", "encode",
    "gen_synthetic", "greedy_decode", "greedy_decode_batch", "group_boundaries", "load_tsv",
    "make_batches", "multi_level_loss", "no_grad", "train",
]
