"""Neural semantic parsing with LSTM sequence and tree decoders, in plain numpy."""
from .lf import LfTree, parse, serialize
from .model import ModelParameters, decode_tree, greedy_decode_seq, seq_log_prob, tree_log_prob
from .pipeline import Pipeline
from .training import TrainConfig, train

__all__ = [
    "LfTree", "ModelParameters", "Pipeline", "TrainConfig",
    "decode_tree", "greedy_decode_seq", "parse", "seq_log_prob", "serialize", "train", "tree_log_prob",
]
__version__ = "0.1.0"
