"""Atrous-block U-shaped segmentation network in plain numpy.

Layers with hand-written backward passes, the network builder, a
receptive-field analyser, the ignore-band metric, int8 post-training
quantization and a small training harness on synthetic data.
"""

from .asb import ASBLayer, ASBLayerConfig, asb_param_count
from .checkpoint import CheckpointError, ChecksumError, ShapeTableMismatch, load_checkpoint, save_checkpoint
from .network import Network, NetworkSpec, build_default_spec, build_network, spec_param_count
from .segeval import IgnoreBandParams, evaluate_dataset, masked_jaccard, score_with_penalty
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ASBLayer", "ASBLayerConfig", "asb_param_count",
    "CheckpointError", "ChecksumError", "ShapeTableMismatch", "load_checkpoint", "save_checkpoint",
    "Network", "NetworkSpec", "build_default_spec", "build_network", "spec_param_count",
    "IgnoreBandParams", "evaluate_dataset", "masked_jaccard", "score_with_penalty",
    "Tensor",
]
