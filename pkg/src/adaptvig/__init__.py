"""Adaptive graph convolution backbone in a small numpy autodiff engine."""

from .agc import AGCConfig, GatingParams, agc_aggregate, gate_map, scaffold_shifts, shift_count
from .graph import build_gated_graph, build_knn_graph, build_scaffold_graph, clustering_coefficient, spectral_gap
from .model import ModelConfig, init_model, model_forward, param_count, toy_config
from .tensor import Tensor, backward, fd_check, load_tensor, save_tensor

__version__ = "0.1.0"
