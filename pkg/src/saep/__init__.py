"""Spatial-aware efficient projector (SAEP) for visual token compression."""
from .errors import (ArgError, ConfigError, FormatError, NumericError, SaepError, SaepIOError,
                     ShapeError, TruncatedError)
from .grid_ops import (avg_pool_bwd, avg_pool_fwd, depthwise_conv_bwd, depthwise_conv_fwd, flatten,
                       gelu_bwd, gelu_fwd, linear_bwd, linear_fwd, pointwise_conv_bwd,
                       pointwise_conv_fwd, reorganize)
from .layers import (LayerSelection, LayerSimilarityReport, build_report, inter_layer_similarity,
                     intra_layer_similarity, select_layers)
from .projector import (CostReport, MultiLevelFeatures, SaepConfig, SaepParams, cost_report,
                        load_checkpoint, mlp_baseline_forward, saep_backward, saep_forward, saep_init,
                        save_checkpoint)
from .tensor import Rng, rand_uniform, tensor_from_npy, tensor_to_npy

__version__ = "0.1.0"
