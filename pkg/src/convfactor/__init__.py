"""Factorized convolution layers, their costs and numerical checks."""

from .arch import ArchSpec, l2net_spec, load_arch, model_forward, superpoint_spec
from .cost import CostReport, LayerCost, alpha_bound, layer_cost, model_cost
from .errors import InvalidArgument, RejectedDirective, UnsupportedConfiguration, WeightMismatch
from .factorize import (decompose_layer, evbmf_rank, hooi_tucker2, merge_depthsep, merged_kernel,
                        select_bottleneck_rank)
from .layers import LayerSpec, layer_forward, param_count, random_weights, weight_shapes
from .plan import apply_plan, parse_plan

__version__ = "0.1.0"
