"""Discriminant channel scoring, FLOP accounting, and structural pruning."""

from .engine import (Dataset, WeightStore, apply_plan_weights, capture_activations,
                     evaluate_accuracy, forward, load_dataset, load_weights,
                     save_dataset, save_weights, validate_weights)
from .metrics import (ChannelScore, ClassStats, MetricConfig, NumericError,
                      channel_stats, di, g_score, mmd, rank_channels, score_channel,
                      score_layer, sd)
from .netgraph import (FlossTable, GraphError, LayerSpec, NetworkGraph, PruningPlan,
                       apply_plan_graph, build_plan, flop_count, floss, load_graph,
                       load_plan, param_count, pruning_counts, save_graph, save_plan)
from .sensitivity import (RunConfig, SensitivityReport, analyze, iterate,
                          select_and_plan)
from .tensorstore import (ActivationSet, FormatError, load_labels, load_tensor,
                          save_labels, save_tensor, slice_channel)

__version__ = "0.1.0"
