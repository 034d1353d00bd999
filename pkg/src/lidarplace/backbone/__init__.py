"""Configurable CNN encoder: graph, float inference, gradients and footprints."""
from .engine import (Tape, backward, fold_batchnorm, fold_conv_bn, forward, forward_record,
                     normalize_descriptors, run, update_bn_running)
from .graph import GRAPH_INPUT, GraphBuilder, Layer, ModelGraph
from .ops import channel_shuffle, conv2d
from .presets import PRESETS, build_preset
from .store import WeightStore, init_weights, load_weights, save_weights

_BYTES = {"fp32": 4, "fp16": 2, "int8": 1}


def memory_footprint(param_count: int, precision: str) -> float:
    """Weight storage in MiB (bytes / 1024**2)."""
    if precision not in _BYTES:
        raise ValueError(f"precision must be one of {sorted(_BYTES)}")
    if param_count < 0:
        raise ValueError("param_count must be non-negative")
    return param_count * _BYTES[precision] / 1024 ** 2


__all__ = [
    "GRAPH_INPUT", "GraphBuilder", "Layer", "ModelGraph", "PRESETS", "Tape", "WeightStore",
    "backward", "build_preset", "channel_shuffle", "conv2d", "fold_batchnorm", "fold_conv_bn",
    "forward", "forward_record", "init_weights", "load_weights", "memory_footprint",
    "normalize_descriptors", "run", "save_weights", "update_bn_running",
]
