"""Post-training quantization: calibration, INT8 conversion and execution, FP16 emulation."""
from .calib import RESERVOIR_CAP, Reservoir, SiteStats, collect_stats, load_stats, save_stats, stat_sites
from .core import (QMAX, QMIN, S_MIN, QuantParams, QuantTensor, calibrate_mse,
                   common_shift_multipliers, dequantize, minmax_params, multiplier_value,
                   quant_mse, quantize, quantize_multiplier, quantize_tensor)
from .fp16 import forward_fp16, half_weights, to_binary16
from .model import (QuantizedModel, dequantize_head, forward_int8, forward_int8_raw,
                    hard_swish_lut, load_quantized, quantize_model, save_quantized, trace_digest)

__all__ = [
    "QMAX", "QMIN", "RESERVOIR_CAP", "S_MIN", "QuantParams", "QuantTensor", "QuantizedModel",
    "Reservoir", "SiteStats", "calibrate_mse", "load_stats", "save_stats", "collect_stats", "common_shift_multipliers",
    "dequantize", "dequantize_head", "forward_fp16", "forward_int8", "forward_int8_raw",
    "half_weights", "hard_swish_lut", "load_quantized", "minmax_params", "multiplier_value",
    "quant_mse", "quantize", "quantize_model", "quantize_multiplier", "quantize_tensor",
    "save_quantized", "stat_sites", "to_binary16", "trace_digest",
]
