"""LiDAR place recognition on BEV images with FP32, FP16 and INT8 encoders.

Subpackages: ``ingest`` (scans, poses, synthetic worlds), ``bev``
(rasterization), ``backbone`` (graph engine and presets), ``train``,
``quant``, ``retrieval``, ``metrics`` and ``harness`` (pipeline and CLI).
"""

__version__ = "0.1.0"
