"""HybridNetSeg: a compact vessel segmentation network with hand-derived gradients.

Everything runs on numpy arrays; hot loops have numba kernels with a pure-numpy
fallback (``HSEG_BACKEND=numpy``).

The ``train`` and ``metrics`` functions are left in their submodules so
``hseg.train`` and ``hseg.metrics`` keep naming the modules.
"""
from ._backend import BACKEND
from .data import AugmentConfig, Sample, load_dataset, load_sample, make_splits, synth_vessels
from .losses import combined_loss, mixed_loss
from .metrics import MetricsReport, auc, confusion
from .network import (EncoderSpec, HybridNet, LayerSpec, build_model, count_macs, count_params, load_checkpoint,
                      save_checkpoint)
from .train import TrainConfig, evaluate

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "AugmentConfig", "Sample", "load_dataset", "load_sample", "make_splits", "synth_vessels",
    "combined_loss", "mixed_loss", "MetricsReport", "auc", "confusion", "EncoderSpec", "HybridNet",
    "LayerSpec", "build_model", "count_macs", "count_params", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "evaluate",
]
