"""Weight-only post-training quantization: dual-scale down-projections and mean-shift correction."""

from .dac import DeviationStats, calibrate_bias, deviation_stats, predict_reduction, realized_reduction
from .dsq import (
    DualScaleResult,
    UpDownScaling,
    apply_updown_scaling,
    dsq_quantize,
    fold_scale,
    static_smooth_eta,
)
from .formats import load_calibration, load_model, save_model, write_report
from .model import ModelBundle, ModelConfig, init_random, model_forward
from .pipeline import CalibrationSet, PipelineConfig, ablation_matrix, run_d2quant
from .quant import PER_CHANNEL, QuantConfig, QuantizedTensor, dequantize, identity_quantize, quantize

__version__ = "0.1.0"
