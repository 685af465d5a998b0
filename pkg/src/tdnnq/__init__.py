"""Integer quantization, quantization-aware training and low-rank factorization for TDNN acoustic models."""

from .int_kernels import (
    AccumulatorOverflowError,
    IntConvPlan,
    build_plan,
    conv1d_int,
    int_matmul_float_out,
    int_matmul_requant,
    integer_core,
)
from .lowrank import FactorizedLayer, factorize_model, ranks_for_ratio, svd_truncate
from .model_io import ModelFormatError, load_features, load_labels, load_model, save_features, save_model
from .ptq import CalibrationStats, QuantConfig, calibrate, quantize_full, quantize_weights_only
from .qat import QatSchedule, QatState, ToyConfig, qat_forward, ste_backward, train, train_toy
from .quant_core import (
    InvalidInputError,
    QuantizedTensor,
    QuantParams,
    RangeStats,
    compute_qparams,
    dequantize,
    fake_quantize,
    quantize,
)
from .tdnn import TdnnLayer, TdnnModel, forward_float, forward_quantized, random_model, splice

__version__ = "0.1.0"
