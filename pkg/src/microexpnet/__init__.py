"""Self-contained micro-CNN engine for facial expression recognition:
a four-size model family with pooling variants, knowledge-distillation
training on numpy alone, cross-validation protocols, and size/latency
measurement."""

from .architecture import (
    Model,
    ModelSpec,
    PoolingVariant,
    SizeClass,
    build_model,
    count_parameters,
    load_checkpoint,
    model_size_bytes,
    parameter_breakdown,
    save_checkpoint,
    size_report,
)
from .benchmark import BenchReport, bench_inference
from .data import (
    DatasetManifest,
    FoldSplit,
    Sample,
    bilinear_resize,
    center_crop,
    decode_grayscale,
    eight_crops,
    load_manifest,
    make_folds,
    subject_overlap_fraction,
)
from .distillation import (
    DistillationConfig,
    TeacherLogits,
    kd_loss,
    load_teacher_logits,
    softened_softmax,
)
from .errors import (
    ConfigurationError,
    CoverageError,
    DimensionError,
    FormatError,
    NumericError,
    ValidationError,
)
from .experiment import (
    ExperimentResult,
    TrainConfig,
    cross_validate,
    evaluate,
    flag_best,
    loss_trend_ok,
    pooling_ablation,
    predict_logits,
    read_results_jsonl,
    temperature_sweep,
    train,
    train_full,
    write_results_csv,
    write_results_jsonl,
)
from .layers import (
    AdamState,
    ConvLayer,
    DenseLayer,
    MaxPoolLayer,
    adam_step,
    conv_backward,
    conv_forward,
    cross_entropy,
    dense_backward,
    dense_forward,
    dropout_forward,
    maxpool_backward,
    maxpool_forward,
    softmax,
    softmax_cross_entropy,
    xavier_init,
)
from .tensor import Tensor, as_tensor, elementwise, matmul, numerical_gradient

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BenchReport",
    "ConfigurationError",
    "ConvLayer",
    "CoverageError",
    "DatasetManifest",
    "DenseLayer",
    "DimensionError",
    "DistillationConfig",
    "ExperimentResult",
    "FoldSplit",
    "FormatError",
    "MaxPoolLayer",
    "Model",
    "ModelSpec",
    "NumericError",
    "PoolingVariant",
    "Sample",
    "SizeClass",
    "TeacherLogits",
    "Tensor",
    "TrainConfig",
    "ValidationError",
    "adam_step",
    "as_tensor",
    "bench_inference",
    "bilinear_resize",
    "build_model",
    "center_crop",
    "conv_backward",
    "conv_forward",
    "count_parameters",
    "cross_entropy",
    "cross_validate",
    "decode_grayscale",
    "dense_backward",
    "dense_forward",
    "dropout_forward",
    "eight_crops",
    "elementwise",
    "evaluate",
    "flag_best",
    "kd_loss",
    "load_checkpoint",
    "load_manifest",
    "load_teacher_logits",
    "loss_trend_ok",
    "make_folds",
    "matmul",
    "maxpool_backward",
    "maxpool_forward",
    "model_size_bytes",
    "numerical_gradient",
    "parameter_breakdown",
    "pooling_ablation",
    "predict_logits",
    "read_results_jsonl",
    "save_checkpoint",
    "size_report",
    "softened_softmax",
    "softmax",
    "softmax_cross_entropy",
    "subject_overlap_fraction",
    "temperature_sweep",
    "train",
    "train_full",
    "write_results_csv",
    "write_results_jsonl",
    "xavier_init",
]
