"""Selective windowing attention for long-sequence classification.

Limited-range self-attention, max-pooled window prompts with windowing
cross-attention, and learned window weighing, built on a minimal reverse-mode
autodiff tensor core, with baselines, a synthetic planted-event benchmark, and
a cross-validated training/evaluation harness.
"""

from .attention import (
    ConfigError,
    WindowSpec,
    build_self_mask,
    build_window_mask,
    positional_encoding,
)
from .data import (
    GeneratorConfig,
    SequenceSample,
    detector_uar,
    generate,
    load_dataset,
    resample,
    save_dataset,
    split_subjects,
    upsample_minority,
)
from .models import (
    ModelConfig,
    build_variant,
    count_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Adam, Tape, Tensor
from .train import (
    CvReport,
    RunReport,
    SweepReport,
    evaluate,
    export_attention,
    paired_t_test,
    run_cv,
    sweep_windows,
    uar,
)

__version__ = "0.1.0"
