"""Functional time embeddings and a time-aware self-attention next-event model.

The package is layered bottom-up:

* :mod:`timekernel.autodiff` - a small reverse-mode tensor engine.
* :mod:`timekernel.embeddings` - Bochner (random-feature) and Mercer
  (Fourier-series) time embeddings plus a positional-encoding baseline.
* :mod:`timekernel.kernels` - reference kernels and the numerical checks
  behind the embeddings (Monte-Carlo error, eigenfunction residuals, decay).
* :mod:`timekernel.model` / :mod:`timekernel.training` - the attention model,
  Adam, losses, ranking metrics and checkpoints.
* :mod:`timekernel.data` - synthetic tasks with known Bayes rates, JSONL I/O.
* :mod:`timekernel.cli` - the ``timekernel`` command.
"""

from .autodiff import DimensionError, Tape, TapeStateError, Tensor
from .data import (
    Dataset,
    EventSequence,
    GapRuleTask,
    ParseError,
    PeriodicAttentionTask,
    bayes_rates,
    generate,
    load_jsonl,
    write_jsonl,
)
from .embeddings import (
    BochnerInvCdf,
    BochnerNonParam,
    BochnerNormal,
    MercerEmbedding,
    PositionalEncoding,
    export_gram,
    export_phi_matrix,
    init_frequencies_geometric,
    kernel_estimate,
    make_embedder,
)
from .estimator import TimeAwareSelfAttention
from .kernels import (
    KernelSpec,
    PeriodicKernelSpec,
    claim1_bound,
    cosine_spec,
    eigenfunction_residual,
    gaussian_spec,
    mc_approximation_study,
    triangle_spec,
    truncation_decay,
)
from .model import ModelConfig, TimeAttentionModel, export_attention, lag_transform, make_examples
from .streams import derive_seed, rng_stream
from .training import (
    Checkpoint,
    MetricReport,
    OptimConfig,
    Trainer,
    adam_step,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .validation import CheckpointError, ConfigError, InputError, NumericalError, SpecError

__version__ = "0.1.0"

__all__ = [
    "BochnerInvCdf",
    "BochnerNonParam",
    "BochnerNormal",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "Dataset",
    "DimensionError",
    "EventSequence",
    "GapRuleTask",
    "InputError",
    "KernelSpec",
    "MercerEmbedding",
    "MetricReport",
    "ModelConfig",
    "NumericalError",
    "OptimConfig",
    "ParseError",
    "PeriodicAttentionTask",
    "PeriodicKernelSpec",
    "PositionalEncoding",
    "SpecError",
    "Tape",
    "TapeStateError",
    "Tensor",
    "TimeAttentionModel",
    "TimeAwareSelfAttention",
    "Trainer",
    "adam_step",
    "bayes_rates",
    "claim1_bound",
    "cosine_spec",
    "derive_seed",
    "eigenfunction_residual",
    "evaluate",
    "export_attention",
    "export_gram",
    "export_phi_matrix",
    "gaussian_spec",
    "generate",
    "init_frequencies_geometric",
    "kernel_estimate",
    "lag_transform",
    "load_checkpoint",
    "load_jsonl",
    "make_embedder",
    "make_examples",
    "mc_approximation_study",
    "rng_stream",
    "save_checkpoint",
    "train",
    "triangle_spec",
    "truncation_decay",
    "write_jsonl",
]
