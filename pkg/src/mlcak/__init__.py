"""Multilevel collaborative attention knowledge transfer.

A high-resolution vision-transformer teacher hands its mean encoder-layer
representation and dual-task soft logits to a low-resolution student. The
package carries its own reverse-mode autodiff engine, a pre-norm ViT with
finding-level and global heads, the transfer losses, a synthetic
finding-bearing dataset generator with a resolution degradation pipeline,
AUROC evaluation, and a CLI tying it together.
"""
from .checkpoint import load_checkpoint, read_config, save_checkpoint
from .data import (
    Manifest,
    ResolutionSpec,
    SampleRecord,
    batches,
    degrade,
    degrade_batch,
    load_image,
    load_manifest,
    save_manifest,
    write_pgm,
)
from .errors import (
    ConfigError,
    ContractError,
    NumericalError,
    ParseError,
    ShapeError,
)
from .estimators import MultiTaskViTClassifier
from .losses import (
    SCHEMES,
    KDConfig,
    LossBreakdown,
    bce_with_logits,
    feature_kd_loss,
    joint_loss,
    mlcak_summary,
    mse_loss,
    one_hot,
    vanilla_kd_loss,
)
from .metrics import EvalReport, auroc, evaluate, export_attention
from .optim import AdamW, CosineSchedule, cosine_lr
from .synth import Blob, SyntheticConfig, generate_synthetic, render_sample
from .tensor import Tape, Tensor
from .vit import (
    ForwardTrace,
    ViTConfig,
    ViTModel,
    attention_grid,
    init_model,
    patchify,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Blob",
    "ConfigError",
    "ContractError",
    "CosineSchedule",
    "EvalReport",
    "ForwardTrace",
    "KDConfig",
    "LossBreakdown",
    "Manifest",
    "MultiTaskViTClassifier",
    "NumericalError",
    "ParseError",
    "ResolutionSpec",
    "SCHEMES",
    "SampleRecord",
    "ShapeError",
    "SyntheticConfig",
    "Tape",
    "Tensor",
    "ViTConfig",
    "ViTModel",
    "attention_grid",
    "auroc",
    "batches",
    "bce_with_logits",
    "cosine_lr",
    "degrade",
    "degrade_batch",
    "evaluate",
    "export_attention",
    "feature_kd_loss",
    "generate_synthetic",
    "init_model",
    "joint_loss",
    "load_checkpoint",
    "load_image",
    "load_manifest",
    "mlcak_summary",
    "mse_loss",
    "one_hot",
    "patchify",
    "read_config",
    "render_sample",
    "save_checkpoint",
    "save_manifest",
    "vanilla_kd_loss",
    "write_pgm",
]
