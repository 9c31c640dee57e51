"""Rodimus / Rodimus+ sequence mixers.

Core pieces:
  - tensor: numpy-backed reverse-mode autodiff with a deterministic matmul mode
  - ddts: the data-dependent tempered-selection linear-attention kernel in
    recurrent, parallel, and chunkwise forms
  - attention: MHA / GQA / shared-key attention with sliding-window masks
  - blocks / model: Rodimus and Rodimus+ blocks and full LM assembly
  - train / data / optim / reports / cli: desk-scale experiment harness
"""

from .attention import AttentionParams, KVWindowCache, MaskSpec, attention_forward
from .blocks import RodimusBlockParams, RodimusPlusBlockParams, rodimus_block_forward, rodimus_plus_block_forward
from .data import MqarConfig, byte_corpus_load, mqar_generate
from .ddts import Activations, GateParams, compute_gates, ddts_chunkwise, ddts_parallel, ddts_scan
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    IntegrityError,
    NonFiniteError,
    RodimusError,
    ShapeError,
)
from .model import InferenceSession, ModelConfig, ModelParams, build_model, forward_train, memory_report
from .optim import AdamW, clip_global_norm, cosine_schedule
from .rng import Rng
from .tensor import Tensor, gradients, set_default_dtype, set_deterministic
from .train import TrainConfig, train

__all__ = [
    "Activations",
    "AdamW",
    "AttentionParams",
    "ConfigError",
    "DataError",
    "DomainError",
    "GateParams",
    "InferenceSession",
    "IntegrityError",
    "KVWindowCache",
    "MaskSpec",
    "ModelConfig",
    "ModelParams",
    "MqarConfig",
    "NonFiniteError",
    "Rng",
    "RodimusBlockParams",
    "RodimusError",
    "RodimusPlusBlockParams",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "attention_forward",
    "build_model",
    "byte_corpus_load",
    "clip_global_norm",
    "compute_gates",
    "cosine_schedule",
    "ddts_chunkwise",
    "ddts_parallel",
    "ddts_scan",
    "forward_train",
    "gradients",
    "memory_report",
    "mqar_generate",
    "rodimus_block_forward",
    "rodimus_plus_block_forward",
    "set_default_dtype",
    "set_deterministic",
    "train",
]
__version__ = "0.1.0"
