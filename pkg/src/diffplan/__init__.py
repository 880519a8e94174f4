"""diffplan: parallel masked-demasking trajectory planner with benchmark harness."""

from .codec import (
    FixedPatternTemplate,
    MalformedSequence,
    TokenSequence,
    Trajectory,
    Vocabulary,
    build_template,
    decode,
    default_vocabulary,
    degenerate_template,
    encode,
    fresh_masked,
    render,
)
from .decoder import DecodeConfig, DecodeTrace, decode_autoregressive, decode_diffusion, predict_all, remask
from .model import (
    DimensionMismatch,
    MaskPredictor,
    ModelConfig,
    ModelInput,
    NoMaskedPositions,
    load_checkpoint,
    save_checkpoint,
)
from .training import ConfigError, TrainConfig, TrainReport, apply_forward_masking, train, train_step
from .world import generate_parking, generate_scene

__all__ = [
    "FixedPatternTemplate",
    "MalformedSequence",
    "TokenSequence",
    "Trajectory",
    "Vocabulary",
    "build_template",
    "decode",
    "default_vocabulary",
    "degenerate_template",
    "encode",
    "fresh_masked",
    "render",
    "DecodeConfig",
    "DecodeTrace",
    "decode_autoregressive",
    "decode_diffusion",
    "predict_all",
    "remask",
    "DimensionMismatch",
    "MaskPredictor",
    "ModelConfig",
    "ModelInput",
    "NoMaskedPositions",
    "load_checkpoint",
    "save_checkpoint",
    "ConfigError",
    "TrainConfig",
    "TrainReport",
    "apply_forward_masking",
    "train",
    "train_step",
    "generate_parking",
    "generate_scene",
]

__version__ = "0.1.0"
