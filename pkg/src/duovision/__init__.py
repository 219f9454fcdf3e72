"""duovision: a small unified multimodal model, built on numpy.

One autoregressive transformer both answers questions about images and
generates images. Two separate frozen vision towers feed it: a
patch-level tower for understanding and a pooled-vector tower (with a
pixel decoder) for generation. Everything runs on CPU over a synthetic
scene world with exact ground truth, so representation questions can be
tested rather than eyeballed.
"""

__version__ = "0.1.0"

from .config import (EvalConfig, LMConfig, PretrainConfig, RunConfig, StageConfig,
                     VisionConfig, default_stages, load_toml)
from .data import (VOCAB, caption_long, caption_short, gen_scene, make_qa,
                   noisy_render, parse_scene, render_scene)
from .encoders import VisionSystem, pretrain_all
from .errors import (CheckpointError, ConfigurationError, DataError, DimensionError,
                     DuovisionError, NumericalError, PretrainingError, TruncationError,
                     UsageError)
from .evaluation import fid_score, frechet_distance, qa_accuracy, toy_fid, toy_geneval
from .inference import (answer_questions, generate_image, generate_images,
                        sample_image_vectors, write_png, write_ppm)
from .model import LanguageModel, assemble_generation, assemble_understanding, unified_loss
from .tensor import Tape, Tensor, gradcheck
from .training import load_model, run_pipeline, run_stage

__all__ = [
    "CheckpointError", "ConfigurationError", "DataError", "DimensionError",
    "DuovisionError", "EvalConfig", "LMConfig", "LanguageModel", "NumericalError",
    "PretrainConfig", "PretrainingError", "RunConfig", "StageConfig", "Tape", "Tensor",
    "TruncationError", "UsageError", "VOCAB", "VisionConfig", "VisionSystem",
    "answer_questions", "assemble_generation", "assemble_understanding", "caption_long",
    "caption_short", "default_stages", "fid_score", "frechet_distance", "gen_scene",
    "generate_image", "generate_images", "gradcheck", "load_model", "load_toml",
    "make_qa", "noisy_render", "parse_scene", "pretrain_all", "qa_accuracy",
    "render_scene", "run_pipeline", "run_stage", "sample_image_vectors", "toy_fid",
    "toy_geneval", "unified_loss", "write_png", "write_ppm",
]
