"""Continuous-thought reasoning for a toy vision-language model, built on a small numpy autodiff core."""

from .config import RunConfig
from .data import DatasetSpec, SyntheticSample, Tokenizer, generate_dataset, load_jsonl, save_jsonl
from .errors import (
    CapacityError,
    CheckpointFormatError,
    ConfigError,
    ContractError,
    MCOUTError,
    NumericalAbort,
    ShapeError,
)
from .metrics import accuracy, bleu, corpus_bleu, extract_choice
from .model import ModelConfig, VisionLanguageModel
from .reasoning import ReasoningConfig, Variant, run_reasoning
from .tensor import Tensor, no_grad
from .training import evaluate, load_model, run_training

__version__ = "0.1.0"


def __getattr__(name):
    # sklearn is imported only when the estimator is requested
    if name == "MCOUTEstimator":
        from .estimator import MCOUTEstimator

        return MCOUTEstimator
    raise AttributeError(name)


__all__ = [
    "CapacityError", "CheckpointFormatError", "ConfigError", "ContractError", "DatasetSpec",
    "MCOUTError", "MCOUTEstimator", "ModelConfig", "NumericalAbort", "ReasoningConfig", "RunConfig",
    "ShapeError", "SyntheticSample", "Tensor", "Tokenizer", "Variant", "VisionLanguageModel",
    "accuracy", "bleu", "corpus_bleu", "evaluate", "extract_choice", "generate_dataset",
    "load_jsonl", "load_model", "no_grad", "run_reasoning", "run_training", "save_jsonl",
]
