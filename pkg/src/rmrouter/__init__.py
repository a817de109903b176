"""Router-based reward models built on a small numpy autodiff engine."""

from .data import RewardExample, synth_generate
from .encoder import DESK_BASE, DESK_LARGE, EncoderConfig, Vocab
from .evaluation import binary_accuracy, bench_inference, run_matrix
from .lora import AdapterHost, AdapterSpec
from .moe import MoEConfig
from .pipeline import METHODS, MethodSettings, add_domain, load_assembly, save_assembly, train_method
from .training import TrainConfig, pairwise_loss, preset

__version__ = "0.1.0"

__all__ = [
    "AdapterHost",
    "AdapterSpec",
    "DESK_BASE",
    "DESK_LARGE",
    "EncoderConfig",
    "METHODS",
    "MethodSettings",
    "MoEConfig",
    "RewardExample",
    "TrainConfig",
    "Vocab",
    "add_domain",
    "bench_inference",
    "binary_accuracy",
    "load_assembly",
    "pairwise_loss",
    "preset",
    "run_matrix",
    "save_assembly",
    "synth_generate",
    "train_method",
]
