"""Modal-alternating propagation for few-shot classification, on numpy."""

from .episodes import Dataset, Episode, SynthSpec, load_embeddings, sample_episode, synth_generate
from .model import AblationMode, ModelParams, map_forward
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AblationMode", "Dataset", "Episode", "ModelParams", "SynthSpec", "TrainConfig",
    "evaluate", "load_embeddings", "map_forward", "sample_episode", "synth_generate", "train",
]
