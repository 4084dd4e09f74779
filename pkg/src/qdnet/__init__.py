"""Quantum discord detection for general two-qubit states.

Pipeline: labeled state generation with an exact zero-discord criterion
and a brute-force discord oracle, convolutional feature extraction whose
kernels are observable operators, a from-scratch trainable classifier
head, and a circuit reduction that swaps the convolution for rotated
z-basis expectation values.
"""

__version__ = "0.1.0"

from .features import HermitianKernel, extract_features, path_set
from .network import Metrics, Model, ModelConfig, evaluate, train
from .states import (
    DiscordResult,
    LabeledSample,
    discord_oracle,
    generate_dataset,
    is_zero_discord,
    sample_non_discordant,
    sample_random_state,
)

__all__ = [
    "DiscordResult",
    "HermitianKernel",
    "LabeledSample",
    "Metrics",
    "Model",
    "ModelConfig",
    "__version__",
    "discord_oracle",
    "evaluate",
    "extract_features",
    "generate_dataset",
    "is_zero_discord",
    "path_set",
    "sample_non_discordant",
    "sample_random_state",
    "train",
]
