"""Interpretable deep Q-network with a key-value attention head, trained on PelletWorld."""

from idqn.env import Action, LayoutConfig, PelletWorld
from idqn.losses import LossWeights
from idqn.model import IDQN, ModelConfig, select_action
from idqn.trainer import TrainerConfig, evaluate, train

__all__ = [
    "Action",
    "IDQN",
    "LayoutConfig",
    "LossWeights",
    "ModelConfig",
    "PelletWorld",
    "TrainerConfig",
    "evaluate",
    "select_action",
    "train",
]
__version__ = "0.1.0"
