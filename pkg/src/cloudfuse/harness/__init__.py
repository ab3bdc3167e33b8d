"""Training, evaluation, checkpointing and the command line."""

from cloudfuse.harness.checkpoint import Checkpoint, load_checkpoint
from cloudfuse.harness.config import TrainConfig, load_config
from cloudfuse.harness.training import Trainer, ablation_pair, evaluate, train

__all__ = [
    "Checkpoint",
    "TrainConfig",
    "Trainer",
    "ablation_pair",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "train",
]
