from .checkpoint import CheckpointError
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .heads import (HEAD_KINDS, HeadError, HeadParams, attended_tokens, attention_weights, backward,
                    bce_loss, forward, init_params, loss_and_grads, predict_batch, predict_proba)
from .optim import Adam
from .train import TokenSet, TrainConfig, TrainLog, train

__all__ = [
    "HEAD_KINDS", "Adam", "CheckpointError", "HeadError", "HeadParams", "TokenSet", "TrainConfig",
    "TrainLog", "attended_tokens", "attention_weights", "backward", "bce_loss", "forward",
    "init_params", "load_checkpoint", "loss_and_grads", "predict_batch", "predict_proba",
    "save_checkpoint", "train",
]
