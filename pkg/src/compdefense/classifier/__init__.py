"""Desk-scale classifiers and their training loop."""

from .models import ARCHS, Model, build_model, num_tokens, predict
from .training import TrainConfig, TrainingDivergedError, accuracy, train

__all__ = [name for name in dir() if not name.startswith("_")]
