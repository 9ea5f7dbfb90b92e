"""From-scratch recurrent forecaster: LSTM/GRU cells, dense head, BPTT, Adam."""

from .layers import (
    DenseHeadParams, GruLayerParams, LayerState, LstmLayerParams, ShapeError,
    dense_head_forward, gru_cell_forward, lstm_cell_forward, zero_state,
)
from .model import (
    ModelParams, Normalizer, RecurrentState, load_checkpoint, model_forward, model_step,
    save_checkpoint,
)
from .train import TrainConfig, TrainingError, adam_step, bptt_gradients, mse_loss, train

__all__ = [
    "DenseHeadParams", "GruLayerParams", "LayerState", "LstmLayerParams", "ShapeError",
    "dense_head_forward", "gru_cell_forward", "lstm_cell_forward", "zero_state",
    "ModelParams", "Normalizer", "RecurrentState", "load_checkpoint", "model_forward",
    "model_step", "save_checkpoint",
    "TrainConfig", "TrainingError", "adam_step", "bptt_gradients", "mse_loss", "train",
]
