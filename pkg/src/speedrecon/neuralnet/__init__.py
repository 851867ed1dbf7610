"""Trainable estimators: TraNet and CNN6, sample generation, training, inference."""
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .inference import infer_field
from .loss import masked_imae_loss
from .models import (CNN6, NetConfig, TraNet, build, build_cnn6, build_tranet, model_layout,
                     n_params, paper_config, toy_config)
from .samples import SampleSet, augment, make_sample
from .training import TrainConfig, TrainResult, evaluate_loss, train

__all__ = [
    "CNN6", "NetConfig", "SampleSet", "TraNet", "TrainConfig", "TrainResult", "augment",
    "build", "build_cnn6", "build_tranet", "evaluate_loss", "infer_field", "load_checkpoint",
    "make_sample", "masked_imae_loss", "model_layout", "n_params", "paper_config",
    "save_checkpoint", "toy_config", "train",
]
