"""Minimal numpy engine for small fully convolutional regressors."""

from .checkpoint import load_model, model_from_bytes, model_to_bytes, save_model
from .gradcheck import grad_check, model_loss
from .layers import Conv2D, Model, PowerLaw, ResidualBlock, canopy_net, carbon_net
from .losses import gaussian_nll_loss, masked_mse_loss
from .optim import Adam, DivergedError

__all__ = [
    "Adam", "Conv2D", "DivergedError", "Model", "PowerLaw", "ResidualBlock",
    "canopy_net", "carbon_net", "gaussian_nll_loss", "grad_check", "load_model",
    "masked_mse_loss", "model_from_bytes", "model_loss", "model_to_bytes", "save_model",
]
