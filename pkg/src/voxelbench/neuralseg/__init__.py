from .layers import (
    bce_loss,
    conv_backward,
    conv_forward,
    maxpool_backward,
    maxpool_forward,
    sigmoid,
    upconv_backward,
    upconv_forward,
)
from .optim import AdamState, adam_step
from .training import TrainConfig, predict_voi, threshold_mask, train_unet
from .unet import (
    UNetConfig,
    UNetModel,
    init_unet,
    load_model,
    model_footprint,
    save_model,
    unet_backward,
    unet_forward,
)

__all__ = [
    "AdamState",
    "TrainConfig",
    "UNetConfig",
    "UNetModel",
    "adam_step",
    "bce_loss",
    "conv_backward",
    "conv_forward",
    "init_unet",
    "load_model",
    "maxpool_backward",
    "maxpool_forward",
    "model_footprint",
    "predict_voi",
    "save_model",
    "sigmoid",
    "threshold_mask",
    "train_unet",
    "unet_backward",
    "unet_forward",
    "upconv_backward",
    "upconv_forward",
]
