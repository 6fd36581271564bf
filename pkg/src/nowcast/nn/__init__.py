from .model import (
    AttentionNet,
    Discriminator,
    ModelState,
    NetConfig,
    Predictor,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "AttentionNet",
    "Discriminator",
    "ModelState",
    "NetConfig",
    "Predictor",
    "load_checkpoint",
    "save_checkpoint",
]
