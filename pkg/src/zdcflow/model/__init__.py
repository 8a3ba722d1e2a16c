from .checkpoint import (
    CheckpointError,
    IntegrityError,
    ModelCheckpoint,
    VersionError,
    load_checkpoint,
    save_checkpoint,
)
from .layers import Module, count_params
from .unet import UNet, UNetConfig, build_unet
from .vae import VAE, VAEConfig, build_vae
