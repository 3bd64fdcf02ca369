"""Multimodal geospatial pretraining at desk scale: synthetic aligned tiles,
rule-based caption agents, masked reconstruction, latent prediction and
caption-tile contrastive alignment on a small numpy autodiff core."""

from .autograd import Tensor, finite_diff_check, no_grad
from .masking import MaskPair, make_masks
from .model import JointModel, ModelConfig, ema_update, load_checkpoint, save_checkpoint
from .synth import generate_tile, geomorphon_classify, temporal_anchor, water_consensus
from .tiles import MODALITIES, TileSample, read_tile, write_tile
from .train import TrainConfig, adamw_step, cosine_lr, train

__all__ = [
    "Tensor", "finite_diff_check", "no_grad", "MaskPair", "make_masks", "JointModel", "ModelConfig",
    "ema_update", "load_checkpoint", "save_checkpoint", "generate_tile", "geomorphon_classify",
    "temporal_anchor", "water_consensus", "MODALITIES", "TileSample", "read_tile", "write_tile",
    "TrainConfig", "adamw_step", "cosine_lr", "train",
]
