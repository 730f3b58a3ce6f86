"""Masked Sinogram Model 與下游輸出頭。"""

from tomo_core.model.layers import Module
from tomo_core.model.msm import (
    AttentionMap,
    MaskedSinogramModel,
    TokenSequence,
    extract_attention,
    msm_loss,
)
from tomo_core.model.patches import assemble_patches, image_to_patches, patches_to_image

__all__ = [
    'AttentionMap',
    'MaskedSinogramModel',
    'Module',
    'TokenSequence',
    'assemble_patches',
    'extract_attention',
    'image_to_patches',
    'msm_loss',
    'patches_to_image',
]
