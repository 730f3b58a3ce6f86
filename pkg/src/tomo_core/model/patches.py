"""影像與 patch 序列互轉。

patch 依由上到下、由左到右排列；每個 patch 內為 row-major。
"""

from __future__ import annotations

import numpy as np
import numpy.typing as npt

from tomo_core.diffcore import Tensor, reshape, transpose
from tomo_core.exceptions import ShapeError

_SWAP = (0, 1, 3, 2, 4)


def _grid(n_patches: int, patch_pixels: int) -> tuple[int, int]:
    per_side = int(round(n_patches**0.5))
    patch_side = int(round(patch_pixels**0.5))
    if per_side**2 != n_patches or patch_side**2 != patch_pixels:
        raise ShapeError('patches', (n_patches, patch_pixels), (per_side**2, patch_side**2))
    return per_side, patch_side


def assemble_patches(patches: Tensor) -> Tensor:
    """(B, n_patches, patch_side²) → (B, side, side)，可微分。"""
    batch, n_patches, patch_pixels = patches.shape
    g, p = _grid(n_patches, patch_pixels)
    tiled = transpose(reshape(patches, (batch, g, g, p, p)), _SWAP)
    return reshape(tiled, (batch, g * p, g * p))


def patches_to_image(patches: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """numpy 版 assemble：(B, n_patches, patch_side²) → (B, side, side)。"""
    arr = np.asarray(patches, dtype=np.float64)
    batch, n_patches, patch_pixels = arr.shape
    g, p = _grid(n_patches, patch_pixels)
    return arr.reshape(batch, g, g, p, p).transpose(_SWAP).reshape(batch, g * p, g * p)


def image_to_patches(images: npt.ArrayLike, patch_side: int) -> npt.NDArray[np.float64]:
    """(B, side, side) → (B, n_patches, patch_side²)，為 patches_to_image 的反函數。"""
    arr = np.asarray(images, dtype=np.float64)
    batch, rows, cols = arr.shape
    if rows != cols or rows % patch_side != 0:
        raise ShapeError('image_to_patches', (rows, cols), (patch_side, patch_side))
    g = rows // patch_side
    tiled = arr.reshape(batch, g, patch_side, g, patch_side).transpose(_SWAP)
    return tiled.reshape(batch, g * g, patch_side * patch_side)
