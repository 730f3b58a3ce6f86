"""Masked Sinogram Model。

每個投影（sinogram 的一列）是一個 token：encoder 只處理可見的投影，
decoder 在遮罩位置補上可學習的 mask token 後還原完整序列。
輸出頭有兩種：
- sino_decoder：每個 token 映射回 token_dim 個 bin（MSM / SV-Tx / Dn-Tx）
- image_patch_decoder：patch 位置 query 對 sinogram token 做 cross-attention，
  輸出 patch 序列再拼回影像（C-Tx）

所有輸入 sinogram 皆為除以資料集 scale 後的正規化值。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt

from tomo_core.config import ModelConfig
from tomo_core.ctgeom import MaskedSinogram
from tomo_core.diffcore import (
    Tensor,
    add,
    broadcast_to,
    concat_rows,
    gather_rows,
    mse_loss,
    no_grad,
    reshape,
)
from tomo_core.diffcore.tensor import Array
from tomo_core.exceptions import ContractError, ShapeError
from tomo_core.model.layers import (
    AttentionCapture,
    Block,
    CrossBlock,
    LayerNorm,
    Linear,
    Module,
    init_normal,
)
from tomo_core.model.patches import assemble_patches

logger = logging.getLogger(__name__)

IntArray = npt.NDArray[np.int64]
ENCODER_PREFIX = 'encoder.'
DECODER_PREFIX = 'decoder.'


@dataclass
class TokenSequence:
    """token 序列。

    Attributes:
        tokens: (B, L, d_model) 啟動值
        angle_ids: (B, L) 每個 token 對應的原始角度索引
    """

    tokens: Tensor
    angle_ids: IntArray

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


@dataclass
class AttentionMap:
    """單一層、單一注意力頭的 softmax 後權重。

    Attributes:
        layer: 層索引（0 起算）
        head: 頭索引（0 起算）
        weights: (L_query, L_key)
    """

    layer: int
    head: int
    weights: npt.NDArray[np.float64]


def _as_batch_ids(ids: npt.ArrayLike, batch: int) -> IntArray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (batch, arr.shape[0]))
    return arr


def _check_kept(kept: IntArray, total_angles: int) -> None:
    if kept.size == 0:
        raise ContractError('kept_indices 不可為空')
    if kept.min() < 0 or kept.max() >= total_angles:
        raise ContractError(f'kept_indices 超出 [0, {total_angles})')
    if kept.shape[1] > 1 and np.any(np.diff(kept, axis=1) <= 0):
        raise ContractError('kept_indices 必須嚴格遞增')


def _unshuffle(visible: Tensor, fill: Tensor, kept: IntArray, total_angles: int) -> Tensor:
    """將 [可見 token, 遮罩 token] 依角度排回完整序列 (B, total_angles, D)。"""
    batch, n_kept, width = visible.shape
    if n_kept == total_angles:
        return visible
    full = concat_rows([visible, broadcast_to(fill, (batch, total_angles - n_kept, width))], 1)
    restore = np.empty((batch, total_angles), dtype=np.int64)
    for b in range(batch):
        masked = np.setdiff1d(np.arange(total_angles), kept[b], assume_unique=True)
        order = np.concatenate((kept[b], masked))
        restore[b] = np.argsort(order) + b * total_angles
    flat = reshape(full, (batch * total_angles, width))
    return gather_rows(flat, restore)


class Encoder(Module):
    """投影嵌入加上 pre-norm self-attention 堆疊。"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.token_embed = Linear(config.token_dim, config.d_model, rng)
        self.pos_embed = init_normal(rng, (config.max_angles, config.d_model))
        self.blocks = [
            Block(config.d_model, config.n_heads, config.d_ff, rng)
            for _ in range(config.n_enc_layers)
        ]
        self.norm = LayerNorm(config.d_model)


class SinoDecoder(Module):
    """在遮罩位置插入 mask token，self-attention 後每個 token 映射回一列 sinogram。"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.decoder_embed = Linear(config.d_model, config.d_model, rng)
        self.mask_token = init_normal(rng, (1, 1, config.d_model))
        self.pos_embed = init_normal(rng, (config.max_angles, config.d_model))
        self.blocks = [
            Block(config.d_model, config.n_heads, config.d_ff, rng)
            for _ in range(config.n_dec_layers)
        ]
        self.norm = LayerNorm(config.d_model)
        self.head = Linear(config.d_model, config.token_dim, rng)


class PatchDecoder(Module):
    """可學習的 patch 位置 query 對完整 sinogram token 序列做 cross-attention。"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.context_embed = Linear(config.d_model, config.d_model, rng)
        self.mask_token = init_normal(rng, (1, 1, config.d_model))
        self.pos_embed = init_normal(rng, (config.max_angles, config.d_model))
        self.patch_queries = init_normal(rng, (config.n_patches, config.d_model))
        self.blocks = [
            CrossBlock(config.d_model, config.n_heads, config.d_ff, rng)
            for _ in range(config.n_dec_layers)
        ]
        self.norm = LayerNorm(config.d_model)
        self.head = Linear(config.d_model, config.patch_side**2, rng)


class MaskedSinogramModel(Module):
    """Masked Sinogram Model 與其下游輸出頭。

    Attributes:
        config: 模型配置
        encoder: 共用 encoder（參數名稱前綴 encoder.）
        decoder: 依 head_kind 決定的 decoder（前綴 decoder.）
    """

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        config.validate()
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        self.config = config
        self.encoder = Encoder(config, rng)
        self.decoder: SinoDecoder | PatchDecoder = (
            SinoDecoder(config, rng)
            if config.head_kind == 'sino_decoder'
            else PatchDecoder(config, rng)
        )

    @property
    def dtype(self) -> np.dtype[np.floating]:
        return self.encoder.token_embed.weight.dtype

    # -------------------------------------------------------------------------
    # Encoder
    # -------------------------------------------------------------------------

    def embed(self, rows: npt.ArrayLike, angle_ids: npt.ArrayLike) -> TokenSequence:
        """將可見投影列線性投影到 d_model，並加上依絕對角度索引的位置嵌入。

        Args:
            rows: (K, token_dim) 或 (B, K, token_dim) 可見列
            angle_ids: (K,) 或 (B, K) 角度索引

        Raises:
            ShapeError: 列寬不等於 token_dim
            ContractError: 角度索引超出 max_angles
        """
        data = np.asarray(rows, dtype=self.dtype)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[-1] != self.config.token_dim:
            raise ShapeError('embed', tuple(data.shape), (self.config.token_dim,))
        ids = _as_batch_ids(angle_ids, data.shape[0])
        if ids.shape != data.shape[:2]:
            raise ShapeError('embed', tuple(data.shape), tuple(ids.shape))
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.max_angles):
            raise ContractError(f'角度索引超出 [0, {self.config.max_angles})')
        projected = self.encoder.token_embed(Tensor(data, dtype=self.dtype))
        return TokenSequence(add(projected, gather_rows(self.encoder.pos_embed, ids)), ids)

    def encode(self, seq: TokenSequence, capture: AttentionCapture | None = None) -> TokenSequence:
        """n_enc_layers 層 self-attention + 前饋，長度不變。"""
        if seq.length < 1:
            raise ContractError('encode 至少需要一個 token')
        x = seq.tokens
        for block in self.encoder.blocks:
            x = block(x, capture)
        return TokenSequence(self.encoder.norm(x), seq.angle_ids)

    # -------------------------------------------------------------------------
    # Decoders
    # -------------------------------------------------------------------------

    def _full_sequence(
        self,
        encoded: TokenSequence,
        kept: IntArray,
        total_angles: int,
        project: Linear,
        mask_token: Tensor,
        pos_embed: Tensor,
    ) -> Tensor:
        if total_angles > self.config.max_angles:
            raise ContractError(f'角度數 {total_angles} 超過 max_angles={self.config.max_angles}')
        if kept.shape != encoded.angle_ids.shape:
            raise ContractError(f'kept_indices 形狀 {kept.shape} 與 token 數不符')
        _check_kept(kept, total_angles)
        visible = project(encoded.tokens)
        full = _unshuffle(visible, mask_token, kept, total_angles)
        positions = gather_rows(pos_embed, np.arange(total_angles))
        return add(full, positions)

    def decode_sino(
        self,
        encoded: TokenSequence,
        kept_indices: npt.ArrayLike,
        total_angles: int,
        capture: AttentionCapture | None = None,
    ) -> Tensor:
        """還原完整 sinogram，回傳 (B, total_angles, token_dim)。

        Raises:
            ContractError: head_kind 不符或 kept_indices 超出範圍
        """
        decoder = self.decoder
        if not isinstance(decoder, SinoDecoder):
            raise ContractError('decode_sino 需要 sino_decoder 輸出頭')
        kept = _as_batch_ids(kept_indices, encoded.tokens.shape[0])
        x = self._full_sequence(
            encoded,
            kept,
            total_angles,
            decoder.decoder_embed,
            decoder.mask_token,
            decoder.pos_embed,
        )
        for block in decoder.blocks:
            x = block(x, capture)
        return decoder.head(decoder.norm(x))

    def decode_image(
        self,
        encoded: TokenSequence,
        total_angles: int,
        capture: AttentionCapture | None = None,
    ) -> Tensor:
        """由 patch query 直接重建影像，回傳 (B, side, side)。

        Raises:
            ContractError: head_kind 不是 image_patch_decoder
        """
        decoder = self.decoder
        if not isinstance(decoder, PatchDecoder):
            raise ContractError('decode_image 需要 image_patch_decoder 輸出頭')
        context = self._full_sequence(
            encoded,
            encoded.angle_ids,
            total_angles,
            decoder.context_embed,
            decoder.mask_token,
            decoder.pos_embed,
        )
        batch = encoded.tokens.shape[0]
        queries = broadcast_to(
            reshape(decoder.patch_queries, (1, self.config.n_patches, self.config.d_model)),
            (batch, self.config.n_patches, self.config.d_model),
        )
        x = queries
        for block in decoder.blocks:
            x = block(x, context, capture)
        return assemble_patches(decoder.head(decoder.norm(x)))

    # -------------------------------------------------------------------------
    # Convenience
    # -------------------------------------------------------------------------

    def forward(
        self,
        rows: npt.ArrayLike,
        kept_indices: npt.ArrayLike,
        total_angles: int,
        capture: AttentionCapture | None = None,
    ) -> Tensor:
        """embed → encode → 依 head_kind 解碼。"""
        encoded = self.encode(self.embed(rows, kept_indices))
        if self.config.head_kind == 'sino_decoder':
            return self.decode_sino(encoded, encoded.angle_ids, total_angles, capture)
        return self.decode_image(encoded, total_angles, capture)

    def predict(self, masked: MaskedSinogram, scale: float = 1.0) -> Array:
        """單一樣本推論（不記錄計算圖）。

        sino_decoder 的輸出換回與輸入相同的 sinogram 單位；
        image_patch_decoder 的輸出為衰減值影像。
        """
        with no_grad():
            rows = masked.visible_rows / scale
            out = self.forward(rows, masked.kept_indices, masked.sinogram.grid.n_angles)
        result = out.data[0].astype(np.float64)
        return result * scale if self.config.head_kind == 'sino_decoder' else result

    def load_encoder(self, state: dict[str, npt.ArrayLike]) -> list[str]:
        """從另一個模型（通常是 MSM）的參數載入 encoder。"""
        loaded = self.load_state_dict(state, prefix=ENCODER_PREFIX)
        logger.info('已載入預訓練 encoder', extra={'n_params': len(loaded)})
        return loaded

    def freeze_encoder(self) -> None:
        self.set_requires_grad(False, prefix=ENCODER_PREFIX)


def msm_loss(pred: Tensor, target: Tensor | npt.ArrayLike) -> Tensor:
    """整張 sinogram（遮罩與可見列一視同仁）的均方誤差。"""
    return mse_loss(pred, target)


def extract_attention(
    model: MaskedSinogramModel,
    masked: MaskedSinogram,
    layer: int,
    head: int,
    scale: float = 1.0,
    stage: Literal['encoder', 'decoder'] = 'decoder',
) -> AttentionMap:
    """執行一次前向並取出指定層、指定頭的注意力權重。

    sino_decoder 的 decoder 權重為 (total_angles, total_angles)；
    image_patch_decoder 的 decoder 權重為 patch × 角度的 cross-attention。

    Raises:
        ContractError: layer 或 head 超出配置範圍
    """
    n_layers = model.config.n_dec_layers if stage == 'decoder' else model.config.n_enc_layers
    if not 0 <= layer < n_layers:
        raise ContractError(f'layer {layer} 超出 [0, {n_layers})')
    if not 0 <= head < model.config.n_heads:
        raise ContractError(f'head {head} 超出 [0, {model.config.n_heads})')
    capture: AttentionCapture = []
    rows = masked.visible_rows / scale
    kept = masked.kept_indices
    total = masked.sinogram.grid.n_angles
    with no_grad():
        if stage == 'encoder':
            model.encode(model.embed(rows, kept), capture)
        else:
            model.forward(rows, kept, total, capture)
    weights = capture[layer][0, head].astype(np.float64)
    return AttentionMap(layer=layer, head=head, weights=weights)
