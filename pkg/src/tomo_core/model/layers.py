"""Transformer 基本層。

所有層都是 Module：以屬性保存參數 Tensor 或子模組，
named_parameters() 依宣告順序遞迴列出，名稱即 checkpoint 中的檔名。
"""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np
import numpy.typing as npt

from tomo_core.diffcore import (
    Tensor,
    add,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
)
from tomo_core.diffcore.tensor import Array
from tomo_core.exceptions import ContractError, ShapeError

EMBED_INIT_STD = 0.02

# 每個 block 附加一個 (B, n_heads, L_query, L_key) 注意力權重
AttentionCapture = list[Array]


def init_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    return Tensor(rng.normal(0.0, EMBED_INIT_STD, size=shape), requires_grad=True)


class Module:
    """參數容器基底類別。"""

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f'{prefix}{name}'
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{full}.')
            elif isinstance(value, list):
                for i, item in enumerate(value):  # type: ignore[reportUnknownVariableType]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f'{full}.{i}.')

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, Array]:
        """參數名稱 → 陣列副本。"""
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, npt.ArrayLike], *, prefix: str = '') -> list[str]:
        """載入參數；指定 prefix 時只載入該前綴的參數。

        Returns:
            已載入的參數名稱

        Raises:
            ContractError: 缺少參數
            ShapeError: 形狀不符
        """
        loaded: list[str] = []
        for name, param in self.named_parameters():
            if not name.startswith(prefix):
                continue
            if name not in state:
                raise ContractError(f'缺少參數 {name}')
            value = np.asarray(state[name])
            if tuple(value.shape) != param.shape:
                raise ShapeError(f'load {name}', param.shape, tuple(value.shape))
            param.data = np.array(value, dtype=param.dtype)
            loaded.append(name)
        return loaded

    def astype(self, dtype: npt.DTypeLike) -> None:
        """轉換所有參數的精度（梯度檢查時使用 float64）。"""
        for _, param in self.named_parameters():
            param.data = param.data.astype(dtype)

    def set_requires_grad(self, flag: bool, prefix: str = '') -> None:
        for name, param in self.named_parameters():
            if name.startswith(prefix):
                param.requires_grad = flag


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator) -> None:
        self.weight = init_uniform(rng, d_in, (d_in, d_out))
        self.bias = init_uniform(rng, d_in, (d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int) -> None:
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """多頭注意力；context 為 None 時即 self-attention。

    注意力權重只寫入呼叫端傳入的 capture 列表，不存在模組上，
    因此共享參數的多個執行緒可同時推論。
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator) -> None:
        if d_model % n_heads != 0:
            raise ContractError(f'd_model={d_model} 無法被 n_heads={n_heads} 整除')
        self.n_heads = n_heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, length, width = x.shape
        heads = reshape(x, (batch, length, self.n_heads, width // self.n_heads))
        return transpose(heads, (0, 2, 1, 3))

    def __call__(
        self,
        x: Tensor,
        context: Tensor | None = None,
        capture: AttentionCapture | None = None,
    ) -> Tensor:
        source = x if context is None else context
        if x.ndim != 3 or source.ndim != 3 or x.shape[0] != source.shape[0]:
            raise ShapeError('attention', x.shape, source.shape)
        batch, length, width = x.shape
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(source))
        v = self._split_heads(self.value(source))
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(width // self.n_heads))
        weights = softmax_lastdim(scores)
        if capture is not None:
            capture.append(weights.data.copy())
        mixed = transpose(matmul(weights, v), (0, 2, 1, 3))
        return self.out(reshape(mixed, (batch, length, width)))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block：x + Attn(LN(x))，再 x + FF(LN(x))。"""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator) -> None:
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, capture: AttentionCapture | None = None) -> Tensor:
        x = add(x, self.attn(self.norm1(x), capture=capture))
        return add(x, self.ff(self.norm2(x)))


class CrossBlock(Module):
    """Patch query 的 decoder block：self-attention、cross-attention、前饋。

    capture 記錄的是 cross-attention（patch × 角度）權重。
    """

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator) -> None:
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm3 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(
        self, x: Tensor, context: Tensor, capture: AttentionCapture | None = None
    ) -> Tensor:
        x = add(x, self.self_attn(self.norm1(x)))
        x = add(x, self.cross_attn(self.norm2(x), context=context, capture=capture))
        return add(x, self.ff(self.norm3(x)))
