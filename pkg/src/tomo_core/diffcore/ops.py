"""可微分前向運算。

每個運算回傳新的 Tensor，並在需要時記錄伴隨函式。
矩陣乘法、加總與 layer_norm 統計量以 float64 累加，再轉回輸入精度。
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np
import numpy.typing as npt
from scipy import special

from tomo_core.diffcore.tensor import Array, Tensor, make_result
from tomo_core.exceptions import ContractError, ShapeError

LAYER_NORM_EPS = 1e-5
_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _result_dtype(*tensors: Tensor) -> np.dtype[np.floating]:
    return np.result_type(*(t.data for t in tensors))


def unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """將廣播後的梯度加總回原本的形狀。"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise ShapeError(op, a.shape, b.shape) from exc


# =============================================================================
# Elementwise / structural
# =============================================================================


def add(a: Tensor, b: Tensor) -> Tensor:
    """逐元素相加（支援 numpy 廣播）。"""
    _broadcast_shape('add', a, b)
    dtype = _result_dtype(a, b)
    out = (a.data + b.data).astype(dtype)

    def backward_fn(g: Array) -> list[Array | None]:
        return [unbroadcast(g, a.shape).astype(a.dtype), unbroadcast(g, b.shape).astype(b.dtype)]

    return make_result(out, (a, b), backward_fn, 'add')


def scale(x: Tensor, factor: float) -> Tensor:
    """乘上常數。"""
    out = (x.data * factor).astype(x.dtype)

    def backward_fn(g: Array) -> list[Array | None]:
        return [(g * factor).astype(x.dtype)]

    return make_result(out, (x,), backward_fn, 'scale')


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """軸置換；未指定時交換最後兩軸。"""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError('transpose', x.shape, ())
        perm = list(range(x.ndim))
        perm[-2], perm[-1] = perm[-1], perm[-2]
    else:
        perm = list(axes)
        if sorted(perm) != list(range(x.ndim)):
            raise ShapeError('transpose', x.shape, tuple(perm))
    inverse = list(np.argsort(perm))
    out = np.ascontiguousarray(np.transpose(x.data, perm))

    def backward_fn(g: Array) -> list[Array | None]:
        return [np.ascontiguousarray(np.transpose(g, inverse))]

    return make_result(out, (x,), backward_fn, 'transpose')


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """改變形狀（元素數必須相同，可含一個 -1）。"""
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError('reshape', x.shape, tuple(shape)) from exc

    def backward_fn(g: Array) -> list[Array | None]:
        return [g.reshape(x.shape)]

    return make_result(out, (x,), backward_fn, 'reshape')


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """將張量廣播到指定形狀（例如把單一 mask token 複製到所有遮罩位置）。"""
    target = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, target))
    except ValueError as exc:
        raise ShapeError('broadcast_to', x.shape, target) from exc

    def backward_fn(g: Array) -> list[Array | None]:
        return [unbroadcast(g, x.shape)]

    return make_result(out, (x,), backward_fn, 'broadcast_to')


def concat_rows(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """沿列軸（預設倒數第二軸）串接。"""
    if not tensors:
        raise ContractError('concat_rows 至少需要一個張量')
    first = tensors[0]
    ax = axis % first.ndim
    for other in tensors[1:]:
        if other.ndim != first.ndim or any(
            d0 != d1 for i, (d0, d1) in enumerate(zip(first.shape, other.shape)) if i != ax
        ):
            raise ShapeError('concat_rows', first.shape, other.shape)
    dtype = _result_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=ax).astype(dtype)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(g: Array) -> list[Array | None]:
        parts = np.split(g, splits, axis=ax)
        return [p.astype(t.dtype) for p, t in zip(parts, tensors, strict=True)]

    return make_result(out, tuple(tensors), backward_fn, 'concat_rows')


def gather_rows(x: Tensor, index: npt.ArrayLike) -> Tensor:
    """依整數索引取出第一軸的列；結果形狀為 index.shape + x.shape[1:]。

    Raises:
        ContractError: 索引超出範圍
    """
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(f'gather_rows 索引超出範圍 [0, {x.shape[0]})')
    out = x.data[idx]

    def backward_fn(g: Array) -> list[Array | None]:
        grad = np.zeros_like(x.data)
        np.add.at(grad, idx, g)
        return [grad]

    return make_result(out, (x,), backward_fn, 'gather_rows')


# =============================================================================
# Linear algebra
# =============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(批次) 矩陣乘法，批次維度可廣播。"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError('matmul', a.shape, b.shape) from exc
    dtype = _result_dtype(a, b)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = (a64 @ b64).astype(dtype)

    def backward_fn(g: Array) -> list[Array | None]:
        g64 = g.astype(np.float64)
        grad_a = unbroadcast(g64 @ np.swapaxes(b64, -1, -2), a.shape)
        grad_b = unbroadcast(np.swapaxes(a64, -1, -2) @ g64, b.shape)
        return [grad_a.astype(a.dtype), grad_b.astype(b.dtype)]

    return make_result(out, (a, b), backward_fn, 'matmul')


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """仿射轉換 x @ W + b，W 形狀 (in, out)。"""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError('linear', x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError('linear', weight.shape, bias.shape)
    parents = (x, weight) if bias is None else (x, weight, bias)
    dtype = _result_dtype(*parents)
    x2 = x.data.reshape(-1, weight.shape[0]).astype(np.float64)
    w64 = weight.data.astype(np.float64)
    out64 = x2 @ w64
    if bias is not None:
        out64 = out64 + bias.data.astype(np.float64)
    out = out64.reshape(*x.shape[:-1], weight.shape[1]).astype(dtype)

    def backward_fn(g: Array) -> list[Array | None]:
        g2 = g.reshape(-1, weight.shape[1]).astype(np.float64)
        grads: list[Array | None] = [
            (g2 @ w64.T).reshape(x.shape).astype(x.dtype),
            (x2.T @ g2).astype(weight.dtype),
        ]
        if bias is not None:
            grads.append(g2.sum(axis=0).astype(bias.dtype))
        return grads

    return make_result(out, parents, backward_fn, 'linear')


# =============================================================================
# Normalization / activations
# =============================================================================


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """沿最後一軸正規化，再乘上 gain、加上 bias。"""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError('layer_norm', x.shape, gain.shape)
    dtype = _result_dtype(x, gain, bias)
    x64 = x.data.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x64 - mean) * inv_std
    gain64 = gain.data.astype(np.float64)
    out = (x_hat * gain64 + bias.data.astype(np.float64)).astype(dtype)

    def backward_fn(g: Array) -> list[Array | None]:
        g64 = g.astype(np.float64)
        g_hat = g64 * gain64
        grad_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        flat_g = g64.reshape(-1, width)
        grad_gain = (flat_g * x_hat.reshape(-1, width)).sum(axis=0)
        grad_bias = flat_g.sum(axis=0)
        return [grad_x.astype(x.dtype), grad_gain.astype(gain.dtype), grad_bias.astype(bias.dtype)]

    return make_result(out, (x, gain, bias), backward_fn, 'layer_norm')


def softmax_lastdim(x: Tensor) -> Tensor:
    """沿最後一軸 softmax（先減去最大值）。"""
    x64 = x.data.astype(np.float64)
    shifted = np.exp(x64 - x64.max(axis=-1, keepdims=True))
    y64 = shifted / shifted.sum(axis=-1, keepdims=True)
    out = y64.astype(x.dtype)

    def backward_fn(g: Array) -> list[Array | None]:
        g64 = g.astype(np.float64)
        grad = y64 * (g64 - (g64 * y64).sum(axis=-1, keepdims=True))
        return [grad.astype(x.dtype)]

    return make_result(out, (x,), backward_fn, 'softmax_lastdim')


def gelu(x: Tensor) -> Tensor:
    """精確 GELU：x·Φ(x)。"""
    x64 = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + special.erf(x64 / _SQRT_2))
    out = (x64 * cdf).astype(x.dtype)

    def backward_fn(g: Array) -> list[Array | None]:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x64**2)
        return [(g.astype(np.float64) * (cdf + x64 * pdf)).astype(x.dtype)]

    return make_result(out, (x,), backward_fn, 'gelu')


# =============================================================================
# Loss
# =============================================================================


def mse_loss(pred: Tensor, target: Tensor | npt.ArrayLike) -> Tensor:
    """均方誤差（對所有元素取平均），回傳純量張量。"""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tuple(target_data.shape):
        raise ShapeError('mse_loss', pred.shape, tuple(target_data.shape))
    diff = pred.data.astype(np.float64) - target_data.astype(np.float64)
    count = max(diff.size, 1)
    out = np.asarray(np.mean(diff**2) if diff.size else 0.0).astype(pred.dtype)

    def backward_fn(g: Array) -> list[Array | None]:
        return [(float(g) * 2.0 * diff / count).astype(pred.dtype)]

    return make_result(out, (pred,), backward_fn, 'mse_loss')
