"""Tensor 與反向自動微分模組。

採 define-by-run：每個前向運算記錄其輸入與伴隨函式，
backward 依反向拓撲序累加梯度，完成後釋放整張計算圖。
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager

import numpy as np
import numpy.typing as npt

from tomo_core.exceptions import ContractError, NumericError

Array = npt.NDArray[np.floating]
BackwardFn = Callable[[Array], Sequence[Array | None]]

DEFAULT_DTYPE = np.float32

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """目前執行緒是否記錄計算圖。"""
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """在此區塊內不記錄計算圖（推論與驗證用，僅影響目前執行緒）。"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """稠密張量，可選擇追蹤梯度。

    Attributes:
        data: row-major 陣列（預設 float32）
        requires_grad: 是否追蹤梯度
        grad: 與 data 同形狀的梯度累加器（葉節點才會填入）
        op: 產生此張量的運算名稱（葉節點為空字串）
    """

    __slots__ = ('data', 'requires_grad', 'grad', 'op', '_parents', '_backward')

    def __init__(
        self,
        data: npt.ArrayLike,
        requires_grad: bool = False,
        dtype: npt.DTypeLike = DEFAULT_DTYPE,
    ) -> None:
        self.data: Array = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.op = ''
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})'

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype[np.floating]:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f'item() 只適用於單一元素張量，形狀為 {self.shape}')
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)


def make_result(
    data: Array,
    parents: tuple[Tensor, ...],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """建立運算結果；有任一輸入追蹤梯度且未停用時才記錄到計算圖。

    Raises:
        NumericError: 結果含 NaN 或 Inf
    """
    if not np.all(np.isfinite(data)):
        raise NumericError(f'{op} 產生非有限值')
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


class Graph:
    """以某個純量為根的計算圖。

    Attributes:
        root: 根節點（loss）
        order: 拓撲排序（輸入在前、根在最後）
    """

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.order = self._topological_order(root)

    @staticmethod
    def _topological_order(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def run(self) -> None:
        """依反向拓撲序傳遞梯度，葉節點累加到 .grad，完成後釋放計算圖。"""
        grads: dict[int, Array] = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            parent_grads = node._backward(grad)
            for parent, parent_grad in zip(node._parents, parent_grads, strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        self.release()

    def release(self) -> None:
        for node in self.order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def backward(loss: Tensor) -> None:
    """從純量 loss 反向傳遞，填入所有追蹤中葉節點的梯度。

    Raises:
        ContractError: loss 不是純量或不在計算圖上
    """
    if loss.size != 1:
        raise ContractError(f'backward 需要純量 loss，收到形狀 {loss.shape}')
    if not loss.requires_grad:
        raise ContractError('loss 沒有連到任何需要梯度的參數')
    Graph(loss).run()
