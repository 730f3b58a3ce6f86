"""Adam 最佳化器。"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from tomo_core.diffcore.tensor import Array, Tensor
from tomo_core.exceptions import ContractError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-3
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    """Adam 狀態。

    Attributes:
        lr: 學習率
        beta1: 一階動差衰減
        beta2: 二階動差衰減
        eps: 分母穩定項
        step: 已執行步數
        m: 每個參數的一階動差（第一次更新時以零初始化）
        v: 每個參數的二階動差
    """

    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    step: int = 0
    m: list[Array] = field(default_factory=lambda: [])
    v: list[Array] = field(default_factory=lambda: [])


def adam_step(
    params: Sequence[Array], grads: Sequence[Array], state: AdamState
) -> tuple[list[Array], AdamState]:
    """執行一步含偏差校正的 Adam 更新。

    不修改輸入；回傳新的參數陣列與新的狀態。

    Args:
        params: 參數陣列
        grads: 對應的梯度
        state: 目前狀態

    Returns:
        (更新後參數, 更新後狀態)

    Raises:
        ShapeError: 參數、梯度或動差形狀不一致
    """
    if len(params) != len(grads):
        raise ContractError(f'參數數 {len(params)} 與梯度數 {len(grads)} 不符')
    moments_m = state.m or [np.zeros(p.shape, dtype=np.float64) for p in params]
    moments_v = state.v or [np.zeros(p.shape, dtype=np.float64) for p in params]
    if len(moments_m) != len(params):
        raise ContractError(f'Adam 狀態記錄 {len(moments_m)} 個參數，收到 {len(params)} 個')

    step = state.step + 1
    correction1 = 1.0 - state.beta1**step
    correction2 = 1.0 - state.beta2**step
    new_params: list[Array] = []
    new_m: list[Array] = []
    new_v: list[Array] = []
    for param, grad, m, v in zip(params, grads, moments_m, moments_v, strict=True):
        if param.shape != grad.shape:
            raise ShapeError('adam_step', tuple(param.shape), tuple(grad.shape))
        if m.shape != param.shape:
            raise ShapeError('adam_step', tuple(param.shape), tuple(m.shape))
        g64 = grad.astype(np.float64)
        m_next = state.beta1 * m + (1.0 - state.beta1) * g64
        v_next = state.beta2 * v + (1.0 - state.beta2) * g64**2
        update = state.lr * (m_next / correction1) / (np.sqrt(v_next / correction2) + state.eps)
        new_params.append((param.astype(np.float64) - update).astype(param.dtype))
        new_m.append(m_next)
        new_v.append(v_next)
    return new_params, replace(state, step=step, m=new_m, v=new_v)


class Adam:
    """包裝 adam_step 的有狀態最佳化器，只更新 requires_grad 的參數。

    凍結的參數（requires_grad=False）不會被納入，也不會被修改。
    """

    def __init__(self, params: Sequence[Tensor], lr: float = DEFAULT_LR) -> None:
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState(lr=lr)
        logger.debug('Adam 已建立', extra={'n_params': len(self.params), 'lr': lr})

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        """以目前 .grad 更新參數；沒有梯度的參數視為零梯度。"""
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        updated, self.state = adam_step([p.data for p in self.params], grads, self.state)
        for param, data in zip(self.params, updated, strict=True):
            param.data = data
