"""最小化的稠密張量運算與反向自動微分。"""

from tomo_core.diffcore.ops import (
    add,
    broadcast_to,
    concat_rows,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    matmul,
    mse_loss,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
)
from tomo_core.diffcore.optim import Adam, AdamState, adam_step
from tomo_core.diffcore.tensor import Graph, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    'Adam',
    'AdamState',
    'Graph',
    'Tensor',
    'adam_step',
    'add',
    'backward',
    'broadcast_to',
    'concat_rows',
    'gather_rows',
    'gelu',
    'is_grad_enabled',
    'layer_norm',
    'linear',
    'matmul',
    'mse_loss',
    'no_grad',
    'reshape',
    'scale',
    'softmax_lastdim',
    'transpose',
]
