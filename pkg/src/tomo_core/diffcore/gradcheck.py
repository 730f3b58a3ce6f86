"""以中央差分驗證反向傳遞的梯度。"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from tomo_core.diffcore.tensor import Array, Tensor, backward, no_grad

LossFn = Callable[[], Tensor]
DEFAULT_STEP = 1e-3


@dataclass
class GradCheckResult:
    """單一參數的梯度比對結果。

    Attributes:
        name: 參數名稱
        analytic: 反向傳遞的梯度
        numeric: 中央差分梯度
        rel_error: ‖a − n‖ / max(‖a‖ + ‖n‖, floor)
    """

    name: str
    analytic: Array
    numeric: Array
    rel_error: float


def relative_error(analytic: Array, numeric: Array, floor: float = 1e-12) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return diff / max(scale, floor)


def _evaluate(fn: LossFn) -> float:
    with no_grad():
        return fn().item()


def numerical_gradient(
    fn: LossFn,
    param: Tensor,
    step: float = DEFAULT_STEP,
    flat_indices: Sequence[int] | None = None,
) -> Array:
    """以中央差分估計 loss 對 param 的梯度；指定 flat_indices 時只計算這些元素。"""
    param.data = np.ascontiguousarray(param.data)
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    targets = range(flat.size) if flat_indices is None else flat_indices
    for i in targets:
        original = flat[i].copy()
        flat[i] = original + step
        plus = _evaluate(fn)
        flat[i] = original - step
        minus = _evaluate(fn)
        flat[i] = original
        grad[i] = (plus - minus) / (2.0 * step)
    return grad.reshape(param.shape)


def analytic_gradients(fn: LossFn, params: Sequence[Tensor]) -> list[Array]:
    for param in params:
        param.zero_grad()
    backward(fn())
    return [
        p.grad.astype(np.float64) if p.grad is not None else np.zeros(p.shape) for p in params
    ]


def check_gradients(
    fn: LossFn,
    params: Sequence[tuple[str, Tensor]],
    step: float = DEFAULT_STEP,
) -> list[GradCheckResult]:
    """比對每個參數的完整梯度（適用於小張量）。"""
    analytic = analytic_gradients(fn, [p for _, p in params])
    results: list[GradCheckResult] = []
    for (name, param), grad in zip(params, analytic, strict=True):
        numeric = numerical_gradient(fn, param, step)
        results.append(GradCheckResult(name, grad, numeric, relative_error(grad, numeric)))
    return results


def check_random_entries(
    fn: LossFn,
    params: Sequence[tuple[str, Tensor]],
    n_entries: int = 10,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    floor: float = 1e-6,
) -> list[GradCheckResult]:
    """隨機抽取 n_entries 個參數元素比對梯度（適用於完整模型）。

    每個元素各自計算相對誤差，分母下限為 floor。
    """
    rng = np.random.default_rng(seed)
    analytic = analytic_gradients(fn, [p for _, p in params])
    results: list[GradCheckResult] = []
    for _ in range(n_entries):
        which = int(rng.integers(len(params)))
        name, param = params[which]
        index = int(rng.integers(param.size))
        numeric = numerical_gradient(fn, param, step, [index]).reshape(-1)[index : index + 1]
        exact = analytic[which].reshape(-1)[index : index + 1]
        results.append(
            GradCheckResult(
                f'{name}[{index}]', exact, numeric, relative_error(exact, numeric, floor)
            )
        )
    return results
