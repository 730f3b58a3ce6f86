"""重建方法註冊表。

每個方法是「退化後的 sinogram → 重建影像」的閉包，
掃描評估只透過名稱取用，不需要知道方法背後是 FBP 還是模型。
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

from tomo_core.checkpoint import Checkpoint
from tomo_core.ctgeom import FilterName, MaskedSinogram, Sinogram, fbp
from tomo_core.metrics import FloatArray, ReconMethod
from tomo_core.model.msm import MaskedSinogramModel

logger = logging.getLogger(__name__)

# 任務 → 方法名稱
TASK_METHOD: dict[str, str] = {
    'msm': 'msm+iradon',
    'svtx': 'svtx+iradon',
    'dntx': 'dntx+iradon',
    'ctx': 'ctx',
}
BASELINE_METHODS = ('iradon', 'zerofill')
DEFAULT_METHODS = ('iradon', 'svtx+iradon', 'dntx+iradon', 'ctx')


@dataclass
class Method:
    """重建方法定義。"""

    name: str
    description: str
    handler: ReconMethod


@dataclass
class MethodRegistry:
    """重建方法註冊表。"""

    _methods: dict[str, Method] = field(default_factory=lambda: {})

    def register(self, name: str, description: str, handler: ReconMethod) -> None:
        """註冊方法（同名會覆蓋）。"""
        self._methods[name] = Method(name=name, description=description, handler=handler)
        logger.debug('已註冊重建方法', extra={'method': name})

    def list_methods(self) -> list[str]:
        return list(self._methods)

    def __contains__(self, name: str) -> bool:
        return name in self._methods

    def get(self, name: str) -> Method:
        """取得方法。

        Raises:
            KeyError: 方法不存在
        """
        if name not in self._methods:
            raise KeyError(f"重建方法 '{name}' 不存在")
        return self._methods[name]

    def select(self, names: list[str]) -> dict[str, ReconMethod]:
        """取出已註冊的方法；未註冊者略過並記錄警告。"""
        selected: dict[str, ReconMethod] = {}
        for name in names:
            if name in self._methods:
                selected[name] = self._methods[name].handler
            else:
                logger.warning('缺少方法所需的 checkpoint，略過此列', extra={'method': name})
        return selected


# =============================================================================
# Method factories
# =============================================================================


def iradon_method(filter: FilterName = 'ramlak') -> ReconMethod:
    """解析式基準：只以保留的角度做 FBP（較大步距的掃描）。"""

    def run(masked: MaskedSinogram) -> FloatArray:
        return fbp(masked.sinogram, filter, kept_indices=masked.kept_indices)

    return run


def zerofill_method(filter: FilterName = 'ramlak') -> ReconMethod:
    """遮罩列補零後對完整角度網格做 FBP。"""

    def run(masked: MaskedSinogram) -> FloatArray:
        return fbp(masked.sinogram, filter)

    return run


def restore_sinogram(model: MaskedSinogramModel, masked: MaskedSinogram, scale: float) -> Sinogram:
    """以 sinogram 模型修補或去雜訊，回傳完整 sinogram。"""
    return Sinogram(masked.sinogram.grid, model.predict(masked, scale))


def sinogram_method(
    model: MaskedSinogramModel, scale: float, filter: FilterName = 'ramlak'
) -> ReconMethod:
    """模型還原完整 sinogram 後再做 FBP（msm / svtx / dntx + iradon）。"""

    def run(masked: MaskedSinogram) -> FloatArray:
        return fbp(restore_sinogram(model, masked, scale), filter)

    return run


def direct_method(model: MaskedSinogramModel, scale: float) -> ReconMethod:
    """C-Tx：由 sinogram token 直接輸出影像。"""

    def run(masked: MaskedSinogram) -> FloatArray:
        return model.predict(masked, scale)

    return run


def build_registry(
    checkpoints: Mapping[str, Checkpoint], filter: FilterName = 'ramlak'
) -> MethodRegistry:
    """建立含基準方法與各 checkpoint 對應方法的註冊表。

    Args:
        checkpoints: 任務名稱 → checkpoint
        filter: FBP 濾波器
    """
    registry = MethodRegistry()
    registry.register('iradon', '稀疏角度 FBP', iradon_method(filter))
    registry.register('zerofill', '補零 sinogram 的 FBP', zerofill_method(filter))
    for task, checkpoint in checkpoints.items():
        model = checkpoint.build_model()
        name = TASK_METHOD[task]
        if task == 'ctx':
            handler = direct_method(model, checkpoint.scale)
            registry.register(name, 'patch decoder 直接重建', handler)
        else:
            handler = sinogram_method(model, checkpoint.scale, filter)
            registry.register(name, f'{task} 還原 sinogram 後 FBP', handler)
    return registry
