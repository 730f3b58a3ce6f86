"""tomotx 通用例外模組。

定義與領域相關的例外類別，讓 CLI 能依類別對應到結束碼，
而函式庫本身不需要知道任何程序層級的細節。
"""

from __future__ import annotations


class TomoTxError(Exception):
    """tomotx 基礎例外。"""


class ConfigError(TomoTxError):
    """配置無效。

    Attributes:
        field: 出問題的欄位名稱
    """

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f'配置欄位 {field} 無效: {message}')


class GeometryError(TomoTxError):
    """幾何條件不符（非正方形影像、角度數不足等）。"""


class ShapeError(TomoTxError):
    """張量形狀不相容。"""

    def __init__(self, op: str, left: tuple[int, ...], right: tuple[int, ...]) -> None:
        self.op = op
        self.left = left
        self.right = right
        super().__init__(f'{op} 形狀不相容: {left} 與 {right}')


class NumericError(TomoTxError):
    """運算產生 NaN 或 Inf。"""


class ContractError(TomoTxError):
    """呼叫前置條件不成立。"""


class IntegrityError(TomoTxError):
    """資料集與 checkpoint 的雜湊不一致。"""


class ContainerFormatError(TomoTxError, OSError):
    """TensorContainer 檔案格式錯誤（magic、長度或 header 不符）。"""
