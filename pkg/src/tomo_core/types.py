"""型別定義模組。

定義寫入磁碟的 JSON manifest 結構。
以 TypedDict 描述，讓 Pyright 能檢查讀寫兩端的欄位一致。
"""

from __future__ import annotations

from typing import Any, TypedDict

# --- 資料集 ---


class AngleGridDict(TypedDict):
    """角度網格的序列化形式。"""

    n_angles: int
    start_deg: float
    end_deg: float


class TensorFileEntry(TypedDict):
    """資料集中單一張量檔案的描述。"""

    shape: list[int]
    sha256: str


class DatasetManifest(TypedDict):
    """資料集 manifest。

    Attributes:
        format: 格式識別字串
        phantom_config: 生成假體所用的配置
        angle_grid: 投影角度網格
        n_train: 訓練樣本數
        n_eval: 保留評估樣本數
        scale: 訓練 sinogram 的全域最大絕對值（模型正規化用）
        physical_scale: 劑量模擬時 sinogram 單位換算成衰減值的倍率
        files: 各張量檔案的形狀與雜湊
    """

    format: str
    phantom_config: dict[str, Any]
    angle_grid: AngleGridDict
    n_train: int
    n_eval: int
    scale: float
    physical_scale: float
    files: dict[str, TensorFileEntry]


# --- 執行紀錄 ---


class RunManifest(TypedDict):
    """每個產生輸出的 CLI 指令都會寫下一份 RunManifest。

    Attributes:
        command: 子指令名稱
        config: 完整解析後的配置
        dataset_hash: 使用的資料集雜湊（無資料集時為空字串）
        code_version: 套件版本
        started_at: 開始時間（ISO 8601，UTC）
        finished_at: 結束時間（ISO 8601，UTC）
        outputs: 輸出檔案路徑列表
    """

    command: str
    config: dict[str, Any]
    dataset_hash: str
    code_version: str
    started_at: str
    finished_at: str
    outputs: list[str]
