"""tomotx 統一配置模組。

提供假體生成、模型架構、訓練流程與執行環境的配置資料結構。
所有配置皆可 validate()，並可與 manifest 中的字典互轉。
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Any, Literal

from tomo_core.exceptions import ConfigError

# 預設值（桌面規模）
DEFAULT_IMAGE_SIDE = 64
DEFAULT_N_ANGLES = 60
DEFAULT_SEED = 0
DEFAULT_LOG_LEVEL = 'INFO'
DEFAULT_WORKERS = 1

# 各任務預設的遮罩比例與遮罩方式
TASK_MASK_RATIO: dict[str, float] = {'msm': 0.8, 'svtx': 0.8, 'dntx': 0.0, 'ctx': 0.8}
TASK_MASK_SCHEME: dict[str, str] = {
    'msm': 'random',
    'svtx': 'uniform',
    'dntx': 'random',
    'ctx': 'random',
}

# Dn-Tx 預設訓練劑量（正常劑量的 0.5%）
DEFAULT_TRAIN_DOSE = 1 / 200
DEFAULT_INCIDENT_FLUX = 1e4

TaskName = Literal['msm', 'svtx', 'dntx', 'ctx']
HeadKind = Literal['sino_decoder', 'image_patch_decoder']


def _is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


@dataclass
class RuntimeConfig:
    """執行環境配置。

    Attributes:
        log_level: 日誌等級（未指定時讀取 TOMOTX_LOG_LEVEL）
        workers: 資料集生成的執行緒數（未指定時讀取 TOMOTX_WORKERS）
    """

    log_level: str | None = None
    workers: int | None = None

    def get_log_level(self) -> str:
        """取得日誌等級，優先使用明確指定的值，否則從環境變數讀取。"""
        if self.log_level is not None:
            return self.log_level.upper()
        return os.environ.get('TOMOTX_LOG_LEVEL', DEFAULT_LOG_LEVEL).upper()

    def get_workers(self) -> int:
        """取得執行緒數，優先使用明確指定的值，否則從環境變數讀取。

        Raises:
            ConfigError: 環境變數不是正整數
        """
        if self.workers is not None:
            value = self.workers
        else:
            raw = os.environ.get('TOMOTX_WORKERS', str(DEFAULT_WORKERS))
            try:
                value = int(raw)
            except ValueError as exc:
                raise ConfigError('workers', f'TOMOTX_WORKERS 不是整數: {raw!r}') from exc
        if value < 1:
            raise ConfigError('workers', f'必須 ≥ 1，收到 {value}')
        return value


@dataclass
class PhantomConfig:
    """假體影像生成配置。

    Attributes:
        image_side: 影像邊長（像素，2 的冪次）
        shapes_min: 每張影像最少幾何形狀數
        shapes_max: 每張影像最多幾何形狀數
        intensity_range: 形狀衰減係數範圍 [low, high]，落在 [0, 1]
        size_range: 形狀尺寸範圍（影像邊長的比例），落在 (0, 0.5]
        seed: 64 位元隨機種子
    """

    image_side: int = DEFAULT_IMAGE_SIDE
    shapes_min: int = 1
    shapes_max: int = 5
    intensity_range: tuple[float, float] = (0.1, 1.0)
    size_range: tuple[float, float] = (0.05, 0.25)
    seed: int = DEFAULT_SEED

    def validate(self) -> None:
        """檢查配置是否合法。

        Raises:
            ConfigError: 任一欄位不合法，訊息中標明欄位名稱
        """
        if not _is_power_of_two(self.image_side) or self.image_side < 8:
            raise ConfigError('image_side', f'必須是 ≥ 8 的 2 的冪次，收到 {self.image_side}')
        if self.shapes_min < 0 or self.shapes_min > self.shapes_max:
            raise ConfigError(
                'shapes_min',
                f'需滿足 0 ≤ shapes_min ≤ shapes_max，收到 {self.shapes_min} / {self.shapes_max}',
            )
        low, high = self.intensity_range
        if not 0.0 <= low <= high <= 1.0:
            raise ConfigError('intensity_range', f'需滿足 0 ≤ low ≤ high ≤ 1，收到 {low}, {high}')
        s_low, s_high = self.size_range
        if not 0.0 < s_low <= s_high <= 0.5:
            raise ConfigError('size_range', f'需落在 (0, 0.5]，收到 {s_low}, {s_high}')
        if not 0 <= self.seed < 2**64:
            raise ConfigError('seed', f'必須是 64 位元非負整數，收到 {self.seed}')

    def to_dict(self) -> dict[str, Any]:
        """轉換為可序列化的字典。"""
        data = asdict(self)
        data['intensity_range'] = list(self.intensity_range)
        data['size_range'] = list(self.size_range)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PhantomConfig:
        """從字典反序列化。"""
        return cls(
            image_side=int(data['image_side']),
            shapes_min=int(data['shapes_min']),
            shapes_max=int(data['shapes_max']),
            intensity_range=(float(data['intensity_range'][0]), float(data['intensity_range'][1])),
            size_range=(float(data['size_range'][0]), float(data['size_range'][1])),
            seed=int(data['seed']),
        )


@dataclass
class ModelConfig:
    """Masked Sinogram Model 架構配置。

    Attributes:
        token_dim: 每個投影的探測器 bin 數（等於影像邊長）
        d_model: token 向量維度
        n_heads: 注意力頭數
        n_enc_layers: encoder 層數
        n_dec_layers: decoder 層數
        d_ff: 前饋層寬度
        max_angles: 位置嵌入支援的最大角度數
        head_kind: 輸出頭種類（sinogram 或影像 patch）
        patch_side: 影像 patch 邊長（僅 image_patch_decoder 使用）
    """

    token_dim: int = DEFAULT_IMAGE_SIDE
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_angles: int = DEFAULT_N_ANGLES
    head_kind: HeadKind = 'sino_decoder'
    patch_side: int = 8

    @classmethod
    def full_scale(cls, head_kind: HeadKind = 'sino_decoder') -> ModelConfig:
        """全尺寸配置：256 bins、180 角度、16 個注意力頭、16×16 patch。"""
        return cls(
            token_dim=256,
            d_model=256,
            n_heads=16,
            n_enc_layers=8,
            n_dec_layers=4,
            d_ff=1024,
            max_angles=180,
            head_kind=head_kind,
            patch_side=16,
        )

    @property
    def image_side(self) -> int:
        """重建影像邊長（探測器 bin 數等於影像邊長）。"""
        return self.token_dim

    @property
    def patches_per_side(self) -> int:
        return self.token_dim // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.patches_per_side**2

    def validate(self) -> None:
        """檢查配置是否合法。

        Raises:
            ConfigError: 任一欄位不合法
        """
        for name in ('token_dim', 'd_model', 'n_heads', 'd_ff', 'max_angles'):
            if getattr(self, name) < 1:
                raise ConfigError(name, f'必須 ≥ 1，收到 {getattr(self, name)}')
        if self.n_enc_layers < 1:
            raise ConfigError('n_enc_layers', f'必須 ≥ 1，收到 {self.n_enc_layers}')
        if self.n_dec_layers < 1:
            raise ConfigError('n_dec_layers', f'必須 ≥ 1，收到 {self.n_dec_layers}')
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                'n_heads', f'd_model={self.d_model} 無法被 n_heads={self.n_heads} 整除'
            )
        if self.head_kind not in ('sino_decoder', 'image_patch_decoder'):
            raise ConfigError('head_kind', f'未知的輸出頭: {self.head_kind}')
        if self.head_kind == 'image_patch_decoder':
            if self.patch_side < 1 or self.token_dim % self.patch_side != 0:
                raise ConfigError(
                    'patch_side',
                    f'影像邊長 {self.token_dim} 無法被 patch_side={self.patch_side} 整除',
                )

    def to_dict(self) -> dict[str, Any]:
        """轉換為可序列化的字典。"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        """從字典反序列化。"""
        return cls(**data)


@dataclass
class TrainConfig:
    """訓練流程配置。

    Attributes:
        task: 任務種類（msm / svtx / dntx / ctx）
        epochs: 訓練 epoch 數
        batch_size: 批次大小
        lr: Adam 學習率
        mask_ratio: 遮罩比例（None 表示使用任務預設值）
        mask_scheme: 遮罩方式（None 表示使用任務預設值）
        dose_fraction: 低劑量比例（僅 dntx）
        incident_flux: 入射光子數 I_0（每個 bin）
        val_fraction: 從訓練集切出作為驗證集的比例
        seed: 隨機種子
        freeze_encoder: 是否凍結 encoder（None 表示 ctx 預設凍結，其餘不凍結）
        base_checkpoint: 預訓練 checkpoint 路徑
        prefetch: 是否在背景執行緒預先組裝下一個批次
    """

    task: TaskName = 'msm'
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    mask_ratio: float | None = None
    mask_scheme: str | None = None
    dose_fraction: float = DEFAULT_TRAIN_DOSE
    incident_flux: float = DEFAULT_INCIDENT_FLUX
    val_fraction: float = 0.1
    seed: int = DEFAULT_SEED
    freeze_encoder: bool | None = None
    base_checkpoint: str | None = None
    prefetch: bool = True

    @property
    def resolved_mask_ratio(self) -> float:
        if self.task == 'dntx':
            return 0.0
        if self.mask_ratio is None:
            return TASK_MASK_RATIO[self.task]
        return self.mask_ratio

    @property
    def resolved_mask_scheme(self) -> str:
        if self.mask_scheme is None:
            return TASK_MASK_SCHEME[self.task]
        return self.mask_scheme

    @property
    def resolved_freeze_encoder(self) -> bool:
        if self.freeze_encoder is None:
            return self.task == 'ctx'
        return self.freeze_encoder

    def validate(self) -> None:
        """檢查配置是否合法。

        Raises:
            ConfigError: 任一欄位不合法
        """
        if self.task not in TASK_MASK_RATIO:
            raise ConfigError('task', f'未知的任務: {self.task}')
        if self.epochs < 1:
            raise ConfigError('epochs', f'必須 ≥ 1，收到 {self.epochs}')
        if self.batch_size < 1:
            raise ConfigError('batch_size', f'必須 ≥ 1，收到 {self.batch_size}')
        if self.lr <= 0:
            raise ConfigError('lr', f'必須 > 0，收到 {self.lr}')
        if not 0.0 <= self.resolved_mask_ratio < 1.0:
            raise ConfigError('mask_ratio', f'需落在 [0, 1)，收到 {self.resolved_mask_ratio}')
        if self.resolved_mask_scheme not in ('random', 'uniform', 'wedge'):
            raise ConfigError('mask_scheme', f'未知的遮罩方式: {self.resolved_mask_scheme}')
        if not 0.0 < self.dose_fraction <= 1.0:
            raise ConfigError('dose_fraction', f'需落在 (0, 1]，收到 {self.dose_fraction}')
        if self.incident_flux <= 0:
            raise ConfigError('incident_flux', f'必須 > 0，收到 {self.incident_flux}')
        if not 0.0 < self.val_fraction <= 0.5:
            raise ConfigError('val_fraction', f'需落在 (0, 0.5]，收到 {self.val_fraction}')
        if self.resolved_freeze_encoder and self.base_checkpoint is None:
            raise ConfigError(
                'base_checkpoint', '凍結 encoder 時必須提供預訓練 checkpoint（--base）'
            )
        if self.task == 'msm' and self.base_checkpoint is not None:
            raise ConfigError('base_checkpoint', 'MSM 預訓練必須從頭開始')

    def to_dict(self) -> dict[str, Any]:
        """轉換為可序列化的字典（含解析後的任務預設值）。"""
        data = asdict(self)
        data['resolved'] = {
            'mask_ratio': self.resolved_mask_ratio,
            'mask_scheme': self.resolved_mask_scheme,
            'freeze_encoder': self.resolved_freeze_encoder,
            'optimizer': {'name': 'adam', 'beta1': 0.9, 'beta2': 0.999, 'eps': 1e-8},
        }
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        """從字典反序列化（忽略 resolved 區塊）。"""
        fields = {k: v for k, v in data.items() if k != 'resolved'}
        return cls(**fields)
