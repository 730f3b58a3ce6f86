"""Checkpoint 讀寫模組。

checkpoint 是一個目錄：每個參數一個 `<名稱>.tt` TensorContainer，
外加 manifest.json 記錄配置、最佳 epoch、驗證 loss 與資料集雜湊。
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, cast

import numpy as np

from tomo_core.config import ModelConfig, TrainConfig
from tomo_core.container import FILE_SUFFIX, file_sha256, read_tensor, write_tensor
from tomo_core.diffcore.tensor import Array
from tomo_core.exceptions import IntegrityError
from tomo_core.model.msm import ENCODER_PREFIX, MaskedSinogramModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'tomotx-checkpoint/1'
MANIFEST_NAME = 'manifest.json'


@dataclass
class Checkpoint:
    """已訓練模型的參數與其來歷。

    Attributes:
        model_config: 模型架構
        train_config: 訓練配置
        state: 參數名稱 → 陣列
        epoch: 最佳驗證 loss 所在的 epoch
        best_val_loss: 最佳驗證 loss
        dataset_hash: 訓練資料集的雜湊
        scale: 資料集 sinogram 正規化倍率
        physical_scale: 劑量模擬的單位倍率
    """

    model_config: ModelConfig
    train_config: TrainConfig
    state: dict[str, Array]
    epoch: int
    best_val_loss: float
    dataset_hash: str
    scale: float
    physical_scale: float

    @property
    def task(self) -> str:
        return self.train_config.task

    def build_model(self) -> MaskedSinogramModel:
        """依配置建立模型並載入全部參數。"""
        model = MaskedSinogramModel(self.model_config)
        model.load_state_dict(dict(self.state))
        return model

    def encoder_hash(self) -> str:
        return parameters_sha256(self.state, ENCODER_PREFIX)


def parameters_sha256(state: dict[str, Array], prefix: str = '') -> str:
    """依名稱排序後，對指定前綴的參數位元組計算雜湊。"""
    digest = hashlib.sha256()
    for name in sorted(state):
        if name.startswith(prefix):
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(state[name], dtype='<f4').tobytes())
    return digest.hexdigest()


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """寫入 checkpoint 目錄。

    Returns:
        checkpoint 目錄

    Raises:
        OSError: 目錄無法寫入
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    parameters: dict[str, str] = {}
    for name, value in checkpoint.state.items():
        file_path = write_tensor(root / f'{name}{FILE_SUFFIX}', value)
        parameters[name] = file_sha256(file_path)
    manifest: dict[str, Any] = {
        'format': CHECKPOINT_FORMAT,
        'task': checkpoint.task,
        'model_config': checkpoint.model_config.to_dict(),
        'train_config': checkpoint.train_config.to_dict(),
        'epoch': checkpoint.epoch,
        'best_val_loss': checkpoint.best_val_loss,
        'dataset_hash': checkpoint.dataset_hash,
        'scale': checkpoint.scale,
        'physical_scale': checkpoint.physical_scale,
        'parameters': parameters,
    }
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True) + '\n',
        encoding='utf-8',
    )
    logger.info('checkpoint 已寫入', extra={'path': str(root), 'task': checkpoint.task})
    return root


def load_checkpoint(path: str | Path, expected_dataset_hash: str | None = None) -> Checkpoint:
    """讀取 checkpoint 目錄。

    Args:
        path: checkpoint 目錄
        expected_dataset_hash: 若提供，與 checkpoint 記錄的資料集雜湊比對

    Raises:
        FileNotFoundError: 目錄或檔案不存在
        IntegrityError: 參數檔雜湊或資料集雜湊不符，或 manifest 不是合法的 JSON
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    try:
        raw: Any = json.loads(manifest_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f'checkpoint manifest 不是合法的 JSON: {manifest_path}') from exc
    if not isinstance(raw, dict):
        raise IntegrityError(f'checkpoint manifest 必須是 JSON 物件: {manifest_path}')
    manifest = cast(dict[str, Any], raw)
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise IntegrityError(f'不支援的 checkpoint 格式: {manifest.get("format")}')
    if expected_dataset_hash is not None and manifest['dataset_hash'] != expected_dataset_hash:
        raise IntegrityError(
            f'checkpoint 的資料集雜湊 {manifest["dataset_hash"][:12]} '
            f'與目前資料集 {expected_dataset_hash[:12]} 不符: {root}'
        )
    state: dict[str, Array] = {}
    for name, digest in manifest['parameters'].items():
        file_path = root / f'{name}{FILE_SUFFIX}'
        if file_sha256(file_path) != digest:
            raise IntegrityError(f'參數檔雜湊不符: {file_path}')
        state[name] = read_tensor(file_path)
    return Checkpoint(
        model_config=ModelConfig.from_dict(manifest['model_config']),
        train_config=TrainConfig.from_dict(manifest['train_config']),
        state=state,
        epoch=int(manifest['epoch']),
        best_val_loss=float(manifest['best_val_loss']),
        dataset_hash=str(manifest['dataset_hash']),
        scale=float(manifest['scale']),
        physical_scale=float(manifest['physical_scale']),
    )
