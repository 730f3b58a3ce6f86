"""訓練流程模組。

提供 MSM 預訓練、SV-Tx / Dn-Tx 訓練、C-Tx 凍結 encoder 微調，
以及微調與從頭訓練的收斂比較。

每個樣本的遮罩與劑量雜訊都由 (seed, stream, epoch, index) 衍生的種子決定，
因此批次可以在背景執行緒預先組裝，而整個訓練仍可逐位元重現。
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Iterator
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import cast

import numpy as np
import numpy.typing as npt

from tomo_core.checkpoint import Checkpoint
from tomo_core.config import ModelConfig, TrainConfig
from tomo_core.ctgeom import (
    AngleGrid,
    DoseModel,
    MaskScheme,
    MaskSpec,
    Sinogram,
    apply_dose,
)
from tomo_core.diffcore import Adam, Tensor, backward, no_grad
from tomo_core.exceptions import ConfigError, ContractError, IntegrityError
from tomo_core.model.msm import MaskedSinogramModel, msm_loss
from tomo_core.phantom import Dataset

logger = logging.getLogger(__name__)

# 種子串流 tag
STREAM_TRAIN = 0
STREAM_VAL = 1
STREAM_SHUFFLE = 2


def sample_seed(seed: int, stream: int, epoch: int, index: int) -> int:
    """由 (seed, stream, epoch, index) 衍生 64 位元種子。"""
    state = np.random.SeedSequence([seed, stream, epoch, index]).generate_state(1, np.uint64)
    return int(state[0])


# =============================================================================
# Logs
# =============================================================================


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class ConvergenceLog:
    """每個完成的 epoch 一筆紀錄，epoch 嚴格遞增。"""

    records: list[EpochRecord] = field(default_factory=lambda: [])

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ContractError(f'epoch {record.epoch} 未大於上一筆 {self.records[-1].epoch}')
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def total_wall_time(self) -> float:
        return sum(r.wall_time for r in self.records)

    def best(self) -> EpochRecord:
        if not self.records:
            raise ContractError('收斂紀錄為空')
        return min(self.records, key=lambda r: r.val_loss)

    def write_csv(self, path: str | Path) -> Path:
        """寫入 epoch,train_loss,val_loss（不含 wall time，重跑結果逐位元相同）。"""
        target = Path(path)
        with target.open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['epoch', 'train_loss', 'val_loss'])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])
        return target

    def write_timing_csv(self, path: str | Path) -> Path:
        target = Path(path)
        with target.open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['epoch', 'wall_time_s'])
            for r in self.records:
                writer.writerow([r.epoch, f'{r.wall_time:.3f}'])
        return target


@dataclass
class TrainResult:
    """訓練結果。

    Attributes:
        checkpoint: 最佳驗證 loss 的 checkpoint
        log: 收斂紀錄
        initial_val_loss: 訓練前（epoch 0）的驗證 loss
        model: 已載入最佳參數的模型
    """

    checkpoint: Checkpoint
    log: ConvergenceLog
    initial_val_loss: float
    model: MaskedSinogramModel


@dataclass
class ConvergenceReport:
    """微調與從頭訓練的收斂比較。

    Attributes:
        finetune: 凍結 encoder 微調的結果
        retrain: 從頭訓練的結果
        crossing_epoch: 微調驗證 loss 首次 ≤ 從頭訓練最終驗證 loss 的 epoch（未達到為 None）
    """

    finetune: TrainResult
    retrain: TrainResult
    crossing_epoch: int | None

    @property
    def epochs(self) -> int:
        return len(self.retrain.log)

    @property
    def crossing_fraction(self) -> float | None:
        if self.crossing_epoch is None:
            return None
        return self.crossing_epoch / self.epochs

    def write_csv(self, path: str | Path) -> Path:
        """兩條曲線並列：epoch,finetune_val_loss,retrain_val_loss。"""
        target = Path(path)
        with target.open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['epoch', 'finetune_val_loss', 'retrain_val_loss'])
            for ft, rt in zip(self.finetune.log.records, self.retrain.log.records, strict=True):
                writer.writerow([ft.epoch, repr(ft.val_loss), repr(rt.val_loss)])
        return target


# =============================================================================
# Batches
# =============================================================================


@dataclass
class Batch:
    """一個訓練批次（已正規化）。

    Attributes:
        rows: (B, K, n_bins) 可見投影
        kept: (B, K) 角度索引
        target: (B, n_angles, n_bins) sinogram 或 (B, side, side) 影像
    """

    rows: npt.NDArray[np.float32]
    kept: npt.NDArray[np.int64]
    target: npt.NDArray[np.float32]

    @property
    def size(self) -> int:
        return int(self.rows.shape[0])


class BatchBuilder:
    """依任務把資料集樣本組成批次。"""

    def __init__(self, dataset: Dataset, config: TrainConfig) -> None:
        self.config = config
        self.grid: AngleGrid = dataset.grid
        self.scale = dataset.scale
        self.physical_scale = dataset.physical_scale
        self.sinograms = dataset.train_sinograms
        self.phantoms = dataset.train_phantoms

    def _degrade(
        self, index: int, stream: int, epoch: int
    ) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.int64]]:
        seed = sample_seed(self.config.seed, stream, epoch, index)
        clean = Sinogram(self.grid, np.asarray(self.sinograms[index], dtype=np.float64))
        if self.config.task == 'dntx':
            dose = DoseModel(
                incident_flux=self.config.incident_flux,
                dose_fraction=self.config.dose_fraction,
                rng_seed=seed,
                physical_scale=self.physical_scale,
            )
            noisy = apply_dose(clean, dose)
            return noisy.values, np.arange(self.grid.n_angles, dtype=np.int64)
        spec = MaskSpec(
            scheme=cast(MaskScheme, self.config.resolved_mask_scheme),
            ratio=self.config.resolved_mask_ratio,
            rng_seed=seed,
        )
        kept = spec.kept_indices(self.grid.n_angles)
        return clean.values[kept], kept

    def build(self, indices: npt.NDArray[np.int64], stream: int, epoch: int) -> Batch:
        rows: list[npt.NDArray[np.float64]] = []
        kept: list[npt.NDArray[np.int64]] = []
        for index in indices:
            visible, ids = self._degrade(int(index), stream, epoch)
            rows.append(visible / self.scale)
            kept.append(ids)
        if self.config.task == 'ctx':
            target = np.asarray(self.phantoms[indices], dtype=np.float32)
        else:
            target = np.asarray(self.sinograms[indices], dtype=np.float32) / np.float32(self.scale)
        return Batch(
            rows=np.stack(rows).astype(np.float32),
            kept=np.stack(kept),
            target=target.astype(np.float32),
        )


def split_indices(
    n_samples: int, val_fraction: float
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """訓練集的最後 val_fraction 作為驗證集（至少各一筆）。"""
    if n_samples < 2:
        raise ConfigError('n_train', f'至少需要 2 筆訓練樣本才能切出驗證集，收到 {n_samples}')
    n_val = min(max(1, round(val_fraction * n_samples)), n_samples - 1)
    indices = np.arange(n_samples, dtype=np.int64)
    return indices[: n_samples - n_val], indices[n_samples - n_val :]


def _chunks(indices: npt.NDArray[np.int64], size: int) -> Iterator[npt.NDArray[np.int64]]:
    for start in range(0, len(indices), size):
        yield indices[start : start + size]


# =============================================================================
# Loop
# =============================================================================


def _batch_loss(model: MaskedSinogramModel, batch: Batch, n_angles: int) -> Tensor:
    prediction = model.forward(batch.rows, batch.kept, n_angles)
    return msm_loss(prediction, batch.target)


def _check_dataset(dataset: Dataset, model_config: ModelConfig) -> None:
    side = dataset.image_side
    n_train, n_angles, n_bins = dataset.train_sinograms.shape
    if n_bins != side or n_train != dataset.manifest['n_train']:
        raise IntegrityError(
            f'資料集 sinogram 形狀 {dataset.train_sinograms.shape} 與 manifest 不符'
        )
    if model_config.token_dim != side:
        raise ConfigError('token_dim', f'{model_config.token_dim} 與資料集影像邊長 {side} 不符')
    if model_config.max_angles < n_angles:
        raise ConfigError('max_angles', f'{model_config.max_angles} 小於資料集角度數 {n_angles}')


class Trainer:
    """單一訓練流程（單一寫入者）。

    Attributes:
        model: 訓練中的模型
        dataset: 資料集
        config: 訓練配置
    """

    def __init__(
        self, model: MaskedSinogramModel, dataset: Dataset, config: TrainConfig
    ) -> None:
        config.validate()
        _check_dataset(dataset, model.config)
        self.model = model
        self.dataset = dataset
        self.config = config
        self.builder = BatchBuilder(dataset, config)
        self.n_angles = dataset.grid.n_angles
        self.train_idx, self.val_idx = split_indices(
            int(dataset.train_sinograms.shape[0]), config.val_fraction
        )
        self.optimizer = Adam(model.parameters(), lr=config.lr)

    def _batches(self, indices: npt.NDArray[np.int64], stream: int, epoch: int) -> Iterator[Batch]:
        chunks = list(_chunks(indices, self.config.batch_size))
        if not self.config.prefetch:
            for chunk in chunks:
                yield self.builder.build(chunk, stream, epoch)
            return
        # 背景執行緒組裝下一個批次，主執行緒執行前向與最佳化
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending: Future[Batch] = pool.submit(self.builder.build, chunks[0], stream, epoch)
            for next_chunk in chunks[1:]:
                batch = pending.result()
                pending = pool.submit(self.builder.build, next_chunk, stream, epoch)
                yield batch
            yield pending.result()

    def evaluate(self) -> float:
        """固定退化條件下的驗證 loss（樣本加權平均）。"""
        total = 0.0
        count = 0
        with no_grad():
            for batch in self._batches(self.val_idx, STREAM_VAL, 0):
                total += _batch_loss(self.model, batch, self.n_angles).item() * batch.size
                count += batch.size
        return total / count

    def train_epoch(self, epoch: int) -> float:
        order_rng = np.random.default_rng(sample_seed(self.config.seed, STREAM_SHUFFLE, epoch, 0))
        order = self.train_idx[order_rng.permutation(len(self.train_idx))]
        total = 0.0
        count = 0
        for batch in self._batches(order, STREAM_TRAIN, epoch):
            self.optimizer.zero_grad()
            loss = _batch_loss(self.model, batch, self.n_angles)
            backward(loss)
            self.optimizer.step()
            total += loss.item() * batch.size
            count += batch.size
            logger.debug('批次完成', extra={'epoch': epoch, 'loss': loss.item()})
        return total / count

    def fit(self) -> TrainResult:
        """執行固定 epoch 數，保留驗證 loss 最低的參數。"""
        initial = self.evaluate()
        logger.info(
            '開始訓練',
            extra={'task': self.config.task, 'epochs': self.config.epochs, 'val_loss': initial},
        )
        log = ConvergenceLog()
        best_state = self.model.state_dict()
        best_loss = math.inf
        best_epoch = 0
        for epoch in range(1, self.config.epochs + 1):
            started = time.perf_counter()
            train_loss = self.train_epoch(epoch)
            val_loss = self.evaluate()
            log.append(EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - started))
            if val_loss < best_loss:
                best_loss, best_epoch = val_loss, epoch
                best_state = self.model.state_dict()
            logger.info(
                '訓練 epoch 完成',
                extra={'epoch': epoch, 'train_loss': train_loss, 'val_loss': val_loss},
            )
        self.model.load_state_dict(dict(best_state))
        checkpoint = Checkpoint(
            model_config=self.model.config,
            train_config=self.config,
            state=best_state,
            epoch=best_epoch,
            best_val_loss=best_loss,
            dataset_hash=self.dataset.dataset_hash,
            scale=self.dataset.scale,
            physical_scale=self.dataset.physical_scale,
        )
        return TrainResult(checkpoint, log, initial, self.model)


# =============================================================================
# Tasks
# =============================================================================


def _require_task(config: TrainConfig, task: str) -> None:
    if config.task != task:
        raise ConfigError('task', f'預期 {task}，收到 {config.task}')


def _require_head(model_config: ModelConfig, head_kind: str) -> None:
    if model_config.head_kind != head_kind:
        raise ConfigError('head_kind', f'此任務需要 {head_kind}，收到 {model_config.head_kind}')


def _check_base(base: Checkpoint, dataset: Dataset) -> None:
    if base.dataset_hash != dataset.dataset_hash:
        raise IntegrityError('預訓練 checkpoint 與目前資料集的雜湊不符')


def pretrain_msm(
    dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig
) -> TrainResult:
    """MSM 預訓練：每個樣本每個 epoch 重新抽樣隨機遮罩，loss 涵蓋整張 sinogram。"""
    _require_task(train_config, 'msm')
    _require_head(model_config, 'sino_decoder')
    model = MaskedSinogramModel(model_config, seed=train_config.seed)
    return Trainer(model, dataset, train_config).fit()


def _sino_task(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    base: Checkpoint | None,
) -> TrainResult:
    _require_head(model_config, 'sino_decoder')
    model = MaskedSinogramModel(model_config, seed=train_config.seed)
    if base is not None:
        _check_base(base, dataset)
        model.load_state_dict(dict(base.state))
        logger.info('以預訓練參數初始化', extra={'task': train_config.task})
    return Trainer(model, dataset, train_config).fit()


def train_svtx(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    base: Checkpoint | None = None,
) -> TrainResult:
    """SV-Tx：等間距遮罩（預設比例 0.8）的稀疏視角修補，預設從頭訓練。"""
    _require_task(train_config, 'svtx')
    return _sino_task(dataset, model_config, train_config, base)


def train_dntx(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    base: Checkpoint | None = None,
) -> TrainResult:
    """Dn-Tx：輸入為每個 epoch 重新模擬的低劑量 sinogram，目標為乾淨 sinogram，不遮罩。"""
    _require_task(train_config, 'dntx')
    return _sino_task(dataset, model_config, train_config, base)


def finetune_ctx(
    dataset: Dataset,
    base: Checkpoint | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> TrainResult:
    """C-Tx：沿用 MSM encoder，只訓練 patch decoder，直接輸出影像。

    Raises:
        ContractError: 要求凍結 encoder 卻沒有提供 base
        IntegrityError: base 與資料集不符
    """
    _require_task(train_config, 'ctx')
    _require_head(model_config, 'image_patch_decoder')
    freeze = train_config.resolved_freeze_encoder
    if freeze and base is None:
        raise ContractError('C-Tx 凍結 encoder 微調需要預訓練 MSM checkpoint（--base）')
    model = MaskedSinogramModel(model_config, seed=train_config.seed)
    if base is not None:
        _check_base(base, dataset)
        if base.model_config.head_kind != 'sino_decoder':
            raise ContractError('base 必須是 sino_decoder（MSM）checkpoint')
        model.load_encoder(dict(base.state))
    if freeze:
        model.freeze_encoder()
    return Trainer(model, dataset, train_config).fit()


def compare_convergence(
    dataset: Dataset,
    base: Checkpoint,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> ConvergenceReport:
    """以相同種子與配置，比較凍結 encoder 微調與從頭訓練的收斂速度。"""
    finetune_config = replace(train_config, freeze_encoder=True)
    retrain_config = replace(train_config, freeze_encoder=False, base_checkpoint=None)
    finetune = finetune_ctx(dataset, base, model_config, finetune_config)
    retrain = finetune_ctx(dataset, None, model_config, retrain_config)
    target = retrain.log.records[-1].val_loss
    crossing = next((r.epoch for r in finetune.log.records if r.val_loss <= target), None)
    logger.info(
        '收斂比較完成',
        extra={
            'crossing_epoch': crossing,
            'finetune_wall': finetune.log.total_wall_time,
            'retrain_wall': retrain.log.total_wall_time,
        },
    )
    return ConvergenceReport(finetune, retrain, crossing)
