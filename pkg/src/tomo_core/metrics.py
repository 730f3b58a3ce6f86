"""影像品質指標與掃描評估模組。

SSIM 採 11×11 高斯窗（σ=1.5）、母體共變異數，並裁掉邊界 5 像素後取平均；
PSNR 在 MSE 為 0 時回傳上限 99 dB。
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from tomo_core.ctgeom import (
    AngleGrid,
    DoseModel,
    MaskedSinogram,
    MaskScheme,
    MaskSpec,
    Sinogram,
    apply_dose,
    apply_mask,
    fbp,
)
from tomo_core.exceptions import ConfigError, ContractError, ShapeError
from tomo_core.phantom import Dataset

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
ReconMethod = Callable[[MaskedSinogram], FloatArray]
SweepKind = Literal['mask', 'dose']

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
STREAM_EVAL = 3


# =============================================================================
# Metrics
# =============================================================================


def _pair(a: npt.ArrayLike, b: npt.ArrayLike, op: str) -> tuple[FloatArray, FloatArray]:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(op, tuple(x.shape), tuple(y.shape))
    return x, y


def ssim(a: npt.ArrayLike, b: npt.ArrayLike, data_range: float = 1.0) -> float:
    """結構相似度。

    Args:
        a: 影像
        b: 同形狀影像
        data_range: 動態範圍 L

    Returns:
        [-1, 1] 之間的平均 SSIM

    Raises:
        ShapeError: 形狀不同
        ContractError: 影像小於高斯窗
    """
    x, y = _pair(a, b, 'ssim')
    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if x.ndim != 2 or min(x.shape) < 2 * radius + 1:
        raise ContractError(f'SSIM 需要至少 {2 * radius + 1}×{2 * radius + 1} 的二維影像')

    def blur(img: FloatArray) -> FloatArray:
        return ndimage.gaussian_filter(
            img, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode='reflect'
        )

    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    numerator = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
    denominator = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    cropped = (numerator / denominator)[radius:-radius, radius:-radius]
    return float(cropped.mean(dtype=np.float64))


def psnr(a: npt.ArrayLike, b: npt.ArrayLike, data_range: float = 1.0) -> float:
    """峰值訊噪比（dB），上限 PSNR_CAP。"""
    x, y = _pair(a, b, 'psnr')
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def normalize_pair(recon: npt.ArrayLike, truth: npt.ArrayLike) -> tuple[FloatArray, FloatArray]:
    """以真值的範圍正規化到 [0, 1]，重建結果再截斷到 [0, 1]。"""
    r, t = _pair(recon, truth, 'normalize_pair')
    low = float(t.min())
    span = float(t.max()) - low
    if span <= 0:
        span = 1.0
    return np.clip((r - low) / span, 0.0, 1.0), (t - low) / span


# =============================================================================
# Reports
# =============================================================================


@dataclass
class QualityReport:
    """單一 (方法, 條件) 的逐樣本品質。

    Attributes:
        method: 方法名稱
        condition: 遮罩比例或劑量
        ssim: 各樣本 SSIM（失敗樣本為 NaN）
        psnr: 各樣本 PSNR（失敗樣本為 NaN）
        errors: 失敗樣本的 (索引, 訊息)
    """

    method: str
    condition: float
    ssim: list[float] = field(default_factory=lambda: [])
    psnr: list[float] = field(default_factory=lambda: [])
    errors: list[tuple[int, str]] = field(default_factory=lambda: [])

    @property
    def n_samples(self) -> int:
        return len(self.ssim)

    @property
    def ok(self) -> bool:
        return not self.errors

    def _valid(self, values: list[float]) -> FloatArray:
        arr = np.asarray(values, dtype=np.float64)
        return arr[np.isfinite(arr)]

    @property
    def mean_ssim(self) -> float:
        valid = self._valid(self.ssim)
        return float(valid.mean()) if valid.size else math.nan

    @property
    def std_ssim(self) -> float:
        valid = self._valid(self.ssim)
        return float(valid.std()) if valid.size else math.nan

    @property
    def mean_psnr(self) -> float:
        valid = self._valid(self.psnr)
        return float(valid.mean()) if valid.size else math.nan

    @property
    def std_psnr(self) -> float:
        valid = self._valid(self.psnr)
        return float(valid.std()) if valid.size else math.nan


@dataclass
class SweepTable:
    """方法 × 條件 的平均指標表。

    Attributes:
        metric: ssim 或 psnr
        methods: 列（方法）
        conditions: 欄（條件）
        cells: (方法, 條件) → 平均值；該格有失敗樣本時為 None
    """

    metric: str
    methods: list[str]
    conditions: list[float]
    cells: dict[tuple[str, float], float | None] = field(default_factory=lambda: {})

    def row(self, method: str) -> list[float | None]:
        return [self.cells.get((method, c)) for c in self.conditions]

    def write_csv(self, path: str | Path) -> Path:
        target = Path(path)
        with target.open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['method', *[f'{c:g}' for c in self.conditions]])
            for method in self.methods:
                cells = ['' if v is None else f'{v:.6f}' for v in self.row(method)]
                writer.writerow([method, *cells])
        return target


@dataclass
class Example:
    """三聯圖的一組影像：退化輸入的 FBP、方法輸出、真值。"""

    sample: int
    degraded: FloatArray
    output: FloatArray
    truth: FloatArray


@dataclass
class SweepResult:
    ssim_table: SweepTable
    psnr_table: SweepTable
    reports: list[QualityReport]
    examples: dict[tuple[str, float], list[Example]] = field(default_factory=lambda: {})

    def write_reports_csv(self, path: str | Path) -> Path:
        """逐樣本紀錄：method,condition,sample,ssim,psnr,error。"""
        target = Path(path)
        with target.open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['method', 'condition', 'sample', 'ssim', 'psnr', 'error'])
            for report in self.reports:
                errors = dict(report.errors)
                for i, (s, p) in enumerate(zip(report.ssim, report.psnr, strict=True)):
                    ok = i not in errors
                    writer.writerow(
                        [
                            report.method,
                            f'{report.condition:g}',
                            i,
                            f'{s:.6f}' if ok else '',
                            f'{p:.6f}' if ok else '',
                            errors.get(i, ''),
                        ]
                    )
        return target


# =============================================================================
# Sweep
# =============================================================================


@dataclass
class EvalSet:
    """評估資料：真值影像與其完整 sinogram。"""

    phantoms: npt.NDArray[np.floating]
    sinograms: npt.NDArray[np.floating]
    grid: AngleGrid
    physical_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.phantoms.shape[0] != self.sinograms.shape[0]:
            raise ShapeError('eval_set', tuple(self.phantoms.shape), tuple(self.sinograms.shape))

    def __len__(self) -> int:
        return int(self.phantoms.shape[0])

    @classmethod
    def from_dataset(cls, dataset: Dataset, limit: int | None = None) -> EvalSet:
        n = dataset.eval_phantoms.shape[0] if limit is None else limit
        return cls(
            phantoms=dataset.eval_phantoms[:n],
            sinograms=dataset.eval_sinograms[:n],
            grid=dataset.grid,
            physical_scale=dataset.physical_scale,
        )


@dataclass(frozen=True)
class SweepConfig:
    """掃描配置。

    Attributes:
        kind: mask（遮罩比例）或 dose（劑量比例）
        values: 條件列表
        scheme: 遮罩方式（mask 掃描）
        incident_flux: 入射光子數（dose 掃描）
        seed: 退化種子
        n_examples: 每格保留幾個三聯圖範例
        workers: 樣本層級的執行緒數
    """

    kind: SweepKind = 'mask'
    values: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    scheme: MaskScheme = 'uniform'
    incident_flux: float = 1e4
    seed: int = 0
    n_examples: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.kind not in ('mask', 'dose'):
            raise ConfigError('sweep', f'未知的掃描種類: {self.kind}')
        if not self.values:
            raise ConfigError('values', '至少需要一個條件值')
        for v in self.values:
            if self.kind == 'mask' and not 0.0 <= v < 1.0:
                raise ConfigError('values', f'遮罩比例需落在 [0, 1)，收到 {v}')
            if self.kind == 'dose' and not 0.0 < v <= 1.0:
                raise ConfigError('values', f'劑量比例需落在 (0, 1]，收到 {v}')


def cell_seed(seed: int, cell: int, sample: int) -> int:
    state = np.random.SeedSequence([seed, STREAM_EVAL, cell, sample]).generate_state(1, np.uint64)
    return int(state[0])


def degrade(
    sinogram: npt.ArrayLike,
    grid: AngleGrid,
    config: SweepConfig,
    condition: float,
    seed: int,
    physical_scale: float = 1.0,
) -> MaskedSinogram:
    """依掃描種類退化一張 sinogram；劑量退化保留全部角度。"""
    sino = Sinogram(grid, np.asarray(sinogram, dtype=np.float64))
    if config.kind == 'mask':
        return apply_mask(sino, MaskSpec(scheme=config.scheme, ratio=condition, rng_seed=seed))
    dose = DoseModel(
        incident_flux=config.incident_flux,
        dose_fraction=condition,
        rng_seed=seed,
        physical_scale=physical_scale,
    )
    noisy = apply_dose(sino, dose)
    return MaskedSinogram(noisy, np.arange(grid.n_angles, dtype=np.int64))


def _run_method(
    method: ReconMethod, masked: MaskedSinogram
) -> tuple[FloatArray | None, Exception | None]:
    try:
        return np.asarray(method(masked), dtype=np.float64), None
    except Exception as exc:
        return None, exc


def sweep(
    eval_set: EvalSet,
    methods: Mapping[str, ReconMethod],
    config: SweepConfig,
) -> SweepResult:
    """對每個 (方法, 條件) 執行 退化 → 方法 → 與真值比較。

    同一 (條件, 樣本) 的退化輸入對所有方法相同；
    任一樣本失敗時記錄在該格，其餘照常進行。

    Raises:
        ConfigError: 掃描配置不合法
    """
    config.validate()
    names = list(methods)
    conditions = [float(v) for v in config.values]
    ssim_table = SweepTable('ssim', names, conditions)
    psnr_table = SweepTable('psnr', names, conditions)
    reports: dict[tuple[str, float], QualityReport] = {
        (m, c): QualityReport(m, c) for c in conditions for m in names
    }
    examples: dict[tuple[str, float], list[Example]] = {}

    def evaluate_sample(cell: int, condition: float, i: int) -> list[tuple[str, float, float, str]]:
        masked = degrade(
            eval_set.sinograms[i],
            eval_set.grid,
            config,
            condition,
            cell_seed(config.seed, cell, i),
            eval_set.physical_scale,
        )
        truth = np.asarray(eval_set.phantoms[i], dtype=np.float64)
        rows: list[tuple[str, float, float, str]] = []
        for name in names:
            output, error = _run_method(methods[name], masked)
            if output is None:
                rows.append((name, math.nan, math.nan, f'{type(error).__name__}: {error}'))
                continue
            if output.shape != truth.shape:
                message = f'輸出形狀 {output.shape} 與真值 {truth.shape} 不符'
                rows.append((name, math.nan, math.nan, message))
                continue
            recon_n, truth_n = normalize_pair(output, truth)
            rows.append((name, ssim(recon_n, truth_n), psnr(recon_n, truth_n), ''))
            if i < config.n_examples:
                degraded_img = fbp(masked.sinogram)
                examples.setdefault((name, condition), []).append(
                    Example(i, degraded_img, output, truth)
                )
        return rows

    for cell, condition in enumerate(conditions):
        samples = range(len(eval_set))
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                results = list(pool.map(lambda i: evaluate_sample(cell, condition, i), samples))
        else:
            results = [evaluate_sample(cell, condition, i) for i in samples]
        for i, rows in enumerate(results):
            for name, s, p, message in rows:
                report = reports[(name, condition)]
                report.ssim.append(s)
                report.psnr.append(p)
                if message:
                    report.errors.append((i, message))
        for name in names:
            report = reports[(name, condition)]
            if report.errors:
                logger.warning(
                    '掃描格有失敗樣本',
                    extra={'method': name, 'condition': condition, 'failed': len(report.errors)},
                )
            ssim_table.cells[(name, condition)] = None if report.errors else report.mean_ssim
            psnr_table.cells[(name, condition)] = None if report.errors else report.mean_psnr
        logger.info('掃描條件完成', extra={'kind': config.kind, 'condition': condition})

    for key in examples:
        examples[key].sort(key=lambda e: e.sample)
    ordered = [reports[(m, c)] for m in names for c in conditions]
    return SweepResult(ssim_table, psnr_table, ordered, examples)


def mean_ssim(recons: Sequence[npt.ArrayLike], truths: Sequence[npt.ArrayLike]) -> float:
    """對多對 (重建, 真值) 正規化後取平均 SSIM。"""
    values = [ssim(*normalize_pair(r, t)) for r, t in zip(recons, truths, strict=True)]
    return float(np.mean(values))
