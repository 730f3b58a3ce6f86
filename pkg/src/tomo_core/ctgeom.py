"""平行束 CT 幾何模組。

提供正向 Radon 轉換（旋轉後沿欄加總）、濾波反投影（iradon 基準）、
Beer 定律下的 Poisson 低劑量模擬，以及隨機、均勻與缺楔三種投影遮罩。

座標約定：影像中心 c = (N-1)/2，X = col - c、Y = row - c。
角度 θ 的投影在探測器位置 s 的值為沿 s·(cosθ, sinθ) + t·(-sinθ, cosθ) 的線積分。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Protocol, runtime_checkable

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from tomo_core.config import DEFAULT_INCIDENT_FLUX
from tomo_core.exceptions import ConfigError, ContractError, GeometryError, NumericError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
FilterName = Literal['ramlak', 'shepp_logan', 'hann', 'none']
MaskScheme = Literal['random', 'uniform', 'wedge']

FILTERS: tuple[str, ...] = ('ramlak', 'shepp_logan', 'hann', 'none')


@runtime_checkable
class HasValues(Protocol):
    """具有 values 影像陣列的物件（例如 PhantomImage）。"""

    @property
    def values(self) -> FloatArray: ...


# =============================================================================
# Domain types
# =============================================================================


@dataclass(frozen=True)
class AngleGrid:
    """等間距投影角度網格（結束角不含）。

    Attributes:
        n_angles: 角度數
        start_deg: 起始角（度）
        end_deg: 結束角（度，不含）
    """

    n_angles: int = 180
    start_deg: float = 0.0
    end_deg: float = 180.0

    def __post_init__(self) -> None:
        if self.n_angles < 2:
            raise GeometryError(f'角度數至少為 2，收到 {self.n_angles}')
        if self.end_deg <= self.start_deg:
            raise GeometryError(f'結束角 {self.end_deg} 必須大於起始角 {self.start_deg}')

    @property
    def step_deg(self) -> float:
        return (self.end_deg - self.start_deg) / self.n_angles

    @property
    def angles_deg(self) -> FloatArray:
        return self.start_deg + np.arange(self.n_angles, dtype=np.float64) * self.step_deg

    @property
    def angles_rad(self) -> FloatArray:
        return np.deg2rad(self.angles_deg)

    def to_dict(self) -> dict[str, float | int]:
        return {'n_angles': self.n_angles, 'start_deg': self.start_deg, 'end_deg': self.end_deg}


@dataclass
class Sinogram:
    """角度 × 探測器 bin 的線積分矩陣。

    Attributes:
        grid: 角度網格
        values: (n_angles, n_bins) 線積分
    """

    grid: AngleGrid
    values: FloatArray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.n_angles:
            raise GeometryError(
                f'sinogram 形狀 {self.values.shape} 與角度數 {self.grid.n_angles} 不符'
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericError('sinogram 含有非有限值')

    @property
    def n_bins(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class DoseModel:
    """Beer 定律光子計數模型。

    Attributes:
        incident_flux: 每個 bin 的入射光子數 I_0
        dose_fraction: 相對正常劑量的比例，(0, 1]
        rng_seed: Poisson 取樣種子
        physical_scale: sinogram 單位換算成衰減值的倍率（資料集 manifest 記錄）
    """

    incident_flux: float = DEFAULT_INCIDENT_FLUX
    dose_fraction: float = 1.0
    rng_seed: int = 0
    physical_scale: float = 1.0

    def validate(self) -> None:
        if self.incident_flux <= 0:
            raise ConfigError('incident_flux', f'必須 > 0，收到 {self.incident_flux}')
        if not 0.0 < self.dose_fraction <= 1.0:
            raise ConfigError('dose_fraction', f'需落在 (0, 1]，收到 {self.dose_fraction}')
        if self.physical_scale <= 0:
            raise ConfigError('physical_scale', f'必須 > 0，收到 {self.physical_scale}')


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    """投影遮罩規格。

    Attributes:
        scheme: random（隨機不放回）、uniform（等間距保留）、wedge（連續缺楔）
        ratio: 遮掉的比例，[0, 1)
        rng_seed: 隨機種子（random / wedge 使用）
    """

    scheme: MaskScheme = 'random'
    ratio: float = 0.8
    rng_seed: int = 0

    def validate(self) -> None:
        if self.scheme not in ('random', 'uniform', 'wedge'):
            raise ConfigError('scheme', f'未知的遮罩方式: {self.scheme}')
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError('ratio', f'需落在 [0, 1)，收到 {self.ratio}')

    def kept_count(self, n_angles: int) -> int:
        return n_angles - _round_half_up(self.ratio * n_angles)

    def kept_indices(self, n_angles: int) -> IntArray:
        """計算保留的角度索引（遞增排序）。

        Raises:
            ConfigError: ratio 超出範圍
            ContractError: 保留數少於 1
        """
        self.validate()
        kept = self.kept_count(n_angles)
        if kept < 1:
            raise ContractError(f'遮罩比例 {self.ratio} 在 {n_angles} 個角度下沒有保留任何投影')
        if kept == n_angles:
            return np.arange(n_angles, dtype=np.int64)
        if self.scheme == 'uniform':
            # 保留數固定為 kept；整除時即每 k 個保留一個 {0, k, 2k, ...}，
            # 否則間距在 floor(n/kept) 與 ceil(n/kept) 之間交替
            return (np.arange(kept, dtype=np.int64) * n_angles) // kept
        rng = np.random.default_rng(self.rng_seed)
        if self.scheme == 'random':
            chosen = rng.choice(n_angles, size=kept, replace=False)
            return np.sort(chosen.astype(np.int64))
        start = int(rng.integers(n_angles))
        removed = (start + np.arange(n_angles - kept)) % n_angles
        keep_mask = np.ones(n_angles, dtype=bool)
        keep_mask[removed] = False
        return np.flatnonzero(keep_mask).astype(np.int64)


@dataclass
class MaskedSinogram:
    """遮罩後的 sinogram：未保留的列為零。

    Attributes:
        sinogram: 零填補後的 sinogram
        kept_indices: 保留的角度索引（遞增）
    """

    sinogram: Sinogram
    kept_indices: IntArray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def visible_rows(self) -> FloatArray:
        return self.sinogram.values[self.kept_indices]

    @property
    def mask_ratio(self) -> float:
        return 1.0 - len(self.kept_indices) / self.sinogram.grid.n_angles


# =============================================================================
# Forward projection
# =============================================================================


def _as_image(image: HasValues | npt.ArrayLike) -> FloatArray:
    raw = image.values if isinstance(image, HasValues) else image
    return np.asarray(raw, dtype=np.float64)


def rotate_image(image: HasValues | npt.ArrayLike, degrees: float) -> FloatArray:
    """以影像中心將影像逆時針旋轉（X-Y 平面）指定角度，雙線性內插，範圍外補零。

    Args:
        image: 正方形影像
        degrees: 旋轉角（度）

    Returns:
        旋轉後影像，與輸入同形狀
    """
    values = _as_image(image)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise GeometryError(f'影像必須為正方形，收到 {values.shape}')
    side = values.shape[0]
    center = (side - 1) / 2.0
    coords = np.arange(side, dtype=np.float64) - center
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    alpha = math.radians(degrees)
    cos_a, sin_a = math.cos(alpha), math.sin(alpha)
    src_col = center + xx * cos_a + yy * sin_a
    src_row = center - xx * sin_a + yy * cos_a
    return ndimage.map_coordinates(
        values, [src_row, src_col], order=1, mode='constant', cval=0.0, prefilter=False
    )


def radon(image: HasValues | npt.ArrayLike, grid: AngleGrid) -> Sinogram:
    """正向 Radon 轉換：每個角度將影像旋轉 -θ 後沿欄加總。

    Args:
        image: 正方形影像，支撐集位於內切圓內
        grid: 角度網格

    Returns:
        (n_angles, side) 的 sinogram，bin 間距 1 像素

    Raises:
        GeometryError: 影像非正方形
    """
    values = _as_image(image)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise GeometryError(f'影像必須為正方形，收到 {values.shape}')
    rows = [rotate_image(values, -theta).sum(axis=0) for theta in grid.angles_deg]
    return Sinogram(grid=grid, values=np.stack(rows))


# =============================================================================
# Filtered back-projection
# =============================================================================


def ramp_filter(n_bins: int, kind: FilterName = 'ramlak') -> FloatArray:
    """建立頻域濾波器（以空間域 Ram-Lak 核設計，避免直流偏移）。

    Args:
        n_bins: 探測器 bin 數
        kind: 濾波器種類

    Returns:
        長度為補零後 FFT 大小的頻域濾波器
    """
    if kind not in FILTERS:
        raise ConfigError('filter', f'未知的濾波器: {kind}，可用: {", ".join(FILTERS)}')
    size = max(64, 1 << math.ceil(math.log2(2 * n_bins)))
    if kind == 'none':
        return np.ones(size, dtype=np.float64)
    n = np.concatenate(
        (np.arange(1, size // 2 + 1, 2, dtype=np.float64), np.arange(size // 2 - 1, 0, -2))
    )
    kernel = np.zeros(size, dtype=np.float64)
    kernel[0] = 0.25
    kernel[1::2] = -1.0 / (np.pi * n) ** 2
    response = 2.0 * np.real(np.fft.fft(kernel))
    if kind == 'shepp_logan':
        omega = np.pi * np.fft.fftfreq(size)[1:]
        response[1:] *= np.sin(omega) / omega
    elif kind == 'hann':
        response *= np.fft.fftshift(np.hanning(size))
    return response


def fbp(
    sino: Sinogram,
    filter: FilterName = 'ramlak',
    kept_indices: npt.ArrayLike | None = None,
) -> FloatArray:
    """濾波反投影（iradon）。

    未指定 kept_indices 時全部列（含零填補列）都參與反投影，角度權重為 π/(2·n_angles)；
    指定時僅反投影這些列，權重為 π/(2·len(kept_indices))，相當於以較大步距掃描。
    輸出保留原始數值，不做截斷。

    Args:
        sino: sinogram
        filter: 濾波器種類
        kept_indices: 只反投影這些角度（可選）

    Returns:
        (n_bins, n_bins) 重建影像

    Raises:
        GeometryError: 角度數少於 2 或 kept_indices 為空
    """
    if sino.grid.n_angles < 2:
        raise GeometryError(f'反投影至少需要 2 個角度，收到 {sino.grid.n_angles}')
    if kept_indices is None:
        rows = np.arange(sino.grid.n_angles)
    else:
        rows = np.asarray(kept_indices, dtype=np.int64)
        if rows.size == 0:
            raise GeometryError('kept_indices 為空，無法反投影')
    n_bins = sino.n_bins
    response = ramp_filter(n_bins, filter)
    size = response.shape[0]
    padded = np.zeros((rows.size, size), dtype=np.float64)
    padded[:, :n_bins] = sino.values[rows]
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * response, axis=1))[:, :n_bins]

    center = (n_bins - 1) / 2.0
    coords = np.arange(n_bins, dtype=np.float64) - center
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    bins = np.arange(n_bins, dtype=np.float64)
    recon = np.zeros((n_bins, n_bins), dtype=np.float64)
    for projection, theta in zip(filtered, sino.grid.angles_rad[rows], strict=True):
        s = xx * math.cos(theta) + yy * math.sin(theta) + center
        recon += np.interp(s, bins, projection, left=0.0, right=0.0)
    return recon * np.pi / (2.0 * rows.size)


# =============================================================================
# Degradations
# =============================================================================


def apply_dose(sino: Sinogram, dose: DoseModel) -> Sinogram:
    """以 Beer 定律與 Poisson 計數模擬低劑量量測。

    counts ~ Poisson(I_0 · d · exp(-k·p))，估計值 p̂ = -ln(max(counts, 1) / (I_0 · d)) / k，
    其中 k 為 physical_scale。

    Args:
        sino: 乾淨 sinogram（資料集單位）
        dose: 劑量模型

    Returns:
        含雜訊的 sinogram（資料集單位）

    Raises:
        ConfigError: 劑量參數不合法
    """
    dose.validate()
    attenuation = sino.values * dose.physical_scale
    expected = dose.incident_flux * dose.dose_fraction * np.exp(-attenuation)
    rng = np.random.default_rng(dose.rng_seed)
    counts = rng.poisson(expected).astype(np.float64)
    estimate = -np.log(np.maximum(counts, 1.0) / (dose.incident_flux * dose.dose_fraction))
    return Sinogram(grid=sino.grid, values=estimate / dose.physical_scale)


def apply_mask(sino: Sinogram, spec: MaskSpec) -> MaskedSinogram:
    """遮罩投影：保留列原樣複製，其餘列歸零。

    Args:
        sino: 完整 sinogram
        spec: 遮罩規格

    Returns:
        遮罩後的 sinogram 與保留索引

    Raises:
        ConfigError: ratio 超出 [0, 1)
        ContractError: 保留數少於 1
    """
    kept = spec.kept_indices(sino.grid.n_angles)
    values = np.zeros_like(sino.values)
    values[kept] = sino.values[kept]
    return MaskedSinogram(sinogram=Sinogram(grid=sino.grid, values=values), kept_indices=kept)


def physical_scale_for(max_value: float, min_transmission: float = 0.01) -> float:
    """計算讓最大線積分的穿透率恰為 min_transmission 的單位倍率。"""
    if max_value <= 0:
        return 1.0
    return math.log(1.0 / min_transmission) / max_value
