"""假體影像與資料集生成模組。

以圓形、橢圓、三角形與矩形的疊加合成二維衰減圖，
並將影像與其完整視角 sinogram 寫成 TensorContainer 資料集。
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt

from tomo_core.config import DEFAULT_N_ANGLES, PhantomConfig
from tomo_core.container import ContainerWriter, file_sha256, json_sha256, read_tensor
from tomo_core.ctgeom import AngleGrid, physical_scale_for, radon
from tomo_core.exceptions import ConfigError, IntegrityError
from tomo_core.types import DatasetManifest, TensorFileEntry

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
ShapeKind = Literal['circle', 'ellipse', 'triangle', 'rectangle']

SHAPE_KINDS: tuple[ShapeKind, ...] = ('circle', 'ellipse', 'triangle', 'rectangle')
DATASET_FORMAT = 'tomotx-dataset/1'
MANIFEST_NAME = 'manifest.json'
# 評估集使用與訓練集不重疊的索引空間，n_train 改變時評估集不變
EVAL_INDEX_OFFSET = 1 << 40
_CHUNK = 256

# 串流 tag：數量與各形狀各自獨立
_STREAM_COUNT = 0
_STREAM_SHAPE = 1


@dataclass(frozen=True)
class Shape:
    """單一幾何形狀（座標以影像中心為原點，單位為像素）。

    Attributes:
        kind: 形狀種類
        cx: 中心 X
        cy: 中心 Y
        a: 主半徑 / 半寬
        b: 次半徑 / 半高（圓形忽略）
        angle: 旋轉角（弧度）
        intensity: 衰減係數
    """

    kind: ShapeKind
    cx: float
    cy: float
    a: float
    b: float
    angle: float
    intensity: float


@dataclass
class PhantomImage:
    """真值衰減圖。

    Attributes:
        side: 邊長（像素）
        values: (side, side) 非負值，內切圓外恆為 0
    """

    side: int
    values: FloatArray

    def __post_init__(self) -> None:
        if self.values.shape != (self.side, self.side):
            raise ConfigError('values', f'形狀 {self.values.shape} 與 side={self.side} 不符')


def _pixel_grid(side: int) -> tuple[FloatArray, FloatArray]:
    center = (side - 1) / 2.0
    coords = np.arange(side, dtype=np.float64) - center
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    return xx, yy


def support_mask(side: int) -> npt.NDArray[np.bool_]:
    """內切圓支撐集（留一像素邊界，確保旋轉取樣不會落到陣列外）。"""
    xx, yy = _pixel_grid(side)
    radius = side / 2.0 - 1.0
    return xx**2 + yy**2 <= radius**2


def shape_mask(shape: Shape, side: int) -> npt.NDArray[np.bool_]:
    """以像素中心判斷落在形狀內的像素。"""
    xx, yy = _pixel_grid(side)
    dx, dy = xx - shape.cx, yy - shape.cy
    cos_a, sin_a = math.cos(shape.angle), math.sin(shape.angle)
    u = dx * cos_a + dy * sin_a
    v = -dx * sin_a + dy * cos_a
    if shape.kind == 'circle':
        return dx**2 + dy**2 <= shape.a**2
    if shape.kind == 'ellipse':
        return (u / shape.a) ** 2 + (v / shape.b) ** 2 <= 1.0
    if shape.kind == 'rectangle':
        return (np.abs(u) <= shape.a) & (np.abs(v) <= shape.b)
    # 三角形：頂點由 (a, b, angle) 決定，以三個半平面的同號判斷
    vertices = _triangle_vertices(shape)
    signs: list[npt.NDArray[np.float64]] = []
    for (x0, y0), (x1, y1) in zip(vertices, vertices[1:] + vertices[:1], strict=True):
        signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
    stacked = np.stack(signs)
    return np.all(stacked >= 0, axis=0) | np.all(stacked <= 0, axis=0)


def _triangle_vertices(shape: Shape) -> list[tuple[float, float]]:
    radii = (shape.a, shape.b, 0.5 * (shape.a + shape.b))
    offsets = (0.0, 2.0 * math.pi / 3.0 + 0.3, 4.0 * math.pi / 3.0 - 0.2)
    return [
        (shape.cx + r * math.cos(shape.angle + o), shape.cy + r * math.sin(shape.angle + o))
        for r, o in zip(radii, offsets, strict=True)
    ]


def rasterize(shapes: list[Shape], side: int) -> PhantomImage:
    """將形狀以加法疊合，截斷到 [0, 1]，並套用內切圓支撐集。"""
    canvas = np.zeros((side, side), dtype=np.float64)
    for shape in shapes:
        canvas += shape.intensity * shape_mask(shape, side)
    canvas = np.clip(canvas, 0.0, 1.0)
    canvas[~support_mask(side)] = 0.0
    return PhantomImage(side=side, values=canvas)


def sample_shapes(config: PhantomConfig, index: int) -> list[Shape]:
    """依 (seed, index) 決定性地抽樣形狀列表。

    每個形狀使用由 (seed, index, ordinal) 衍生的獨立亂數串流，
    因此單一樣本的結果與批次大小無關。
    """
    count_rng = np.random.default_rng(np.random.SeedSequence([config.seed, index, _STREAM_COUNT]))
    n_shapes = int(count_rng.integers(config.shapes_min, config.shapes_max + 1))
    side = config.image_side
    radius = side / 2.0 - 1.0
    shapes: list[Shape] = []
    for ordinal in range(n_shapes):
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, index, _STREAM_SHAPE, ordinal])
        )
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        size = float(rng.uniform(*config.size_range)) * side
        minor = size * float(rng.uniform(0.4, 1.0))
        r_center = 0.75 * radius * math.sqrt(float(rng.uniform()))
        phi = float(rng.uniform(0.0, 2.0 * math.pi))
        shapes.append(
            Shape(
                kind=kind,
                cx=r_center * math.cos(phi),
                cy=r_center * math.sin(phi),
                a=size,
                b=size if kind == 'circle' else minor,
                angle=float(rng.uniform(0.0, math.pi)),
                intensity=float(rng.uniform(*config.intensity_range)),
            )
        )
    return shapes


def generate_phantom(config: PhantomConfig, index: int) -> PhantomImage:
    """生成第 index 張假體影像。

    Args:
        config: 假體配置
        index: 非負樣本索引

    Returns:
        (config.seed, index) 完全決定的假體影像

    Raises:
        ConfigError: 配置不合法或 index 為負
    """
    config.validate()
    if index < 0:
        raise ConfigError('index', f'必須為非負整數，收到 {index}')
    return rasterize(sample_shapes(config, index), config.image_side)


# =============================================================================
# Dataset
# =============================================================================


@dataclass
class Dataset:
    """已載入的資料集（大型陣列以 memory-map 開啟）。

    Attributes:
        manifest: 資料集 manifest
        dataset_hash: manifest 的雜湊
        train_phantoms: (n_train, side, side)
        train_sinograms: (n_train, n_angles, side)
        eval_phantoms: (n_eval, side, side)
        eval_sinograms: (n_eval, n_angles, side)
    """

    manifest: DatasetManifest
    dataset_hash: str
    train_phantoms: npt.NDArray[np.float32]
    train_sinograms: npt.NDArray[np.float32]
    eval_phantoms: npt.NDArray[np.float32]
    eval_sinograms: npt.NDArray[np.float32]

    @property
    def grid(self) -> AngleGrid:
        g = self.manifest['angle_grid']
        return AngleGrid(n_angles=g['n_angles'], start_deg=g['start_deg'], end_deg=g['end_deg'])

    @property
    def scale(self) -> float:
        return self.manifest['scale']

    @property
    def physical_scale(self) -> float:
        return self.manifest['physical_scale']

    @property
    def image_side(self) -> int:
        return int(self.manifest['phantom_config']['image_side'])


def _simulate(config: PhantomConfig, grid: AngleGrid, index: int) -> tuple[FloatArray, FloatArray]:
    image = generate_phantom(config, index)
    return image.values, radon(image, grid).values


def _iter_samples(
    config: PhantomConfig, grid: AngleGrid, indices: range, workers: int
) -> Iterator[tuple[FloatArray, FloatArray]]:
    """依索引順序產生 (影像, sinogram)；多執行緒時仍按順序輸出。"""
    if workers <= 1:
        for index in indices:
            yield _simulate(config, grid, index)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(indices), _CHUNK):
            chunk = indices[start : start + _CHUNK]
            yield from pool.map(lambda i: _simulate(config, grid, i), chunk)


def _write_split(
    out_dir: Path,
    split: str,
    config: PhantomConfig,
    grid: AngleGrid,
    indices: range,
    workers: int,
) -> float:
    """寫入一個切分的影像與 sinogram，回傳 sinogram 最大絕對值。"""
    side = config.image_side
    n = len(indices)
    max_abs = 0.0
    with (
        ContainerWriter(out_dir / f'{split}_phantoms.tt', (n, side, side)) as images,
        ContainerWriter(out_dir / f'{split}_sinograms.tt', (n, grid.n_angles, side)) as sinos,
    ):
        for image, sino in _iter_samples(config, grid, indices, workers):
            images.append(image)
            sinos.append(sino)
            max_abs = max(max_abs, float(np.max(np.abs(sino))))
    logger.info('資料集切分已寫入', extra={'split': split, 'count': n})
    return max_abs


def validate_counts(n_train: int, n_eval: int) -> None:
    """檢查樣本數（無上限，全尺寸的 100000 / 2000 亦可）。"""
    if n_train < 1:
        raise ConfigError('n_train', f'必須 ≥ 1，收到 {n_train}')
    if n_eval < 1:
        raise ConfigError('n_eval', f'必須 ≥ 1，收到 {n_eval}')


def generate_dataset(
    config: PhantomConfig,
    n_train: int,
    n_eval: int,
    output_path: str | Path,
    grid: AngleGrid | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """生成假體與完整視角 sinogram 資料集。

    Args:
        config: 假體配置
        n_train: 訓練樣本數
        n_eval: 保留評估樣本數
        output_path: 輸出目錄
        grid: 角度網格（預設 60 個角度涵蓋 0–180°）
        workers: 生成用執行緒數

    Returns:
        寫入的 manifest

    Raises:
        ConfigError: 配置或樣本數不合法
        OSError: 輸出目錄無法寫入
    """
    config.validate()
    validate_counts(n_train, n_eval)
    grid = grid or AngleGrid(n_angles=DEFAULT_N_ANGLES)
    out_dir = Path(output_path)
    out_dir.mkdir(parents=True, exist_ok=True)

    logger.info(
        '開始生成資料集',
        extra={'n_train': n_train, 'n_eval': n_eval, 'side': config.image_side},
    )
    train_max = _write_split(out_dir, 'train', config, grid, range(n_train), workers)
    eval_indices = range(EVAL_INDEX_OFFSET, EVAL_INDEX_OFFSET + n_eval)
    _write_split(out_dir, 'eval', config, grid, eval_indices, workers)

    scale = train_max if train_max > 0 else 1.0
    files: dict[str, TensorFileEntry] = {}
    for name in ('train_phantoms', 'train_sinograms', 'eval_phantoms', 'eval_sinograms'):
        path = out_dir / f'{name}.tt'
        files[name] = {
            'shape': list(read_tensor(path, mmap=True).shape),
            'sha256': file_sha256(path),
        }

    manifest: DatasetManifest = {
        'format': DATASET_FORMAT,
        'phantom_config': config.to_dict(),
        'angle_grid': {
            'n_angles': grid.n_angles,
            'start_deg': grid.start_deg,
            'end_deg': grid.end_deg,
        },
        'n_train': n_train,
        'n_eval': n_eval,
        'scale': scale,
        'physical_scale': physical_scale_for(scale),
        'files': files,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True) + '\n',
        encoding='utf-8',
    )
    logger.info('資料集已完成', extra={'path': str(out_dir), 'hash': dataset_hash(manifest)})
    return manifest


def dataset_hash(manifest: DatasetManifest) -> str:
    """資料集雜湊（manifest 內容的 SHA256，含各檔案雜湊）。"""
    return json_sha256(manifest)


def load_dataset(path: str | Path, *, verify: bool = True) -> Dataset:
    """載入資料集。

    Args:
        path: 資料集目錄
        verify: 是否重新計算檔案雜湊比對 manifest

    Returns:
        Dataset 實例

    Raises:
        FileNotFoundError: manifest 或張量檔不存在
        IntegrityError: 檔案雜湊或形狀與 manifest 不符
    """
    root = Path(path)
    manifest: DatasetManifest = json.loads((root / MANIFEST_NAME).read_text(encoding='utf-8'))
    if manifest.get('format') != DATASET_FORMAT:
        raise IntegrityError(f'不支援的資料集格式: {manifest.get("format")}')
    arrays: dict[str, npt.NDArray[np.float32]] = {}
    for name, entry in manifest['files'].items():
        file_path = root / f'{name}.tt'
        if verify and file_sha256(file_path) != entry['sha256']:
            raise IntegrityError(f'檔案雜湊與 manifest 不符: {file_path}')
        arrays[name] = read_tensor(file_path, mmap=True)
        if list(arrays[name].shape) != entry['shape']:
            raise IntegrityError(f'檔案形狀與 manifest 不符: {file_path}')
    return Dataset(
        manifest=manifest,
        dataset_hash=dataset_hash(manifest),
        train_phantoms=arrays['train_phantoms'],
        train_sinograms=arrays['train_sinograms'],
        eval_phantoms=arrays['eval_phantoms'],
        eval_sinograms=arrays['eval_sinograms'],
    )
