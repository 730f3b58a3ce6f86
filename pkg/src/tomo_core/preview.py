"""8-bit PGM（P5）預覽圖。"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import numpy as np
import numpy.typing as npt

from tomo_core.exceptions import ContractError

PANEL_GAP = 2


def to_uint8(image: npt.ArrayLike) -> npt.NDArray[np.uint8]:
    """逐張 min-max 縮放到 0–255；常數影像輸出全 0。"""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f'預覽圖必須是二維，收到形狀 {arr.shape}')
    low, high = float(arr.min()), float(arr.max())
    if high <= low:
        return np.zeros(arr.shape, dtype=np.uint8)
    scaled = np.round((arr - low) / (high - low) * 255.0)
    return scaled.astype(np.uint8)


def write_pgm(path: str | Path, image: npt.ArrayLike) -> Path:
    return _write_raw(path, to_uint8(image))


def read_pgm(path: str | Path) -> npt.NDArray[np.uint8]:
    """讀回 write_pgm 寫出的檔案（僅支援其產生的 header 格式）。"""
    data = Path(path).read_bytes()
    magic, size, maxval, payload = data.split(b'\n', 3)
    if magic != b'P5' or maxval != b'255':
        raise ContractError(f'不是 8-bit P5 PGM: {path}')
    cols, rows = (int(v) for v in size.split())
    return np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols)


def write_triptych(path: str | Path, panels: Sequence[npt.ArrayLike]) -> Path:
    """左右並排（各自縮放），面板間以白色細線分隔。

    用於 退化輸入 / 方法輸出 / 真值 的對照。
    """
    if not panels:
        raise ContractError('三聯圖至少需要一個面板')
    scaled = [to_uint8(p) for p in panels]
    height = max(p.shape[0] for p in scaled)
    gap = np.full((height, PANEL_GAP), 255, dtype=np.uint8)
    pieces: list[npt.NDArray[np.uint8]] = []
    for i, panel in enumerate(scaled):
        if i:
            pieces.append(gap)
        padded = np.zeros((height, panel.shape[1]), dtype=np.uint8)
        padded[: panel.shape[0]] = panel
        pieces.append(padded)
    combined = np.concatenate(pieces, axis=1)
    return _write_raw(path, combined)


def _write_raw(path: str | Path, pixels: npt.NDArray[np.uint8]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = pixels.shape
    with target.open('wb') as fh:
        fh.write(f'P5\n{cols} {rows}\n255\n'.encode('ascii'))
        fh.write(pixels.tobytes())
    return target
