"""TensorContainer 檔案格式模組。

格式為一行文字 header 加上原始 payload：

    magic=TOMOTX1 dtype=f32 shape=60x64 byte_order=little\\n<row-major float32 bytes>

payload 長度必須等於 4·prod(shape)，否則讀取端拒絕。
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path
from types import TracebackType
from typing import Any

import numpy as np
import numpy.typing as npt

from tomo_core.exceptions import ContainerFormatError

logger = logging.getLogger(__name__)

MAGIC = 'TOMOTX1'
FILE_SUFFIX = '.tt'
_DTYPE = np.dtype('<f4')
_MAX_HEADER_BYTES = 4096


def _format_header(shape: tuple[int, ...]) -> bytes:
    shape_text = 'x'.join(str(d) for d in shape)
    return f'magic={MAGIC} dtype=f32 shape={shape_text} byte_order=little\n'.encode('ascii')


def _parse_header(line: bytes, path: Path) -> tuple[int, ...]:
    """解析 header 並回傳形狀。

    Raises:
        ContainerFormatError: magic、dtype 或 byte_order 不符
    """
    try:
        text = line.decode('ascii').rstrip('\n')
    except UnicodeDecodeError as exc:
        raise ContainerFormatError(f'header 不是 ASCII: {path}') from exc
    fields: dict[str, str] = {}
    for item in text.split(' '):
        key, sep, value = item.partition('=')
        if not sep:
            raise ContainerFormatError(f'header 欄位格式錯誤 {item!r}: {path}')
        fields[key] = value
    if fields.get('magic') != MAGIC:
        raise ContainerFormatError(f'magic 不符（預期 {MAGIC}）: {path}')
    if fields.get('dtype') != 'f32' or fields.get('byte_order') != 'little':
        raise ContainerFormatError(f'僅支援 little-endian f32: {path}')
    shape_text = fields.get('shape')
    if shape_text is None:
        raise ContainerFormatError(f'header 缺少 shape: {path}')
    if shape_text == '':
        return ()
    try:
        shape = tuple(int(d) for d in shape_text.split('x'))
    except ValueError as exc:
        raise ContainerFormatError(f'shape 無法解析 {shape_text!r}: {path}') from exc
    if any(d < 0 for d in shape):
        raise ContainerFormatError(f'shape 含負數 {shape_text!r}: {path}')
    return shape


def _read_header(path: Path) -> tuple[tuple[int, ...], int]:
    """讀取 header，回傳 (形狀, payload 起始位移)。"""
    with path.open('rb') as fh:
        line = fh.readline(_MAX_HEADER_BYTES)
    if not line.endswith(b'\n'):
        raise ContainerFormatError(f'找不到 header 結尾: {path}')
    shape = _parse_header(line, path)
    offset = len(line)
    expected = _DTYPE.itemsize * math.prod(shape)
    actual = path.stat().st_size - offset
    if actual != expected:
        raise ContainerFormatError(
            f'payload 長度 {actual} 與 shape {shape} 預期的 {expected} 不符: {path}'
        )
    return shape, offset


def write_tensor(path: str | Path, array: npt.ArrayLike) -> Path:
    """將陣列寫成 TensorContainer。

    Args:
        path: 輸出路徑
        array: 任意形狀的數值陣列，會轉為 float32

    Returns:
        寫入的檔案路徑
    """
    target = Path(path)
    data = np.ascontiguousarray(np.asarray(array), dtype=_DTYPE)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open('wb') as fh:
        fh.write(_format_header(tuple(data.shape)))
        fh.write(data.tobytes(order='C'))
    logger.debug('TensorContainer 已寫入', extra={'path': str(target), 'shape': data.shape})
    return target


def read_tensor(path: str | Path, *, mmap: bool = False) -> npt.NDArray[np.float32]:
    """讀取 TensorContainer。

    Args:
        path: 檔案路徑
        mmap: 是否以唯讀 memory-map 方式開啟（大型資料集用）

    Returns:
        float32 陣列

    Raises:
        ContainerFormatError: magic 或長度不符
        FileNotFoundError: 檔案不存在
    """
    source = Path(path)
    shape, offset = _read_header(source)
    if mmap and math.prod(shape) > 0:
        return np.memmap(source, dtype=_DTYPE, mode='r', offset=offset, shape=shape)
    with source.open('rb') as fh:
        fh.seek(offset)
        payload = fh.read()
    return np.frombuffer(payload, dtype=_DTYPE).reshape(shape).astype(np.float32)


class ContainerWriter:
    """串流寫入器：先寫入完整形狀的 header，再逐筆附加第一軸的紀錄。

    用於全尺寸資料集，避免整個堆疊放進記憶體。
    關閉時若寫入筆數與 header 宣告不符則拋出例外。
    """

    def __init__(self, path: str | Path, shape: tuple[int, ...]) -> None:
        if not shape:
            raise ContainerFormatError('串流寫入需要至少一個維度')
        self.path = Path(path)
        self.shape = shape
        self._written = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open('wb')
        self._fh.write(_format_header(shape))

    def append(self, record: npt.ArrayLike) -> None:
        """附加一筆紀錄（形狀需等於 shape[1:]）。"""
        data = np.ascontiguousarray(np.asarray(record), dtype=_DTYPE)
        if data.shape != self.shape[1:]:
            raise ContainerFormatError(f'紀錄形狀 {data.shape} 與宣告的 {self.shape[1:]} 不符')
        if self._written >= self.shape[0]:
            raise ContainerFormatError(f'紀錄數超過宣告的 {self.shape[0]} 筆: {self.path}')
        self._fh.write(data.tobytes(order='C'))
        self._written += 1

    def close(self) -> None:
        """關閉檔案；筆數與宣告不符時刪除不完整的檔案並拋出例外。"""
        self._fh.close()
        if self._written != self.shape[0]:
            self.path.unlink(missing_ok=True)
            raise ContainerFormatError(
                f'僅寫入 {self._written} 筆，宣告為 {self.shape[0]} 筆: {self.path}'
            )

    def __enter__(self) -> ContainerWriter:
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        if exc_type is not None:
            # 不留下檔頭宣告完整形狀、內容卻被截斷的檔案
            self._fh.close()
            self.path.unlink(missing_ok=True)
            return
        self.close()


def file_sha256(path: str | Path) -> str:
    """計算檔案的 SHA256。"""
    digest = hashlib.sha256()
    with Path(path).open('rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def json_sha256(data: Any) -> str:
    """以排序後的 JSON 文字計算雜湊。"""
    text = json.dumps(data, ensure_ascii=False, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()
