"""執行紀錄（RunManifest）。

每個產生輸出的指令在輸出目錄寫下一份 run_manifest.json；
除 started_at / finished_at 外，相同輸入的重跑內容完全相同。
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from tomo_core import __version__
from tomo_core.types import RunManifest

logger = logging.getLogger(__name__)

UTC = timezone.utc

RUN_MANIFEST_NAME = 'run_manifest.json'
TIMESTAMP_KEYS = ('started_at', 'finished_at')


def _now() -> str:
    return datetime.now(UTC).isoformat(timespec='seconds')


def _display(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix() if path.is_relative_to(root) else str(path)


@dataclass
class RunRecorder:
    """記錄一次指令執行。

    Attributes:
        command: 子指令名稱
        config: 完整解析後的配置
        dataset_hash: 資料集雜湊
        outputs: 已產生的輸出路徑
    """

    command: str
    config: dict[str, Any]
    dataset_hash: str = ''
    outputs: list[Path] = field(default_factory=lambda: [])
    started_at: str = field(default_factory=_now)

    def add_output(self, path: str | Path) -> None:
        self.outputs.append(Path(path))

    def finish(self, out_dir: str | Path) -> Path:
        """寫入 run_manifest.json 並回傳路徑。"""
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        outputs = sorted({_display(p, root) for p in self.outputs})
        manifest: RunManifest = {
            'command': self.command,
            'config': self.config,
            'dataset_hash': self.dataset_hash,
            'code_version': __version__,
            'started_at': self.started_at,
            'finished_at': _now(),
            'outputs': outputs,
        }
        target = root / RUN_MANIFEST_NAME
        target.write_text(
            json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True) + '\n',
            encoding='utf-8',
        )
        logger.info('執行紀錄已寫入', extra={'command': self.command, 'path': str(target)})
        return target


def without_timestamps(manifest: dict[str, Any]) -> dict[str, Any]:
    """去除時間戳記，供重現性比對。"""
    return {k: v for k, v in manifest.items() if k not in TIMESTAMP_KEYS}
