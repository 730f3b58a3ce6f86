"""全域測試設定。"""

from __future__ import annotations

from pathlib import Path

import pytest
from dotenv import load_dotenv

from tomo_core.config import ModelConfig, PhantomConfig
from tomo_core.ctgeom import AngleGrid
from tomo_core.phantom import Dataset, generate_dataset, load_dataset

# 載入 .env，確保測試時也能讀取 TOMOTX_* 環境變數
load_dotenv()

TINY_SIDE = 16
TINY_ANGLES = 12


def pytest_addoption(parser: pytest.Parser) -> None:
    """新增自訂命令列參數。"""
    parser.addoption(
        '--run-slow',
        action='store_true',
        default=False,
        help='執行桌面規模的訓練趨勢測試（耗時數分鐘）',
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    """根據命令列參數決定是否跳過 slow test。"""
    if config.getoption('--run-slow'):
        return

    skip_slow = pytest.mark.skip(reason='需要加 --run-slow 才會執行')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def tiny_model_config(head_kind: str = 'sino_decoder') -> ModelConfig:
    """單元測試用的極小模型。"""
    return ModelConfig(
        token_dim=TINY_SIDE,
        d_model=16,
        n_heads=2,
        n_enc_layers=1,
        n_dec_layers=1,
        d_ff=32,
        max_angles=TINY_ANGLES,
        head_kind='image_patch_decoder' if head_kind == 'image_patch_decoder' else 'sino_decoder',
        patch_side=4,
    )


@pytest.fixture(scope='session')
def tiny_dataset_path(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """16×16、12 個角度、12 筆訓練 / 4 筆評估的資料集。"""
    path = tmp_path_factory.mktemp('tiny_dataset')
    generate_dataset(
        PhantomConfig(image_side=TINY_SIDE, seed=0),
        n_train=12,
        n_eval=4,
        output_path=path,
        grid=AngleGrid(n_angles=TINY_ANGLES),
    )
    return path


@pytest.fixture
def tiny_dataset(tiny_dataset_path: Path) -> Dataset:
    return load_dataset(tiny_dataset_path)


@pytest.fixture
def sino_config() -> ModelConfig:
    return tiny_model_config('sino_decoder')


@pytest.fixture
def ctx_config() -> ModelConfig:
    return tiny_model_config('image_patch_decoder')
