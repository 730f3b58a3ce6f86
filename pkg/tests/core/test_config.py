"""配置系統測試模組。

涵蓋：
- Rule: 配置應有桌面規模的預設值
- Rule: 各任務應解析出正確的遮罩與凍結預設值
- Rule: 不合法的配置應拋出 ConfigError 並標明欄位
- Rule: 執行環境配置應可從環境變數讀取
"""

from __future__ import annotations

import os
from unittest.mock import patch

import allure
import pytest

from tomo_core.config import (
    DEFAULT_IMAGE_SIDE,
    DEFAULT_TRAIN_DOSE,
    ModelConfig,
    PhantomConfig,
    RuntimeConfig,
    TrainConfig,
)
from tomo_core.exceptions import ConfigError

_approx = pytest.approx  # type: ignore[reportUnknownMemberType]


@allure.feature('配置系統')
@allure.story('配置應有桌面規模的預設值')
class TestDefaults:
    """測試預設配置。"""

    @allure.title('假體配置預設 64×64、1–5 個形狀')
    def test_phantom_defaults(self) -> None:
        config = PhantomConfig()
        assert config.image_side == DEFAULT_IMAGE_SIDE == 64
        assert (config.shapes_min, config.shapes_max) == (1, 5)
        config.validate()

    @allure.title('全尺寸模型：256 bins、180 角度、16 頭')
    def test_full_scale(self) -> None:
        config = ModelConfig.full_scale('image_patch_decoder')
        assert config.token_dim == 256
        assert config.max_angles == 180
        assert config.n_heads == 16
        assert config.patch_side == 16
        assert config.n_patches == 256
        config.validate()

    @allure.title('image_side 等於 token_dim')
    def test_image_side_is_token_dim(self) -> None:
        config = ModelConfig(token_dim=32, patch_side=8)
        assert config.image_side == 32
        assert config.patches_per_side == 4


@allure.feature('配置系統')
@allure.story('各任務應解析出正確的遮罩與凍結預設值')
class TestTaskDefaults:
    """測試 TrainConfig 的任務預設值解析。"""

    @allure.title('MSM 預設隨機遮罩 80%')
    def test_msm_defaults(self) -> None:
        config = TrainConfig(task='msm')
        assert config.resolved_mask_ratio == _approx(0.8)
        assert config.resolved_mask_scheme == 'random'
        assert config.resolved_freeze_encoder is False

    @allure.title('SV-Tx 預設均勻遮罩')
    def test_svtx_uniform(self) -> None:
        assert TrainConfig(task='svtx').resolved_mask_scheme == 'uniform'

    @allure.title('Dn-Tx 不遮罩，劑量預設 0.5%')
    def test_dntx_no_mask(self) -> None:
        config = TrainConfig(task='dntx', mask_ratio=0.5)
        assert config.resolved_mask_ratio == 0.0
        assert config.dose_fraction == _approx(DEFAULT_TRAIN_DOSE)

    @allure.title('C-Tx 預設凍結 encoder')
    def test_ctx_freezes(self) -> None:
        assert TrainConfig(task='ctx').resolved_freeze_encoder is True
        assert TrainConfig(task='ctx', freeze_encoder=False).resolved_freeze_encoder is False

    @allure.title('to_dict 帶有解析後的預設值，from_dict 忽略之')
    def test_dict_roundtrip(self) -> None:
        config = TrainConfig(task='svtx', epochs=3, seed=7)
        data = config.to_dict()
        assert data['resolved']['mask_scheme'] == 'uniform'
        assert data['resolved']['optimizer']['name'] == 'adam'
        assert TrainConfig.from_dict(data) == config


@allure.feature('配置系統')
@allure.story('不合法的配置應拋出 ConfigError 並標明欄位')
class TestValidation:
    """測試 validate()。"""

    @pytest.mark.parametrize('side', [0, 7, 48, 100])
    @allure.title('影像邊長必須是 ≥ 8 的 2 的冪次')
    def test_bad_image_side(self, side: int) -> None:
        with pytest.raises(ConfigError) as info:
            PhantomConfig(image_side=side).validate()
        assert info.value.field == 'image_side'

    @allure.title('shapes_min 大於 shapes_max')
    def test_bad_shape_counts(self) -> None:
        with pytest.raises(ConfigError) as info:
            PhantomConfig(shapes_min=4, shapes_max=2).validate()
        assert info.value.field == 'shapes_min'

    @allure.title('d_model 必須能被 n_heads 整除')
    def test_heads_must_divide(self) -> None:
        with pytest.raises(ConfigError) as info:
            ModelConfig(d_model=30, n_heads=4).validate()
        assert info.value.field == 'n_heads'

    @allure.title('patch 邊長必須整除影像邊長')
    def test_patch_must_divide(self) -> None:
        with pytest.raises(ConfigError) as info:
            ModelConfig(token_dim=64, patch_side=6, head_kind='image_patch_decoder').validate()
        assert info.value.field == 'patch_side'

    @allure.title('遮罩比例需落在 [0, 1)')
    def test_mask_ratio_range(self) -> None:
        with pytest.raises(ConfigError) as info:
            TrainConfig(task='msm', mask_ratio=1.0).validate()
        assert info.value.field == 'mask_ratio'

    @allure.title('凍結 encoder 卻沒有 base checkpoint')
    def test_freeze_without_base(self) -> None:
        with pytest.raises(ConfigError) as info:
            TrainConfig(task='ctx').validate()
        assert info.value.field == 'base_checkpoint'
        assert '--base' in str(info.value)

    @allure.title('MSM 預訓練不得帶 base checkpoint')
    def test_msm_with_base(self) -> None:
        with pytest.raises(ConfigError):
            TrainConfig(task='msm', base_checkpoint='ckpt').validate()

    @allure.title('未知的遮罩方式')
    def test_unknown_scheme(self) -> None:
        with pytest.raises(ConfigError) as info:
            TrainConfig(task='svtx', mask_scheme='spiral').validate()
        assert info.value.field == 'mask_scheme'


@allure.feature('配置系統')
@allure.story('執行環境配置應可從環境變數讀取')
class TestRuntimeConfig:
    """測試 RuntimeConfig。"""

    @allure.title('日誌等級從環境變數讀取並轉為大寫')
    def test_log_level_from_env(self) -> None:
        with patch.dict(os.environ, {'TOMOTX_LOG_LEVEL': 'debug'}):
            assert RuntimeConfig().get_log_level() == 'DEBUG'

    @allure.title('明確指定的日誌等級優先')
    def test_explicit_log_level(self) -> None:
        with patch.dict(os.environ, {'TOMOTX_LOG_LEVEL': 'debug'}):
            assert RuntimeConfig(log_level='warning').get_log_level() == 'WARNING'

    @allure.title('執行緒數從環境變數讀取')
    def test_workers_from_env(self) -> None:
        with patch.dict(os.environ, {'TOMOTX_WORKERS': '3'}):
            assert RuntimeConfig().get_workers() == 3

    @allure.title('非整數的 TOMOTX_WORKERS 應拋出 ConfigError')
    def test_bad_workers_env(self) -> None:
        with patch.dict(os.environ, {'TOMOTX_WORKERS': 'many'}):
            with pytest.raises(ConfigError):
                RuntimeConfig().get_workers()

    @allure.title('執行緒數必須 ≥ 1')
    def test_zero_workers(self) -> None:
        with pytest.raises(ConfigError):
            RuntimeConfig(workers=0).get_workers()
