"""影像品質指標與掃描評估測試模組。

涵蓋：
- Rule: SSIM / PSNR 應符合定義並與參考實作一致
- Rule: 掃描對所有方法使用相同的退化輸入
- Rule: 失敗樣本只影響所在的格子
"""

from __future__ import annotations

import math
from pathlib import Path

import allure
import numpy as np
import pytest
from skimage.metrics import (  # type: ignore[reportMissingTypeStubs]
    peak_signal_noise_ratio,  # type: ignore[reportUnknownVariableType]
    structural_similarity,  # type: ignore[reportUnknownVariableType]
)

from tomo_core.ctgeom import MaskedSinogram
from tomo_core.exceptions import ConfigError, ContractError, NumericError, ShapeError
from tomo_core.methods import iradon_method, zerofill_method
from tomo_core.metrics import (
    PSNR_CAP,
    EvalSet,
    FloatArray,
    QualityReport,
    ReconMethod,
    SweepConfig,
    mean_ssim,
    normalize_pair,
    psnr,
    ssim,
    sweep,
)
from tomo_core.phantom import Dataset

_approx = pytest.approx  # type: ignore[reportUnknownMemberType]


def _images(seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(32, 32))
    b = np.clip(a + rng.normal(0.0, 0.1, size=(32, 32)), 0.0, 1.0)
    return a, b


# =============================================================================
# Rule: SSIM / PSNR 應符合定義並與參考實作一致
# =============================================================================


@allure.feature('品質指標')
@allure.story('SSIM / PSNR 應符合定義並與參考實作一致')
class TestMetrics:
    """測試 SSIM 與 PSNR。"""

    @allure.title('相同影像 SSIM = 1、PSNR 為上限')
    def test_identity(self) -> None:
        a, _ = _images()
        assert ssim(a, a) == _approx(1.0, abs=1e-9)
        assert psnr(a, a) == PSNR_CAP

    @allure.title('MSE 0.01 為 20 dB、MSE 1 為 0 dB')
    def test_psnr_offset(self) -> None:
        a = np.full((16, 16), 0.3)
        assert psnr(a, a + 0.1) == _approx(20.0)
        assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == _approx(0.0)

    @allure.title('SSIM 對稱')
    def test_symmetry(self) -> None:
        a, b = _images(1)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    @allure.title('與 scikit-image 的高斯窗 SSIM 一致')
    def test_matches_skimage(self) -> None:
        a, b = _images(2)
        reference = structural_similarity(  # type: ignore[reportUnknownVariableType]
            a,
            b,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
        )
        assert ssim(a, b) == _approx(float(reference), abs=1e-3)  # type: ignore[reportArgumentType]

    @allure.title('左黑右白影像與其反相的 SSIM < 0.1')
    def test_inverted_halves(self) -> None:
        x = np.zeros((32, 32))
        x[:, 16:] = 1.0
        reference = structural_similarity(  # type: ignore[reportUnknownVariableType]
            x,
            1.0 - x,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
        )
        assert ssim(x, 1.0 - x) < 0.1
        assert float(reference) < 0.1  # type: ignore[reportArgumentType]

    @allure.title('與 scikit-image 的 PSNR 一致')
    def test_psnr_matches_skimage(self) -> None:
        a, b = _images(3)
        reference = peak_signal_noise_ratio(  # type: ignore[reportUnknownVariableType]
            a, b, data_range=1.0
        )
        assert psnr(a, b) == _approx(float(reference))  # type: ignore[reportArgumentType]

    @allure.title('雜訊越大 SSIM 越低')
    def test_monotone_in_noise(self) -> None:
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(32, 32))
        scores = [ssim(a, a + rng.normal(0.0, s, size=a.shape)) for s in (0.01, 0.1, 0.5)]
        assert scores[0] > scores[1] > scores[2]

    @allure.title('形狀不同應拋出 ShapeError，過小影像應拋出 ContractError')
    def test_errors(self) -> None:
        with pytest.raises(ShapeError):
            ssim(np.zeros((16, 16)), np.zeros((16, 15)))
        with pytest.raises(ShapeError):
            psnr(np.zeros(4), np.zeros(5))
        with pytest.raises(ContractError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    @allure.title('以真值範圍正規化並截斷重建')
    def test_normalize_pair(self) -> None:
        recon, truth = normalize_pair([[-1.0, 0.5], [2.0, 1.0]], [[0.0, 0.5], [1.0, 2.0]])
        np.testing.assert_allclose(truth, [[0.0, 0.25], [0.5, 1.0]])
        np.testing.assert_allclose(recon, [[0.0, 0.25], [1.0, 0.5]])
        _, flat = normalize_pair(np.ones((2, 2)), np.full((2, 2), 3.0))
        assert not flat.any()

    @allure.title('mean_ssim 為逐對 SSIM 的平均')
    def test_mean_ssim(self) -> None:
        a, b = _images(5)
        expected = (ssim(*normalize_pair(b, a)) + 1.0) / 2
        assert mean_ssim([b, a], [a, a]) == _approx(expected)

    @allure.title('QualityReport 的平均略過失敗樣本')
    def test_report_skips_nan(self) -> None:
        report = QualityReport('m', 0.5, ssim=[0.5, math.nan, 0.7], psnr=[10.0, math.nan, 20.0])
        report.errors.append((1, 'boom'))
        assert report.mean_ssim == _approx(0.6)
        assert report.mean_psnr == _approx(15.0)
        assert not report.ok
        assert math.isnan(QualityReport('m', 0.5).mean_ssim)


# =============================================================================
# Rule: 掃描對所有方法使用相同的退化輸入
# =============================================================================


@allure.feature('品質指標')
@allure.story('掃描對所有方法使用相同的退化輸入')
class TestSweep:
    """在極小資料集上測試掃描評估。"""

    @allure.title('每個 (方法, 條件) 都有一格，CSV 以 6 位小數輸出')
    def test_tables(self, tiny_dataset: Dataset, tmp_path: Path) -> None:
        eval_set = EvalSet.from_dataset(tiny_dataset)
        methods = {'iradon': iradon_method(), 'zerofill': zerofill_method()}
        result = sweep(eval_set, methods, SweepConfig(values=(0.25, 0.5)))
        assert set(result.ssim_table.cells) == {
            (m, c) for m in methods for c in (0.25, 0.5)
        }
        assert len(result.reports) == 4
        assert all(r.n_samples == 4 for r in result.reports)
        lines = result.ssim_table.write_csv(tmp_path / 'ssim.csv').read_text('utf-8').splitlines()
        assert lines[0] == 'method,0.25,0.5'
        assert lines[1].startswith('iradon,')
        assert all(len(cell.split('.')[1]) == 6 for cell in lines[1].split(',')[1:])

    @allure.title('同一 (條件, 樣本) 的退化輸入對所有方法相同')
    def test_shared_degradation(self, tiny_dataset: Dataset) -> None:
        seen: dict[str, list[list[int]]] = {'a': [], 'b': []}

        def recorder(tag: str) -> ReconMethod:
            def run(masked: MaskedSinogram) -> FloatArray:
                seen[tag].append(masked.kept_indices.tolist())
                return np.zeros((16, 16))

            return run

        config = SweepConfig(values=(0.5,), scheme='random', seed=3)
        sweep(EvalSet.from_dataset(tiny_dataset), {'a': recorder('a'), 'b': recorder('b')}, config)
        assert seen['a'] == seen['b']
        assert len({tuple(k) for k in seen['a']}) > 1

    @allure.title('多執行緒與單執行緒結果相同')
    def test_workers(self, tiny_dataset: Dataset) -> None:
        eval_set = EvalSet.from_dataset(tiny_dataset)
        methods = {'iradon': iradon_method()}
        single = sweep(eval_set, methods, SweepConfig(values=(0.3, 0.6), scheme='random'))
        multi = sweep(eval_set, methods, SweepConfig(values=(0.3, 0.6), scheme='random', workers=3))
        assert single.ssim_table.cells == multi.ssim_table.cells

    @allure.title('遮罩比例越高，iradon 的 SSIM 越低')
    def test_iradon_degrades_with_mask(self, tiny_dataset: Dataset) -> None:
        result = sweep(
            EvalSet.from_dataset(tiny_dataset),
            {'iradon': iradon_method()},
            SweepConfig(values=(0.1, 0.8)),
        )
        low, high = result.ssim_table.row('iradon')
        assert low is not None and high is not None
        assert low > high

    @allure.title('劑量越低，iradon 的 SSIM 越低')
    def test_iradon_degrades_with_dose(self, tiny_dataset: Dataset) -> None:
        result = sweep(
            EvalSet.from_dataset(tiny_dataset),
            {'iradon': iradon_method()},
            SweepConfig(kind='dose', values=(1.0, 0.01)),
        )
        full, low = result.ssim_table.row('iradon')
        assert full is not None and low is not None
        assert full > low

    @allure.title('保留指定數量的三聯圖範例')
    def test_examples(self, tiny_dataset: Dataset) -> None:
        result = sweep(
            EvalSet.from_dataset(tiny_dataset),
            {'iradon': iradon_method()},
            SweepConfig(values=(0.5,), n_examples=2),
        )
        examples = result.examples[('iradon', 0.5)]
        assert [e.sample for e in examples] == [0, 1]
        assert examples[0].output.shape == examples[0].truth.shape == (16, 16)

    @allure.title('limit 只取前幾筆評估樣本')
    def test_limit(self, tiny_dataset: Dataset) -> None:
        assert len(EvalSet.from_dataset(tiny_dataset, limit=2)) == 2

    @pytest.mark.parametrize(
        'config',
        [
            SweepConfig(values=()),
            SweepConfig(values=(1.0,)),
            SweepConfig(kind='dose', values=(0.0,)),
        ],
    )
    @allure.title('條件值不合法應拋出 ConfigError')
    def test_bad_values(self, config: SweepConfig, tiny_dataset: Dataset) -> None:
        with pytest.raises(ConfigError) as exc_info:
            sweep(EvalSet.from_dataset(tiny_dataset), {'iradon': iradon_method()}, config)
        assert exc_info.value.field == 'values'


# =============================================================================
# Rule: 失敗樣本只影響所在的格子
# =============================================================================


@allure.feature('品質指標')
@allure.story('失敗樣本只影響所在的格子')
class TestFailures:
    """測試方法失敗時的處理。"""

    @allure.title('拋出例外的方法該格為空，其餘方法正常')
    def test_failing_method(self, tiny_dataset: Dataset, tmp_path: Path) -> None:
        def broken(masked: MaskedSinogram) -> np.ndarray:
            raise NumericError('發散')

        result = sweep(
            EvalSet.from_dataset(tiny_dataset),
            {'iradon': iradon_method(), 'broken': broken},
            SweepConfig(values=(0.5,)),
        )
        assert result.ssim_table.cells[('broken', 0.5)] is None
        assert result.ssim_table.cells[('iradon', 0.5)] is not None
        lines = result.psnr_table.write_csv(tmp_path / 'psnr.csv').read_text('utf-8').splitlines()
        assert lines[2] == 'broken,'
        report = next(r for r in result.reports if r.method == 'broken')
        assert len(report.errors) == 4
        assert report.errors[0][1].startswith('NumericError')

    @allure.title('輸出形狀錯誤記錄為失敗樣本')
    def test_wrong_shape(self, tiny_dataset: Dataset, tmp_path: Path) -> None:
        def tiny(masked: MaskedSinogram) -> np.ndarray:
            return np.zeros((4, 4))

        eval_set = EvalSet.from_dataset(tiny_dataset)
        result = sweep(eval_set, {'tiny': tiny}, SweepConfig(values=(0.5,)))
        assert result.ssim_table.cells[('tiny', 0.5)] is None
        rows = result.write_reports_csv(tmp_path / 'reports.csv').read_text('utf-8').splitlines()
        assert rows[0] == 'method,condition,sample,ssim,psnr,error'
        assert rows[1].startswith('tiny,0.5,0,,,')
