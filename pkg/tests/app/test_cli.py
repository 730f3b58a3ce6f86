"""tomotx 命令列測試模組。

涵蓋：
- Rule: 各子指令在極小配置下產生預期的輸出檔
- Rule: 相同輸入重跑，輸出位元組相同（時間戳記與 timing.csv 除外）
- Rule: 錯誤依類別對應到結束碼
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import allure
import numpy as np
import pytest

from tomo_app.main import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, main
from tomo_core.checkpoint import load_checkpoint
from tomo_core.container import write_tensor
from tomo_core.manifest import RUN_MANIFEST_NAME, without_timestamps
from tomo_core.phantom import load_dataset
from tomo_core.preview import read_pgm

MODEL_ARGS = [
    '--d-model',
    '16',
    '--heads',
    '2',
    '--enc-layers',
    '1',
    '--dec-layers',
    '1',
    '--d-ff',
    '32',
    '--patch-side',
    '4',
]
TRAIN_ARGS = ['--epochs', '2', '--batch-size', '4', '--val-fraction', '0.25', '--lr', '0.01']


def _gen(out: Path) -> int:
    return main(
        [
            'gen-data',
            '--side',
            '16',
            '--angles',
            '12',
            '--n-train',
            '12',
            '--n-eval',
            '3',
            '--out',
            str(out),
        ]
    )


def _train(data: Path, out: Path, task: str, *extra: str) -> int:
    return main(
        ['train', '--task', task, '--data', str(data), '--out', str(out)]
        + TRAIN_ARGS
        + MODEL_ARGS
        + list(extra)
    )


def _run_manifest(out: Path) -> dict[str, object]:
    return json.loads((out / RUN_MANIFEST_NAME).read_text(encoding='utf-8'))


@pytest.fixture(scope='module')
def workspace(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """生成資料集並預訓練一個極小的 MSM。"""
    root = tmp_path_factory.mktemp('cli')
    assert _gen(root / 'data') == EXIT_OK
    assert _train(root / 'data', root / 'msm', 'msm') == EXIT_OK
    dataset = load_dataset(root / 'data')
    write_tensor(root / 'input.tt', np.asarray(dataset.eval_sinograms[0]))
    write_tensor(root / 'truth.tt', np.asarray(dataset.eval_phantoms[0]))
    return root


# =============================================================================
# Rule: 各子指令在極小配置下產生預期的輸出檔
# =============================================================================


@allure.feature('命令列')
@allure.story('各子指令在極小配置下產生預期的輸出檔')
class TestCommands:
    """端到端執行各子指令。"""

    @allure.title('gen-data 寫出資料集與執行紀錄')
    def test_gen_data(self, workspace: Path) -> None:
        data = workspace / 'data'
        for name in ('train_phantoms', 'train_sinograms', 'eval_phantoms', 'eval_sinograms'):
            assert (data / f'{name}.tt').exists()
        manifest = _run_manifest(data)
        assert manifest['command'] == 'gen-data'
        assert manifest['dataset_hash'] == load_dataset(data).dataset_hash
        assert 'manifest.json' in manifest['outputs']  # type: ignore[reportOperatorIssue]

    @allure.title('train 寫出 checkpoint、收斂曲線與計時')
    def test_train(self, workspace: Path) -> None:
        out = workspace / 'msm'
        checkpoint = load_checkpoint(out / 'checkpoint')
        assert checkpoint.task == 'msm'
        assert checkpoint.model_config.d_model == 16
        lines = (out / 'convergence.csv').read_text(encoding='utf-8').splitlines()
        assert lines[0] == 'epoch,train_loss,val_loss'
        assert len(lines) == 3
        assert (out / 'timing.csv').exists()
        assert _run_manifest(out)['command'] == 'train'

    @allure.title('C-Tx 以 --base 微調，encoder 與 MSM 相同')
    def test_train_ctx(self, workspace: Path) -> None:
        base = workspace / 'msm' / 'checkpoint'
        out = workspace / 'ctx'
        assert _train(workspace / 'data', out, 'ctx', '--base', str(base)) == EXIT_OK
        ctx = load_checkpoint(out / 'checkpoint')
        assert ctx.model_config.head_kind == 'image_patch_decoder'
        assert ctx.encoder_hash() == load_checkpoint(base).encoder_hash()

    @allure.title('infer 修補遮罩後的 sinogram 並輸出注意力圖')
    def test_infer_sino(self, workspace: Path) -> None:
        out = workspace / 'infer_msm'
        code = main(
            [
                'infer',
                '--task',
                'msm',
                '--ckpt',
                str(workspace / 'msm' / 'checkpoint'),
                '--input',
                str(workspace / 'input.tt'),
                '--mask-ratio',
                '0.5',
                '--mask-scheme',
                'uniform',
                '--export-attention',
                '0',
                'all',
                '--out',
                str(out),
            ]
        )
        assert code == EXIT_OK
        for name in ('prediction.tt', 'reconstruction.tt', 'sinogram_triptych.pgm'):
            assert (out / name).exists()
        for head in (0, 1):
            assert read_pgm(out / 'attention' / f'layer0_head{head}.pgm').shape == (12, 12)
        manifest = _run_manifest(out)
        config: dict[str, object] = manifest['config']  # type: ignore[reportAssignmentType]
        assert config['kept_indices'] == [0, 2, 4, 6, 8, 10]

    @allure.title('infer 以 C-Tx 直接重建影像')
    def test_infer_ctx(self, workspace: Path) -> None:
        if not (workspace / 'ctx' / 'checkpoint').exists():
            _train(
                workspace / 'data',
                workspace / 'ctx',
                'ctx',
                '--base',
                str(workspace / 'msm' / 'checkpoint'),
            )
        out = workspace / 'infer_ctx'
        code = main(
            [
                'infer',
                '--task',
                'ctx',
                '--ckpt',
                str(workspace / 'ctx' / 'checkpoint'),
                '--input',
                str(workspace / 'input.tt'),
                '--mask-ratio',
                '0.5',
                '--reference',
                str(workspace / 'truth.tt'),
                '--out',
                str(out),
            ]
        )
        assert code == EXIT_OK
        pixels = read_pgm(out / 'image_triptych.pgm')
        assert pixels.shape[0] == 16
        assert (out / 'reconstruction.pgm').exists()

    @allure.title('eval 輸出 SSIM / PSNR 表、逐樣本紀錄與三聯圖')
    def test_eval(self, workspace: Path) -> None:
        out = workspace / 'eval'
        code = main(
            [
                'eval',
                '--ckpt',
                f'msm={workspace / "msm" / "checkpoint"}',
                '--data',
                str(workspace / 'data'),
                '--sweep',
                'mask',
                '--values',
                '0.25,0.5',
                '--methods',
                'iradon,msm+iradon,ctx',
                '--examples',
                '1',
                '--out',
                str(out),
            ]
        )
        assert code == EXIT_OK
        lines = (out / 'sweep_ssim.csv').read_text(encoding='utf-8').splitlines()
        assert lines[0] == 'method,0.25,0.5'
        assert [line.split(',')[0] for line in lines[1:]] == ['iradon', 'msm+iradon']
        assert (out / 'sweep_psnr.csv').exists()
        assert (out / 'quality_reports.csv').exists()
        assert (out / 'triptychs' / 'msm_iradon_0.5_0.pgm').exists()

    @allure.title('缺少的 checkpoint 只記錄警告並略過該列')
    def test_eval_missing_ckpt(self, workspace: Path) -> None:
        out = workspace / 'eval_missing'
        code = main(
            [
                'eval',
                '--ckpt',
                f'svtx={workspace / "nowhere"}',
                '--data',
                str(workspace / 'data'),
                '--sweep',
                'dose',
                '--values',
                '1.0,0.1',
                '--examples',
                '0',
                '--out',
                str(out),
            ]
        )
        assert code == EXIT_OK
        lines = (out / 'sweep_ssim.csv').read_text(encoding='utf-8').splitlines()
        assert [line.split(',')[0] for line in lines[1:]] == ['iradon']

    @allure.title('compare 輸出兩條收斂曲線與摘要')
    def test_compare(self, workspace: Path) -> None:
        out = workspace / 'compare'
        code = main(
            [
                'compare',
                '--base',
                str(workspace / 'msm' / 'checkpoint'),
                '--data',
                str(workspace / 'data'),
                '--out',
                str(out),
            ]
            + TRAIN_ARGS
            + MODEL_ARGS
        )
        assert code == EXIT_OK
        assert (out / 'finetune' / 'checkpoint' / 'manifest.json').exists()
        assert (out / 'retrain' / 'convergence.csv').exists()
        summary = json.loads((out / 'convergence_report.json').read_text(encoding='utf-8'))
        assert summary['epochs'] == 2
        header = (out / 'convergence_compare.csv').read_text(encoding='utf-8').splitlines()[0]
        assert header == 'epoch,finetune_val_loss,retrain_val_loss'


# =============================================================================
# Rule: 相同輸入重跑，輸出位元組相同（時間戳記與 timing.csv 除外）
# =============================================================================


@allure.feature('命令列')
@allure.story('相同輸入重跑，輸出位元組相同')
class TestReproducibility:
    """重跑比對。"""

    @allure.title('gen-data 重跑的檔案與執行紀錄相同')
    def test_gen_data_rerun(self, workspace: Path) -> None:
        again = workspace / 'data_again'
        assert _gen(again) == EXIT_OK
        for name in ('train_sinograms.tt', 'eval_phantoms.tt', 'manifest.json'):
            assert (again / name).read_bytes() == (workspace / 'data' / name).read_bytes()
        assert without_timestamps(_run_manifest(again)) == without_timestamps(
            _run_manifest(workspace / 'data')
        )

    @allure.title('train 重跑的收斂曲線與參數相同')
    def test_train_rerun(self, workspace: Path) -> None:
        again = workspace / 'msm_again'
        assert _train(workspace / 'data', again, 'msm') == EXIT_OK
        first = workspace / 'msm'
        assert (again / 'convergence.csv').read_bytes() == (first / 'convergence.csv').read_bytes()
        a = load_checkpoint(first / 'checkpoint')
        b = load_checkpoint(again / 'checkpoint')
        for name, value in a.state.items():
            np.testing.assert_array_equal(value, b.state[name])

    @allure.title('eval 重跑的 CSV 相同')
    def test_eval_rerun(self, workspace: Path) -> None:
        argv = [
            'eval',
            '--data',
            str(workspace / 'data'),
            '--sweep',
            'mask',
            '--values',
            '0.3,0.6',
            '--scheme',
            'random',
            '--methods',
            'iradon,zerofill',
        ]
        assert main([*argv, '--out', str(workspace / 'eval_a')]) == EXIT_OK
        assert main([*argv, '--out', str(workspace / 'eval_b'), '--workers', '2']) == EXIT_OK
        for name in ('sweep_ssim.csv', 'sweep_psnr.csv', 'quality_reports.csv'):
            a = (workspace / 'eval_a' / name).read_bytes()
            assert a == (workspace / 'eval_b' / name).read_bytes()


# =============================================================================
# Rule: 錯誤依類別對應到結束碼
# =============================================================================


@allure.feature('命令列')
@allure.story('錯誤依類別對應到結束碼')
class TestExitCodes:
    """錯誤處理。"""

    @allure.title('C-Tx 凍結 encoder 卻未提供 --base：結束碼 2')
    def test_missing_base(self, workspace: Path) -> None:
        assert _train(workspace / 'data', workspace / 'bad_ctx', 'ctx') == EXIT_USAGE

    @allure.title('checkpoint 任務與 --task 不符：結束碼 2')
    def test_task_mismatch(self, workspace: Path) -> None:
        code = main(
            [
                'infer',
                '--task',
                'svtx',
                '--ckpt',
                str(workspace / 'msm' / 'checkpoint'),
                '--input',
                str(workspace / 'input.tt'),
                '--out',
                str(workspace / 'bad_infer'),
            ]
        )
        assert code == EXIT_USAGE

    @allure.title('掃描條件超出範圍：結束碼 2')
    def test_bad_sweep_value(self, workspace: Path) -> None:
        code = main(
            [
                'eval',
                '--data',
                str(workspace / 'data'),
                '--sweep',
                'mask',
                '--values',
                '1.5',
                '--out',
                str(workspace / 'bad_eval'),
            ]
        )
        assert code == EXIT_USAGE

    @allure.title('無法解析的參數由 argparse 以結束碼 2 退出')
    def test_unparsable(self) -> None:
        with pytest.raises(SystemExit) as exc_info:
            build_parser().parse_args(['eval', '--data', 'x', '--sweep', 'mask', '--values', 'a,b'])
        assert exc_info.value.code == EXIT_USAGE

    @allure.title('資料集不存在：結束碼 3')
    def test_missing_dataset(self, tmp_path: Path) -> None:
        code = main(
            ['eval', '--data', str(tmp_path / 'none'), '--sweep', 'mask', '--values', '0.5']
            + ['--out', str(tmp_path / 'out')]
        )
        assert code == EXIT_IO

    @allure.title('checkpoint manifest 不是合法的 JSON：結束碼 2')
    def test_malformed_manifest(self, workspace: Path, tmp_path: Path) -> None:
        ckpt = tmp_path / 'checkpoint'
        shutil.copytree(workspace / 'msm' / 'checkpoint', ckpt)
        (ckpt / 'manifest.json').write_text('{"format": ', encoding='utf-8')
        code = main(
            [
                'infer',
                '--task',
                'msm',
                '--ckpt',
                str(ckpt),
                '--input',
                str(workspace / 'input.tt'),
                '--out',
                str(tmp_path / 'out'),
            ]
        )
        assert code == EXIT_USAGE

    @allure.title('TensorContainer 格式錯誤：結束碼 3')
    def test_bad_container(self, workspace: Path, tmp_path: Path) -> None:
        broken = tmp_path / 'broken.tt'
        broken.write_bytes(b'NOTATENSOR\n')
        code = main(
            [
                'infer',
                '--task',
                'msm',
                '--ckpt',
                str(workspace / 'msm' / 'checkpoint'),
                '--input',
                str(broken),
                '--out',
                str(tmp_path / 'out'),
            ]
        )
        assert code == EXIT_IO

    @allure.title('輸入含 NaN：結束碼 4')
    def test_nan_input(self, workspace: Path, tmp_path: Path) -> None:
        values = np.ones((12, 16))
        values[3, 4] = np.nan
        write_tensor(tmp_path / 'nan.tt', values)
        code = main(
            [
                'infer',
                '--task',
                'msm',
                '--ckpt',
                str(workspace / 'msm' / 'checkpoint'),
                '--input',
                str(tmp_path / 'nan.tt'),
                '--out',
                str(tmp_path / 'out'),
            ]
        )
        assert code == EXIT_NUMERIC

    @allure.title('資料集檔案遭竄改：結束碼 2')
    def test_tampered_dataset(self, workspace: Path, tmp_path: Path) -> None:
        data = tmp_path / 'data'
        assert _gen(data) == EXIT_OK
        write_tensor(data / 'eval_phantoms.tt', np.zeros((3, 16, 16)))
        code = main(
            ['eval', '--data', str(data), '--sweep', 'mask', '--values', '0.5']
            + ['--out', str(tmp_path / 'out')]
        )
        assert code == EXIT_USAGE
