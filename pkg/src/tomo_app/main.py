"""tomotx 命令列入口。

子指令：
- gen-data：生成假體與 sinogram 資料集
- train：MSM 預訓練與 SV-Tx / Dn-Tx / C-Tx 下游訓練
- infer：以 checkpoint 修補、去雜訊或直接重建
- eval：遮罩比例或劑量掃描，輸出 SSIM / PSNR 表與三聯圖
- compare：C-Tx 凍結 encoder 微調與從頭訓練的收斂比較

結束碼：0 成功、2 使用或配置錯誤、3 I/O 錯誤、4 數值錯誤。
"""

from __future__ import annotations

import argparse
import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any, cast

import numpy as np
import numpy.typing as npt
from dotenv import load_dotenv

from tomo_core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from tomo_core.config import (
    DEFAULT_IMAGE_SIDE,
    DEFAULT_INCIDENT_FLUX,
    DEFAULT_N_ANGLES,
    DEFAULT_TRAIN_DOSE,
    HeadKind,
    ModelConfig,
    PhantomConfig,
    RuntimeConfig,
    TaskName,
    TrainConfig,
)
from tomo_core.container import read_tensor, write_tensor
from tomo_core.ctgeom import (
    FILTERS,
    AngleGrid,
    FilterName,
    MaskedSinogram,
    MaskScheme,
    MaskSpec,
    Sinogram,
    apply_mask,
    fbp,
)
from tomo_core.exceptions import ConfigError, ContractError, NumericError, TomoTxError
from tomo_core.manifest import RunRecorder
from tomo_core.methods import DEFAULT_METHODS, build_registry
from tomo_core.metrics import EvalSet, SweepConfig, SweepKind, sweep
from tomo_core.model.msm import extract_attention
from tomo_core.phantom import Dataset, dataset_hash, generate_dataset, load_dataset
from tomo_core.preview import write_pgm, write_triptych
from tomo_core.trainer import (
    TrainResult,
    compare_convergence,
    finetune_ctx,
    pretrain_msm,
    train_dntx,
    train_svtx,
)

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

TASKS: tuple[str, ...] = ('msm', 'svtx', 'dntx', 'ctx')
HEAD_FOR_TASK: dict[str, HeadKind] = {
    'msm': 'sino_decoder',
    'svtx': 'sino_decoder',
    'dntx': 'sino_decoder',
    'ctx': 'image_patch_decoder',
}


# =============================================================================
# Parser
# =============================================================================


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f'無法解析條件值: {text!r}') from exc


def _parse_names(text: str) -> list[str]:
    return [name.strip() for name in text.split(',') if name.strip()]


def _parse_ckpt(text: str) -> tuple[str, str]:
    task, sep, path = text.partition('=')
    if not sep or task not in TASKS:
        raise argparse.ArgumentTypeError(f'格式需為 TASK=PATH（TASK ∈ {", ".join(TASKS)}）: {text}')
    return task, path


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    defaults = ModelConfig()
    group = parser.add_argument_group('模型架構')
    group.add_argument('--d-model', type=int, default=defaults.d_model, help='token 維度')
    group.add_argument('--heads', type=int, default=defaults.n_heads, help='注意力頭數')
    group.add_argument('--enc-layers', type=int, default=defaults.n_enc_layers, help='encoder 層數')
    group.add_argument('--dec-layers', type=int, default=defaults.n_dec_layers, help='decoder 層數')
    group.add_argument('--d-ff', type=int, default=defaults.d_ff, help='前饋層寬度')
    group.add_argument('--patch-side', type=int, default=defaults.patch_side, help='patch 邊長')


def _add_train_args(parser: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    group = parser.add_argument_group('訓練')
    group.add_argument('--data', required=True, help='資料集目錄')
    group.add_argument('--epochs', type=int, default=defaults.epochs, help='epoch 數')
    group.add_argument('--batch-size', type=int, default=defaults.batch_size, help='批次大小')
    group.add_argument('--lr', type=float, default=defaults.lr, help='Adam 學習率')
    group.add_argument('--mask-ratio', type=float, default=None, help='遮罩比例（預設依任務）')
    group.add_argument(
        '--mask-scheme', choices=('random', 'uniform', 'wedge'), default=None, help='遮罩方式'
    )
    group.add_argument('--dose', type=float, default=DEFAULT_TRAIN_DOSE, help='Dn-Tx 劑量比例')
    group.add_argument(
        '--incident-flux', type=float, default=DEFAULT_INCIDENT_FLUX, help='入射光子數 I_0'
    )
    group.add_argument(
        '--val-fraction', type=float, default=defaults.val_fraction, help='驗證集比例'
    )
    group.add_argument('--seed', type=int, default=defaults.seed, help='隨機種子')
    group.add_argument(
        '--freeze-encoder',
        action=argparse.BooleanOptionalAction,
        default=None,
        help='凍結 encoder（C-Tx 預設凍結）',
    )
    group.add_argument('--no-prefetch', action='store_true', help='不在背景執行緒預先組裝批次')
    group.add_argument('--out', required=True, help='輸出目錄')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='tomotx', description='Masked Sinogram Model 工具組')
    parser.add_argument('--log-level', default=None, help='日誌等級（預設讀取 TOMOTX_LOG_LEVEL）')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-data', help='生成假體與 sinogram 資料集')
    gen.add_argument('--side', type=int, default=DEFAULT_IMAGE_SIDE, help='影像邊長')
    gen.add_argument('--angles', type=int, default=DEFAULT_N_ANGLES, help='0–180° 間的角度數')
    gen.add_argument('--n-train', type=int, default=2000, help='訓練樣本數')
    gen.add_argument('--n-eval', type=int, default=200, help='保留評估樣本數')
    gen.add_argument('--seed', type=int, default=0, help='隨機種子')
    gen.add_argument('--workers', type=int, default=None, help='執行緒數')
    gen.add_argument('--out', required=True, help='輸出目錄')

    train = sub.add_parser('train', help='訓練 MSM 或下游任務')
    train.add_argument('--task', choices=TASKS, required=True, help='任務')
    train.add_argument('--base', default=None, help='預訓練 MSM checkpoint')
    _add_train_args(train)
    _add_model_args(train)

    infer = sub.add_parser('infer', help='以 checkpoint 推論')
    infer.add_argument('--task', choices=TASKS, required=True, help='任務')
    infer.add_argument('--ckpt', required=True, help='checkpoint 目錄')
    infer.add_argument('--input', required=True, help='輸入 sinogram（TensorContainer）')
    infer.add_argument('--reference', default=None, help='參考 sinogram 或影像（三聯圖第三欄）')
    infer.add_argument('--mask-ratio', type=float, default=None, help='先對輸入套用遮罩')
    infer.add_argument(
        '--mask-scheme', choices=('random', 'uniform', 'wedge'), default='random', help='遮罩方式'
    )
    infer.add_argument('--seed', type=int, default=0, help='遮罩種子')
    infer.add_argument('--filter', choices=FILTERS, default='ramlak', help='FBP 濾波器')
    infer.add_argument(
        '--export-attention',
        nargs=2,
        metavar=('L', 'H'),
        default=None,
        help='輸出 decoder 第 L 層第 H 頭（或 all）的注意力圖',
    )
    infer.add_argument('--out', required=True, help='輸出目錄')

    ev = sub.add_parser('eval', help='遮罩比例或劑量掃描')
    ev.add_argument(
        '--ckpt', type=_parse_ckpt, action='append', default=[], help='TASK=PATH，可重複'
    )
    ev.add_argument('--data', required=True, help='資料集目錄')
    ev.add_argument('--sweep', choices=('mask', 'dose'), required=True, help='掃描種類')
    ev.add_argument('--values', type=_parse_values, required=True, help='逗號分隔的條件值')
    ev.add_argument(
        '--methods', type=_parse_names, default=list(DEFAULT_METHODS), help='逗號分隔的方法名稱'
    )
    ev.add_argument(
        '--scheme', choices=('random', 'uniform', 'wedge'), default='uniform', help='遮罩方式'
    )
    ev.add_argument('--filter', choices=FILTERS, default='ramlak', help='FBP 濾波器')
    ev.add_argument('--incident-flux', type=float, default=DEFAULT_INCIDENT_FLUX)
    ev.add_argument('--limit', type=int, default=None, help='只評估前 N 筆')
    ev.add_argument('--examples', type=int, default=2, help='每格輸出幾張三聯圖')
    ev.add_argument('--seed', type=int, default=0, help='退化種子')
    ev.add_argument('--workers', type=int, default=None, help='樣本層級執行緒數')
    ev.add_argument(
        '--allow-dataset-mismatch', action='store_true', help='允許 checkpoint 與資料集雜湊不符'
    )
    ev.add_argument('--out', required=True, help='輸出目錄')

    cmp_ = sub.add_parser('compare', help='C-Tx 微調與從頭訓練的收斂比較')
    cmp_.add_argument('--base', required=True, help='預訓練 MSM checkpoint')
    _add_train_args(cmp_)
    _add_model_args(cmp_)
    return parser


# =============================================================================
# Helpers
# =============================================================================


def _train_config(args: argparse.Namespace, task: str, base: str | None) -> TrainConfig:
    return TrainConfig(
        task=cast(TaskName, task),
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        mask_ratio=args.mask_ratio,
        mask_scheme=args.mask_scheme,
        dose_fraction=args.dose,
        incident_flux=args.incident_flux,
        val_fraction=args.val_fraction,
        seed=args.seed,
        freeze_encoder=args.freeze_encoder,
        base_checkpoint=base,
        prefetch=not args.no_prefetch,
    )


def _model_config(
    args: argparse.Namespace, task: str, dataset: Dataset, base: Checkpoint | None
) -> ModelConfig:
    """模型配置：有 base 時 encoder 相關欄位沿用 base。"""
    config = ModelConfig(
        token_dim=dataset.image_side,
        d_model=args.d_model,
        n_heads=args.heads,
        n_enc_layers=args.enc_layers,
        n_dec_layers=args.dec_layers,
        d_ff=args.d_ff,
        max_angles=dataset.grid.n_angles,
        head_kind=HEAD_FOR_TASK[task],
        patch_side=args.patch_side,
    )
    if base is not None:
        b = base.model_config
        config = replace(
            config,
            token_dim=b.token_dim,
            d_model=b.d_model,
            n_heads=b.n_heads,
            n_enc_layers=b.n_enc_layers,
            d_ff=b.d_ff,
            max_angles=b.max_angles,
        )
    return config


def _write_train_outputs(result: TrainResult, out: Path, recorder: RunRecorder) -> None:
    recorder.add_output(save_checkpoint(result.checkpoint, out / 'checkpoint'))
    recorder.add_output(result.log.write_csv(out / 'convergence.csv'))
    recorder.add_output(result.log.write_timing_csv(out / 'timing.csv'))


def _visible_rows(values: npt.NDArray[np.float64]) -> npt.NDArray[np.int64]:
    return np.flatnonzero(np.any(values != 0.0, axis=1)).astype(np.int64)


# =============================================================================
# Commands
# =============================================================================


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = PhantomConfig(image_side=args.side, seed=args.seed)
    grid = AngleGrid(n_angles=args.angles)
    workers = RuntimeConfig(workers=args.workers).get_workers()
    out = Path(args.out)
    recorder = RunRecorder(
        'gen-data',
        {
            'phantom_config': config.to_dict(),
            'angle_grid': grid.to_dict(),
            'n_train': args.n_train,
            'n_eval': args.n_eval,
        },
    )
    manifest = generate_dataset(config, args.n_train, args.n_eval, out, grid=grid, workers=workers)
    recorder.dataset_hash = dataset_hash(manifest)
    for name in manifest['files']:
        recorder.add_output(out / f'{name}.tt')
    recorder.add_output(out / 'manifest.json')
    recorder.finish(out)
    return EXIT_OK


def _run_task(
    task: str,
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    base: Checkpoint | None,
) -> TrainResult:
    dispatch: dict[str, Callable[[], TrainResult]] = {
        'msm': lambda: pretrain_msm(dataset, model_config, train_config),
        'svtx': lambda: train_svtx(dataset, model_config, train_config, base),
        'dntx': lambda: train_dntx(dataset, model_config, train_config, base),
        'ctx': lambda: finetune_ctx(dataset, base, model_config, train_config),
    }
    return dispatch[task]()


def cmd_train(args: argparse.Namespace) -> int:
    train_config = _train_config(args, args.task, args.base)
    train_config.validate()
    dataset = load_dataset(args.data)
    base = load_checkpoint(args.base, dataset.dataset_hash) if args.base else None
    model_config = _model_config(args, args.task, dataset, base)
    out = Path(args.out)
    recorder = RunRecorder(
        'train',
        {
            'model_config': model_config.to_dict(),
            'train_config': train_config.to_dict(),
            'scale': dataset.scale,
            'physical_scale': dataset.physical_scale,
        },
        dataset_hash=dataset.dataset_hash,
    )
    result = _run_task(args.task, dataset, model_config, train_config, base)
    _write_train_outputs(result, out, recorder)
    recorder.finish(out)
    logger.info(
        '訓練完成',
        extra={'best_epoch': result.checkpoint.epoch, 'best_val': result.checkpoint.best_val_loss},
    )
    return EXIT_OK


def _load_input(args: argparse.Namespace, checkpoint: Checkpoint) -> MaskedSinogram:
    values = read_tensor(args.input).astype(np.float64)
    if values.ndim != 2:
        raise ContractError(f'輸入 sinogram 必須是二維，收到形狀 {values.shape}')
    sino = Sinogram(AngleGrid(n_angles=values.shape[0]), values)
    if checkpoint.task == 'dntx':
        return MaskedSinogram(sino, np.arange(values.shape[0], dtype=np.int64))
    if args.mask_ratio is not None:
        scheme = cast(MaskScheme, args.mask_scheme)
        return apply_mask(sino, MaskSpec(scheme, args.mask_ratio, args.seed))
    kept = _visible_rows(values)
    if kept.size == 0:
        raise ContractError('輸入 sinogram 沒有任何非零列')
    return MaskedSinogram(sino, kept)


def cmd_infer(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    if checkpoint.task != args.task:
        raise ContractError(f'checkpoint 任務為 {checkpoint.task}，與 --task {args.task} 不符')
    masked = _load_input(args, checkpoint)
    model = checkpoint.build_model()
    out = Path(args.out)
    recorder = RunRecorder(
        'infer',
        {
            'task': args.task,
            'ckpt': str(args.ckpt),
            'input': str(args.input),
            'mask_ratio': args.mask_ratio,
            'mask_scheme': args.mask_scheme,
            'seed': args.seed,
            'filter': args.filter,
            'kept_indices': masked.kept_indices.tolist(),
        },
        dataset_hash=checkpoint.dataset_hash,
    )
    reference = read_tensor(args.reference).astype(np.float64) if args.reference else None
    filter_name = cast(FilterName, args.filter)
    degraded = masked.sinogram.values
    if checkpoint.model_config.head_kind == 'sino_decoder':
        prediction = model.predict(masked, checkpoint.scale)
        image = fbp(Sinogram(masked.sinogram.grid, prediction), filter_name)
        recorder.add_output(write_tensor(out / 'prediction.tt', prediction))
        recorder.add_output(write_pgm(out / 'prediction.pgm', prediction))
        panels = [degraded, prediction] + ([reference] if reference is not None else [])
        recorder.add_output(write_triptych(out / 'sinogram_triptych.pgm', panels))
    else:
        image = model.predict(masked, checkpoint.scale)
        panels = [fbp(masked.sinogram, filter_name), image]
        if reference is not None:
            panels.append(reference)
        recorder.add_output(write_triptych(out / 'image_triptych.pgm', panels))
    recorder.add_output(write_tensor(out / 'reconstruction.tt', image))
    recorder.add_output(write_pgm(out / 'reconstruction.pgm', image))

    if args.export_attention is not None:
        layer_text, head_text = args.export_attention
        try:
            layer = int(layer_text)
            heads = (
                list(range(checkpoint.model_config.n_heads))
                if head_text == 'all'
                else [int(head_text)]
            )
        except ValueError as exc:
            raise ConfigError('export_attention', f'L 需為整數、H 需為整數或 all: {exc}') from exc
        for head in heads:
            attention = extract_attention(model, masked, layer, head, checkpoint.scale)
            path = out / 'attention' / f'layer{layer}_head{head}.pgm'
            recorder.add_output(write_pgm(path, attention.weights))
    recorder.finish(out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = SweepConfig(
        kind=cast(SweepKind, args.sweep),
        values=tuple(args.values),
        scheme=cast(MaskScheme, args.scheme),
        incident_flux=args.incident_flux,
        seed=args.seed,
        n_examples=args.examples,
        workers=RuntimeConfig(workers=args.workers).get_workers(),
    )
    config.validate()
    dataset = load_dataset(args.data)
    expected = None if args.allow_dataset_mismatch else dataset.dataset_hash
    checkpoints: dict[str, Checkpoint] = {}
    for task, path in args.ckpt:
        if not Path(path).exists():
            logger.warning('checkpoint 不存在，略過', extra={'task': task, 'path': path})
            continue
        checkpoints[task] = load_checkpoint(path, expected)
    registry = build_registry(checkpoints, cast(FilterName, args.filter))
    methods = registry.select(args.methods)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recorder = RunRecorder(
        'eval',
        {
            'sweep': args.sweep,
            'values': list(config.values),
            'methods': list(methods),
            'scheme': args.scheme,
            'filter': args.filter,
            'incident_flux': args.incident_flux,
            'limit': args.limit,
            'seed': args.seed,
            'checkpoints': {t: c.dataset_hash for t, c in checkpoints.items()},
        },
        dataset_hash=dataset.dataset_hash,
    )
    result = sweep(EvalSet.from_dataset(dataset, args.limit), methods, config)
    recorder.add_output(result.ssim_table.write_csv(out / 'sweep_ssim.csv'))
    recorder.add_output(result.psnr_table.write_csv(out / 'sweep_psnr.csv'))
    recorder.add_output(result.write_reports_csv(out / 'quality_reports.csv'))
    for (method, condition), examples in sorted(result.examples.items()):
        for ex in examples:
            name = f'{method.replace("+", "_")}_{condition:g}_{ex.sample}.pgm'
            panels = [ex.degraded, ex.output, ex.truth]
            recorder.add_output(write_triptych(out / 'triptychs' / name, panels))
    recorder.finish(out)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    train_config = _train_config(args, 'ctx', args.base)
    dataset = load_dataset(args.data)
    base = load_checkpoint(args.base, dataset.dataset_hash)
    model_config = _model_config(args, 'ctx', dataset, base)
    out = Path(args.out)
    recorder = RunRecorder(
        'compare',
        {'model_config': model_config.to_dict(), 'train_config': train_config.to_dict()},
        dataset_hash=dataset.dataset_hash,
    )
    report = compare_convergence(dataset, base, model_config, train_config)
    _write_train_outputs(report.finetune, out / 'finetune', recorder)
    _write_train_outputs(report.retrain, out / 'retrain', recorder)
    recorder.add_output(report.write_csv(out / 'convergence_compare.csv'))
    summary: dict[str, Any] = {
        'epochs': report.epochs,
        'crossing_epoch': report.crossing_epoch,
        'crossing_fraction': report.crossing_fraction,
        'retrain_final_val_loss': report.retrain.log.records[-1].val_loss,
        'finetune_wall_time_s': report.finetune.log.total_wall_time,
        'retrain_wall_time_s': report.retrain.log.total_wall_time,
    }
    report_path = out / 'convergence_report.json'
    report_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    recorder.add_output(report_path)
    recorder.finish(out)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'infer': cmd_infer,
    'eval': cmd_eval,
    'compare': cmd_compare,
}


def main(argv: Sequence[str] | None = None) -> int:
    """CLI 入口，回傳結束碼。"""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=RuntimeConfig(log_level=args.log_level).get_log_level(),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        logger.error('數值錯誤: %s', exc)
        return EXIT_NUMERIC
    except OSError as exc:
        logger.error('I/O 錯誤: %s', exc)
        return EXIT_IO
    except TomoTxError as exc:
        logger.error('%s', exc)
        return EXIT_USAGE


if __name__ == '__main__':
    raise SystemExit(main())
