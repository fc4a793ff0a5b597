"""
Experiment recipes shared by the management commands: building datasets and
models from a RunConfig, training with artifact output, the native and
truncation baselines and the objective ablation.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .analysis import FrontierRow, FrontierTable, frontier_sweep
from .data_io import (
    Dataset,
    RunLogWriter,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    config_digest,
    synth_train_test,
    write_frontier_csv,
)
from .exceptions import ConfigurationError
from .forms import RunConfig
from .layers import Activation, Model, build_mlp, model_flops
from .training import AblationMode, TrainConfig, TrainResult, UncertaintyParams, evaluate, train

logger = logging.getLogger(__name__)

# Independent random streams derived from the run seed.
INIT_STREAM = 1


def init_rng(seed: int, offset: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, INIT_STREAM, offset]))


def build_datasets(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """(train, test); a file source without test_path evaluates on its train split."""
    source = config.dataset
    if source['kind'] == 'synthetic':
        return synth_train_test(
            config.seed,
            source['num_classes'],
            source['dim'],
            source['train_per_class'],
            source['test_per_class'],
            source['separation'],
        )
    train_set = load_dataset(source['train_path'], source['format'], split='train')
    if not source.get('test_path'):
        return train_set, train_set
    test_set = load_dataset(source['test_path'], source['format'], num_classes=train_set.num_classes, split='test')
    if test_set.dim != train_set.dim:
        raise ConfigurationError(f'train has {train_set.dim} features, test has {test_set.dim}')
    return train_set, test_set


def build_model(config: RunConfig, dataset: Dataset, max_rank: Optional[int] = None, kind: Optional[str] = None,
                offset: int = 0) -> Tuple[Model, Optional[UncertaintyParams]]:
    """A fresh MLP, or the model stored at ``model.init_checkpoint``."""
    spec = config.model
    if spec.get('init_checkpoint') and max_rank is None and kind is None:
        checkpoint = load_checkpoint(spec['init_checkpoint'])
        logger.info('starting from checkpoint %s', spec['init_checkpoint'])
        return checkpoint.model, checkpoint.uncertainty
    dims = [dataset.dim] + list(spec['hidden_dims']) + [dataset.num_classes]
    model = build_mlp(
        init_rng(config.seed, offset),
        dims,
        kind=kind or spec['layer_kind'],
        max_rank=max_rank or spec['max_rank'],
        activation=Activation(spec['activation']),
    )
    return model, None


def train_config(config: RunConfig, model: Model, **overrides) -> TrainConfig:
    """TrainConfig from the training section; the anchor defaults to the model's max rank."""
    section = dict(config.training)
    anchor = section.pop('anchor_rank', None) or model.max_rank or 1
    values = {
        'epochs': section['epochs'],
        'batch_size': section['batch_size'],
        'learning_rate': section['learning_rate'],
        'momentum': section['momentum'],
        'seed': config.seed,
        'mode': section['mode'],
        'use_uncertainty': section['use_uncertainty'],
        'anchor_rank': anchor,
        'rank_pool': tuple(section['rank_pool']),
        'eval_ranks': tuple(section['eval_ranks']) or None,
        'interpolated_eval_ranks': tuple(section['interpolated_eval_ranks']),
        'reg_weight': section['reg_weight'],
        'curriculum': section['curriculum'],
        'schedule': section.get('schedule'),
    }
    if not model.nsn_indices():
        # Rank is meaningless for an all-dense model: plain CE at a nominal rank 1.
        values.update(
            mode=AblationMode.CE_ONLY,
            use_uncertainty=False,
            anchor_rank=1,
            rank_pool=(),
            eval_ranks=(1,),
            interpolated_eval_ranks=(),
        )
    values.update(overrides)
    return TrainConfig(**values)


@dataclass
class TrainingRun:
    result: TrainResult
    config: TrainConfig
    train_set: Dataset
    test_set: Dataset
    frontier: FrontierTable


def run_training(config: RunConfig, out_dir: Optional[Path] = None, **overrides) -> TrainingRun:
    """
    Train per the config, evaluating on the test split. With ``out_dir`` the
    run writes model.nsnckpt, runlog.jsonl (flushed per epoch) and frontier.csv.
    """
    train_set, test_set = build_datasets(config)
    model, uncertainty = build_model(config, train_set)
    tc = train_config(config, model, **overrides)

    writer = RunLogWriter(Path(out_dir) / 'runlog.jsonl') if out_dir is not None else None

    def on_epoch(records):
        if writer is not None:
            writer.write(records)
            writer.flush()

    try:
        result = train(model, train_set, tc, eval_dataset=test_set, uncertainty=uncertainty, on_epoch=on_epoch)
    finally:
        if writer is not None:
            writer.close()

    ranks = set(tc.eval_ranks) | set(tc.interpolated_eval_ranks)
    if result.model.max_rank:
        ranks = {r for r in ranks if r <= result.model.max_rank}
    frontier = frontier_sweep(result.model, test_set, sorted(ranks), result.uncertainty)

    if out_dir is not None:
        out_dir = Path(out_dir)
        meta = {
            'seed': config.seed,
            'config_digest': config_digest(config.document),
            'mode': tc.mode.value,
            'anchor_rank': tc.anchor_rank,
        }
        save_checkpoint(result.model, result.uncertainty, meta, out_dir / 'model.nsnckpt')
        write_frontier_csv(frontier, out_dir / 'frontier.csv')
    return TrainingRun(result, tc, train_set, test_set, frontier)


def _baseline_epochs(config: RunConfig) -> int:
    epochs = config.baseline.get('epochs')
    return config.training['epochs'] if epochs is None else epochs


def native_frontier(config: RunConfig) -> FrontierTable:
    """One specialist per rank: every layer has inner dimension r and trains at r alone."""
    train_set, test_set = build_datasets(config)
    rows = []
    for offset, r in enumerate(sorted(set(config.baseline['ranks']))):
        model, _ = build_model(config, train_set, max_rank=r, kind='nsn', offset=offset)
        tc = train_config(
            config, model,
            epochs=_baseline_epochs(config),
            mode=AblationMode.CE_ONLY,
            use_uncertainty=False,
            anchor_rank=r,
            rank_pool=(),
            eval_ranks=(r,),
            interpolated_eval_ranks=(),
        )
        result = train(model, train_set, tc, eval_dataset=test_set)
        ev = evaluate(result.model, test_set, r)
        rows.append(FrontierRow(r, model_flops(result.model, r), ev.loss, ev.accuracy))
        logger.info('native rank %d: accuracy %.4f', r, ev.accuracy)
    return FrontierTable(rows)


def truncation_frontier(config: RunConfig) -> FrontierTable:
    """One model trained with plain CE at its max rank, then evaluated truncated to each rank."""
    train_set, test_set = build_datasets(config)
    model, _ = build_model(config, train_set, kind='nsn')
    tc = train_config(
        config, model,
        epochs=_baseline_epochs(config),
        mode=AblationMode.CE_ONLY,
        use_uncertainty=False,
        anchor_rank=model.max_rank,
        rank_pool=(),
        eval_ranks=(model.max_rank,),
        interpolated_eval_ranks=(),
    )
    result = train(model, train_set, tc, eval_dataset=test_set)
    ranks = [r for r in config.baseline['ranks'] if r <= model.max_rank]
    return frontier_sweep(result.model, test_set, ranks)


@dataclass(frozen=True)
class AblationRun:
    mode: str
    seed: int
    highest: float
    avg_id: float
    avg_ood: float


@dataclass(frozen=True)
class AblationRow:
    mode: str
    runs: int
    highest_mean: float
    highest_std: float
    avg_id_mean: float
    avg_id_std: float
    avg_ood_mean: float
    avg_ood_std: float


def ablation_table(config: RunConfig) -> Tuple[List[AblationRow], List[AblationRun]]:
    """Final-epoch Table-style metrics per mode, mean and population std over seeds."""
    runs = []
    for mode in config.ablation['modes']:
        for seed in config.ablation['seeds']:
            seeded = RunConfig(**{**config.__dict__, 'seed': seed, 'document': {**config.document, 'seed': seed}})
            run = run_training(seeded, mode=AblationMode(mode))
            summary = run.result.metrics.summary(run.config)
            runs.append(AblationRun(mode, seed, summary.highest, summary.avg_id, summary.avg_ood))
            logger.info('%s seed %d: highest %.4f, ID %.4f, OOD %.4f', mode, seed, *summary)

    rows = []
    for mode in config.ablation['modes']:
        mine = [run for run in runs if run.mode == mode]
        stats = {}
        for metric in ('highest', 'avg_id', 'avg_ood'):
            values = np.array([getattr(run, metric) for run in mine])
            stats[f'{metric}_mean'] = float(np.mean(values))
            stats[f'{metric}_std'] = float(np.std(values))
        rows.append(AblationRow(mode, len(mine), **stats))
    return rows, runs
