"""
Evaluation protocols: plain few-shot, base-to-new and cross-dataset, plus
aggregation over seeds.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .data import FewShotDataset, sample_few_shot
from .exceptions import DataError
from .model import PromptedClip
from .training import Metrics, TrainConfig, evaluate, train


logger = logging.getLogger(__name__)

CROSS_DATASET_EPOCHS = 2


def base_to_new_split(num_classes: int) -> Tuple[List[int], List[int]]:
    """
    Classes sorted by id: the first ⌊C/2⌋ are base, the rest new.
    """
    half = num_classes // 2
    return list(range(half)), list(range(half, num_classes))


def plain_protocol(
        model: PromptedClip,
        dataset: FewShotDataset,
        config: TrainConfig,
) -> Dict[str, Any]:
    """
    Train on `shots` examples per class, test on the remaining ones.
    """
    train_set = sample_few_shot(dataset, config.shots, config.seed)
    result = train(model, train_set, config)
    test = evaluate(model, dataset.without(train_set), config.batch_size_eval)

    return {
        'train_acc': result.metrics.accuracy,
        'test_acc': test.accuracy,
        'train': result.metrics,
        'test': test,
    }


def base_to_new_protocol(
        model: PromptedClip,
        dataset: FewShotDataset,
        config: TrainConfig,
) -> Dict[str, Any]:
    """
    Train on few shots of the base half of the classes; evaluate held-out
    base examples and all new-class examples, each against its own split's
    class weights only.

    :return: `base_acc`, `new_acc`, `train_acc` and the underlying metrics
    """
    if dataset.num_classes < 4:
        raise DataError(
            'Base-to-new needs at least 4 classes, got {}.'.format(dataset.num_classes),
        )
    base_ids, new_ids = base_to_new_split(dataset.num_classes)
    base = dataset.select_classes(base_ids, 'base')
    new = dataset.select_classes(new_ids, 'new')

    train_set = sample_few_shot(base, config.shots, config.seed)
    result = train(model, train_set, config)
    base_metrics = evaluate(model, base.without(train_set), config.batch_size_eval)
    new_metrics = evaluate(model, new, config.batch_size_eval)
    logger.info(
        'base-to-new: base %.4f, new %.4f',
        base_metrics.accuracy,
        new_metrics.accuracy,
    )

    return {
        'base_acc': base_metrics.accuracy,
        'new_acc': new_metrics.accuracy,
        'train_acc': result.metrics.accuracy,
        'train': result.metrics,
        'base': base_metrics,
        'new': new_metrics,
    }


def evaluate_many(
        model: PromptedClip,
        datasets: Sequence[FewShotDataset],
        batch_size: int = 100,
        workers: int = 1,
) -> List[Metrics]:
    """
    Evaluate several datasets, optionally in parallel with one model copy per
    worker; results follow the order of `datasets`.
    """
    if workers <= 1 or len(datasets) <= 1:
        return [evaluate(model, dataset, batch_size) for dataset in datasets]

    def job(dataset: FewShotDataset) -> Metrics:
        return evaluate(model.copy(), dataset, batch_size)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, datasets))


def cross_dataset_protocol(
        model: PromptedClip,
        train_dataset: FewShotDataset,
        eval_datasets: Sequence[FewShotDataset],
        config: TrainConfig,
        workers: int = 1,
) -> Dict[str, Any]:
    """
    Train once on `train_dataset`, then evaluate every dataset with its own
    class names and no further tuning.

    :return: `train_acc`, one `<name>_acc` per evaluated dataset and the
        underlying metrics
    """
    for dataset in eval_datasets:
        if dataset.geometry != train_dataset.geometry:
            raise DataError(
                'Dataset `{}` has images of {} but training used {}.'.format(
                    dataset.name,
                    dataset.geometry,
                    train_dataset.geometry,
                ),
            )

    train_set = sample_few_shot(train_dataset, config.shots, config.seed)
    result = train(
        model, train_set, config, epochs=config.epochs_or(CROSS_DATASET_EPOCHS),
    )
    evaluations = evaluate_many(model, eval_datasets, config.batch_size_eval, workers)

    outcome: Dict[str, Any] = {'train_acc': result.metrics.accuracy}
    for dataset, metrics in zip(eval_datasets, evaluations):
        outcome['{}_acc'.format(dataset.name)] = metrics.accuracy
    outcome['train'] = result.metrics
    outcome['evaluations'] = dict(
        (dataset.name, metrics) for dataset, metrics in zip(eval_datasets, evaluations)
    )

    return outcome


def scores(outcome: Mapping[str, Any]) -> Dict[str, float]:
    """
    :return: the scalar `*_acc` entries of a protocol outcome
    """
    return {
        key: float(value)
        for key, value in outcome.items()
        if key.endswith('_acc')
    }


def metrics_of(outcome: Mapping[str, Any]) -> Dict[str, Any]:
    """
    :return: the `Metrics` entries of a protocol outcome as documents,
        nested mappings of metrics kept nested
    """
    found: Dict[str, Any] = {}
    for key, value in outcome.items():
        if isinstance(value, Metrics):
            found[key] = value.to_dict()
        elif isinstance(value, Mapping):
            nested = metrics_of(value)
            if nested:
                found[key] = nested

    return found


def summarize(runs: Sequence[Mapping[str, float]]) -> Dict[str, Dict[str, float]]:
    """
    Mean and population standard deviation of every score across runs.
    """
    keys = list(runs[0]) if runs else []
    table = {key: np.array([run[key] for run in runs]) for key in keys}

    return {
        'mean': {key: float(values.mean()) for key, values in table.items()},
        'std': {key: float(values.std()) for key, values in table.items()},
    }


def repeat_over_seeds(
        run: Callable[[int], Mapping[str, Any]],
        seeds: Sequence[int],
) -> Dict[str, Any]:
    """
    :param run: protocol run for one seed
    :param seeds: seeds in report order
    :return: per-seed scores and metrics plus the mean and std of the scores
    """
    per_seed, table = [], []
    for seed in seeds:
        logger.info('Running seed %d.', seed)
        outcome = run(seed)
        table.append(scores(outcome))
        per_seed.append(dict(seed=seed, **table[-1], metrics=metrics_of(outcome)))
    summary = summarize(table)

    return {'runs': per_seed, **summary}
