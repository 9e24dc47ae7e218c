"""
Experiment configuration and the runs behind the command-line commands.
"""
import datetime
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional

import numpy as np

from . import __version__
from .data import FewShotDataset, load_dataset, make_synthetic_dataset
from .documents import load_document
from .exceptions import ConfigError, ContractError, ModPromptError
from .head import cross_entropy_loss, encode_images, encode_texts, predict_probs
from .model import ModelConfig, PromptedClip
from .prompts import ContextProfile, PromptSchedule, context_length_profile
from .protocols import (
    base_to_new_protocol,
    cross_dataset_protocol,
    plain_protocol,
    repeat_over_seeds,
)
from .tensor import finite_diff_check
from .training import TrainConfig


logger = logging.getLogger(__name__)

PROTOCOLS = ('base_to_new', 'cross_dataset', 'plain')
TIMING_FIELDS = ('created', 'wall_time')


def default_datasets() -> Dict[str, Any]:
    return {
        'train': {
            'synthetic': {
                'num_classes': 8,
                'per_class': 32,
                'image_noise': 0.1,
                'seed': 0,
            },
        },
        'eval': [],
    }


def default_schedules() -> Dict[str, Any]:
    return {'mpl': {'kind': 'mpl', 'add': 2, 'remove': 1, 'depth': 2}}


@dataclass
class GradcheckConfig:
    """
    Settings of the gradient check. The temperature keeps the softmax out of
    saturation so that every coordinate has a measurable gradient.
    """
    temperature: float = 1.0
    eps: float = 1e-5
    tolerance: float = 1e-4
    batch: int = 2
    num_classes: int = 3
    max_parameters: int = 8192
    seed: int = 0

    def validate(self):
        for name in ('batch', 'num_classes', 'max_parameters', 'seed'):
            _integer(getattr(self, name))
        if not (self.temperature > 0 and self.eps > 0 and self.tolerance > 0):
            raise ConfigError('`temperature`, `eps` and `tolerance` must be positive.')
        if self.batch < 1 or self.num_classes < 2:
            raise ConfigError('`batch` must be at least 1 and `num_classes` at least 2.')


@dataclass
class ExperimentConfig:
    """
    Everything `run` and `gradcheck` need, as read from a YAML document.
    """
    model: ModelConfig = field(default_factory=ModelConfig)
    schedules: Dict[str, Any] = field(default_factory=default_schedules)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: str = 'base_to_new'
    datasets: Dict[str, Any] = field(default_factory=default_datasets)
    seeds: List[int] = field(default_factory=lambda: [0])
    output: Optional[str] = None
    workers: int = 1
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def validate(self):
        """
        :raise: ConfigError naming the offending field
        """
        _with_field('model', self.model.validate)
        _with_field('train', self.train.validate)
        _with_field('gradcheck', self.gradcheck.validate)
        if self.protocol not in PROTOCOLS:
            raise ConfigError(
                '`protocol`: `{}` is not one of {}.'.format(self.protocol, list(PROTOCOLS)),
            )
        if not isinstance(self.schedules, Mapping) or not self.schedules:
            raise ConfigError('`schedules`: a mapping with at least one schedule is needed.')
        for name in self.schedules:
            _with_field('schedules.{}'.format(name), lambda n=name: self.schedule(n))
        if not self.seeds:
            raise ConfigError('`seeds`: at least one seed is needed.')
        _with_field('seeds', lambda: [_integer(seed) for seed in self.seeds])
        _with_field('datasets', self._check_datasets)
        if _with_field('workers', lambda: _integer(self.workers)) < 1:
            raise ConfigError('`workers` must be at least 1.')

    def _check_datasets(self):
        if not isinstance(self.datasets, Mapping):
            raise ConfigError('expected a mapping, got {!r}.'.format(self.datasets))
        if not isinstance(self.datasets.get('train'), Mapping):
            raise ConfigError('`train` is missing or not a mapping.')
        evaluation = self.datasets.get('eval') or []
        if not isinstance(evaluation, list) or not all(isinstance(e, Mapping) for e in evaluation):
            raise ConfigError('`eval` must be a list of dataset entries.')
        if self.protocol == 'cross_dataset' and not evaluation:
            raise ConfigError('`eval`: cross_dataset needs evaluation datasets.')

    def schedule(self, name: str) -> PromptSchedule:
        return PromptSchedule.from_dict(self.schedules[name], self.model.vision.num_layers)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': self.model.to_dict(),
            'schedules': {name: dict(doc) for name, doc in self.schedules.items()},
            'train': self.train.to_dict(),
            'protocol': self.protocol,
            'datasets': self.datasets,
            'seeds': list(self.seeds),
            'output': self.output,
            'workers': self.workers,
            'gradcheck': asdict(self.gradcheck),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> 'ExperimentConfig':
        """
        :raise: ConfigError naming the offending field
        """
        if doc is None:
            doc = {}
        if not isinstance(doc, Mapping):
            raise ConfigError('An experiment config must be a mapping.')
        doc = dict(doc)
        if 'schedule' in doc:
            doc.setdefault('schedules', {'main': doc.pop('schedule')})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError('Unknown fields {}.'.format(unknown))

        values: Dict[str, Any] = dict(doc)
        if 'model' in doc:
            values['model'] = _with_field('model', lambda: ModelConfig.from_dict(doc['model']))
        if 'train' in doc:
            values['train'] = _with_field('train', lambda: TrainConfig.from_dict(doc['train']))
        if 'gradcheck' in doc:
            values['gradcheck'] = _with_field(
                'gradcheck', lambda: GradcheckConfig(**(doc['gradcheck'] or {})),
            )
        if 'seeds' in doc:
            values['seeds'] = _with_field('seeds', lambda: [_integer(seed) for seed in doc['seeds']])
        if 'workers' in doc:
            values['workers'] = _with_field('workers', lambda: _integer(doc['workers']))

        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def load(cls, path: str) -> 'ExperimentConfig':
        return cls.from_dict(load_document(path))


def _with_field(name: str, build):
    """
    Run `build`, turning failures into a ConfigError that names the field.
    """
    try:
        return build()
    except ModPromptError as error:
        if isinstance(error, ConfigError) and str(error).startswith('`{}'.format(name)):
            raise
        raise ConfigError('`{}`: {}'.format(name, error)) from error
    except (TypeError, ValueError, AttributeError) as error:
        raise ConfigError('`{}`: {}'.format(name, error)) from error


def _integer(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError('expected an integer, got {!r}.'.format(value))
    return value


def resolve_dataset(entry: Mapping[str, Any], model: ModelConfig) -> FewShotDataset:
    """
    :param entry: `{path: ...}` or `{synthetic: {...}}`
    :param model: supplies image geometry and vocabulary for synthetic data
    """
    if 'path' in entry:
        return load_dataset(entry['path'])
    if 'synthetic' in entry:
        height, width, _ = model.vision.image_shape
        if height != width:
            raise ConfigError('Synthetic datasets need square images, got {}×{}.'.format(height, width))
        options = dict(entry['synthetic'])
        options.setdefault('image_size', height)
        options.setdefault('patch_size', model.vision.patch_size)
        options.setdefault('vocab_size', model.text.vocab_size)
        return _with_field('datasets', lambda: make_synthetic_dataset(**options))
    raise ConfigError('`datasets`: a dataset needs `path` or `synthetic`.')


def _run_protocol(
        config: ExperimentConfig,
        schedule: PromptSchedule,
        train_set: FewShotDataset,
        eval_sets: List[FewShotDataset],
        seed: int,
) -> Dict[str, Any]:
    model = PromptedClip(config.model, schedule, seed=seed)
    train_config = replace(config.train, seed=seed)
    if config.protocol == 'base_to_new':
        return base_to_new_protocol(model, train_set, train_config)
    if config.protocol == 'cross_dataset':
        return cross_dataset_protocol(model, train_set, eval_sets, train_config, config.workers)
    return plain_protocol(model, train_set, train_config)


def run_experiment(config: ExperimentConfig) -> Dict[str, Any]:
    """
    Run the configured protocol for every schedule and seed.

    :return: the report document
    """
    start = time.perf_counter()
    train_set = resolve_dataset(config.datasets['train'], config.model)
    eval_sets = [
        resolve_dataset(entry, config.model)
        for entry in config.datasets.get('eval') or []
    ]

    results: Dict[str, Any] = {}
    for name in config.schedules:
        schedule = config.schedule(name)
        logger.info('Schedule `%s`: %r', name, schedule)
        outcome = repeat_over_seeds(
            lambda seed, s=schedule: _run_protocol(config, s, train_set, eval_sets, seed),
            config.seeds,
        )
        outcome['profile'] = context_length_profile(
            schedule,
            config.model.vision.num_patches,
            config.model.vision.width,
        ).to_dict()
        results[name] = outcome

    return {
        'config': config.to_dict(),
        'protocol': config.protocol,
        'results': results,
        'versions': {
            'modprompt': __version__,
            'numpy': np.__version__,
            'python': platform.python_version(),
        },
        'created': datetime.datetime.now(datetime.timezone.utc).isoformat(),
        'wall_time': time.perf_counter() - start,
    }


@dataclass
class GradcheckOutcome:
    """
    Largest relative error per trainable tensor.
    """
    errors: Dict[str, float]
    tolerance: float
    parameter_count: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_gradcheck(config: ExperimentConfig, schedule_name: str = None) -> GradcheckOutcome:
    """
    Compare tape gradients of every trainable tensor with central differences
    on a small labelled batch.

    :raise: ContractError for an empty trainable set, ConfigError for a model
        too large to perturb coordinate by coordinate
    """
    check = config.gradcheck
    name = schedule_name or next(iter(config.schedules))
    model = PromptedClip(
        replace(config.model, temperature=check.temperature),
        config.schedule(name),
        seed=check.seed,
    )
    count = model.parameter_count(trainable_only=True)
    if not count:
        raise ContractError('Trainable set empty: nothing to check.')
    if count > check.max_parameters:
        raise ConfigError(
            '{} trainable coordinates exceed the gradient-check limit of {}; '
            'shrink the widths, the prompt counts or the prompt depth, or '
            'freeze parameter groups.'.format(count, check.max_parameters),
        )

    height, _, _ = config.model.vision.image_shape
    dataset = make_synthetic_dataset(
        check.num_classes,
        1,
        0.1,
        check.seed,
        image_size=height,
        patch_size=config.model.vision.patch_size,
        vocab_size=config.model.text.vocab_size,
    )
    rows = [index % len(dataset) for index in range(check.batch)]
    images, labels = dataset.images[rows], dataset.labels[rows]

    def loss():
        probs = predict_probs(
            encode_images(model, images),
            encode_texts(model, dataset.class_names),
            model.temperature,
        )
        return cross_entropy_loss(probs, labels)

    errors = {}
    for param_name, param in model.trainable_parameters():
        model.zero_grad()
        errors[param_name] = float(finite_diff_check(loss, param, check.eps))
        logger.info('%s: max relative error %.3e', param_name, errors[param_name])

    return GradcheckOutcome(errors, check.tolerance, count)


def run_profile(schedule_doc: Mapping[str, Any], patches: int, layers: int, width: int) -> ContextProfile:
    """
    :return: context lengths and cost of a schedule document
    """
    schedule = PromptSchedule.from_dict(schedule_doc, layers)
    return context_length_profile(schedule, patches, width)


def strip_timing(report: Any) -> Any:
    """
    :return: the report without fields that change from run to run, at any
        depth
    """
    if isinstance(report, Mapping):
        return {
            key: strip_timing(value)
            for key, value in report.items()
            if key not in TIMING_FIELDS
        }
    if isinstance(report, list):
        return [strip_timing(value) for value in report]
    return report
