"""
Optimizer, learning-rate schedule, training loop and evaluation.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import FewShotDataset
from .exceptions import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    TrainingAborted,
)
from .head import (
    ClassWeights,
    cross_entropy_loss,
    encode_images,
    encode_texts,
    predict_probs,
)
from .model import PromptedClip
from .tensor import Tensor, backward, no_grad


logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = 5


@dataclass
class TrainConfig:
    """
    Few-shot training settings.

    `epochs` left as `None` lets each protocol apply its own default;
    `warmup_steps` left as `None` means one epoch of warmup.
    """
    shots: int = 16
    lr: float = 3.5e-3
    epochs: Optional[int] = None
    batch_size_train: int = 4
    batch_size_eval: int = 100
    warmup_steps: Optional[int] = None
    min_lr: float = 1e-5
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self):
        """
        :raise: ConfigError
        """
        for name in ('shots', 'batch_size_train', 'batch_size_eval'):
            if getattr(self, name) < 1:
                raise ConfigError('`{}` must be at least 1.'.format(name))
        if self.lr <= 0:
            raise ConfigError('`lr` must be positive.')
        if not 0 <= self.min_lr <= self.lr:
            raise ConfigError('`min_lr` must lie in [0, lr].')
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError('`epochs` must be nonnegative.')
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError('`warmup_steps` must be nonnegative.')
        if not 0 <= self.momentum < 1:
            raise ConfigError('`momentum` must lie in [0, 1).')
        if self.weight_decay < 0:
            raise ConfigError('`weight_decay` must be nonnegative.')

    def epochs_or(self, default: int) -> int:
        return default if self.epochs is None else self.epochs

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> 'TrainConfig':
        return cls(**dict(doc or {}))


@dataclass
class Metrics:
    """
    Outcome of an evaluation or a training run.
    """
    accuracy: float
    per_class_accuracy: List[Optional[float]]
    loss: float
    loss_curve: List[float] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    """
    Training metrics plus the final trainable parameter values.
    """
    metrics: Metrics
    parameters: Dict[str, np.ndarray]


def lr_at_step(config: TrainConfig, step: int, total_steps: int, warmup_steps: int = None) -> float:
    """
    Linear warmup from `min_lr` to `lr`, then cosine decay reaching `min_lr`
    at the final step.

    :param config: training settings
    :param step: 0-based optimizer step
    :param total_steps: number of steps of the run
    :param warmup_steps: overrides `config.warmup_steps`
    """
    warmup = config.warmup_steps if warmup_steps is None else warmup_steps
    if warmup is None:
        raise ContractError('Warmup length is unresolved.')
    if not 0 <= step < total_steps:
        raise ContractError('Step {} outside of [0, {}).'.format(step, total_steps))
    if warmup >= total_steps:
        raise ContractError(
            'Warmup of {} steps does not fit {} steps.'.format(warmup, total_steps),
        )

    if step < warmup:
        return config.min_lr + (config.lr - config.min_lr) * step / warmup

    span = total_steps - 1 - warmup
    progress = (step - warmup) / span if span else 0.0

    return config.min_lr + (config.lr - config.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """
    Stochastic gradient descent with optional momentum and weight decay.
    """
    def __init__(
            self,
            params: Sequence[Tuple[str, Tensor]],
            momentum: float = 0.0,
            weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self):
        for _, param in self.params:
            param.zero_grad()

    def step(self, lr: float):
        """
        Update parameter values in place.
        """
        for name, param in self.params:
            if param.grad is None:
                continue
            grad = param.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            if self.momentum:
                velocity = self.velocity.get(name)
                velocity = grad if velocity is None else self.momentum * velocity + grad
                self.velocity[name] = velocity
                grad = velocity
            param.data -= lr * grad


def predict(model: PromptedClip, images: np.ndarray, weights: ClassWeights) -> np.ndarray:
    """
    :return: B×C probabilities, no tape recorded
    """
    with no_grad():
        u = encode_images(model, images)
        return predict_probs(u, weights, model.temperature).numpy()


def evaluate(model: PromptedClip, dataset: FewShotDataset, batch_size: int = 100) -> Metrics:
    """
    Classify every example against the dataset's own class names.

    :param model: model to evaluate, left unchanged
    :param dataset: labelled examples
    :param batch_size: images encoded per batch
    """
    if not len(dataset):
        raise DataError('Cannot evaluate on an empty dataset `{}`.'.format(dataset.name))
    start = time.perf_counter()
    with no_grad():
        weights = encode_texts(model, dataset.class_names)

    predictions, picked = [], []
    for begin in range(0, len(dataset), batch_size):
        probs = predict(model, dataset.images[begin:begin + batch_size], weights)
        labels = dataset.labels[begin:begin + batch_size]
        predictions.append(probs.argmax(axis=1))
        picked.append(probs[np.arange(len(labels)), labels])

    predictions = np.concatenate(predictions)
    correct = predictions == dataset.labels
    with np.errstate(divide='ignore'):
        loss = float(-np.log(np.concatenate(picked)).mean())
    per_class = [
        float(correct[dataset.labels == label].mean())
        if np.any(dataset.labels == label) else None
        for label in range(dataset.num_classes)
    ]

    return Metrics(
        accuracy=float(correct.mean()),
        per_class_accuracy=per_class,
        loss=loss,
        wall_time=time.perf_counter() - start,
    )


def train(
        model: PromptedClip,
        dataset: FewShotDataset,
        config: TrainConfig,
        epochs: int = None,
) -> TrainResult:
    """
    Few-shot SGD over shuffled batches; only grad-enabled parameters change.

    :raise: ContractError if nothing is trainable, TrainingAborted on a
        non-finite loss
    :param model: model updated in place
    :param dataset: training examples
    :param config: training settings
    :param epochs: overrides `config.epochs`, which defaults to 5
    :return: metrics on the training set after the last step
    """
    config.validate()
    trainable = model.trainable_parameters()
    if not trainable:
        raise ContractError('Trainable set empty: every parameter is frozen.')
    if not len(dataset):
        raise DataError('Cannot train on an empty dataset.')

    epochs = config.epochs_or(DEFAULT_EPOCHS) if epochs is None else epochs
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size_train)
    total = steps_per_epoch * epochs
    warmup = config.warmup_steps
    if warmup is None:
        warmup = min(steps_per_epoch, max(0, total - 1))

    rng = np.random.default_rng(config.seed)
    optimizer = SGD(trainable, config.momentum, config.weight_decay)
    curve: List[float] = []
    start = time.perf_counter()
    step = 0

    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for begin in range(0, len(dataset), config.batch_size_train):
            batch = order[begin:begin + config.batch_size_train]
            lr = lr_at_step(config, step, total, warmup)

            optimizer.zero_grad()
            try:
                weights = encode_texts(model, dataset.class_names)
                probs = predict_probs(
                    encode_images(model, dataset.images[batch]),
                    weights,
                    model.temperature,
                )
            except NumericError as error:
                raise TrainingAborted(step, math.nan) from error
            loss = cross_entropy_loss(probs, dataset.labels[batch])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(step, value)

            backward(loss)
            optimizer.step(lr)
            curve.append(value)
            logger.debug('step %d: loss %.6f, lr %.3e', step, value, lr)
            step += 1

        logger.info(
            'epoch %d/%d: mean loss %.4f, lr %.3e',
            epoch + 1,
            epochs,
            float(np.mean(curve[-steps_per_epoch:])),
            lr,
        )

    metrics = evaluate(model, dataset, config.batch_size_eval)
    metrics.loss_curve = curve
    metrics.wall_time = time.perf_counter() - start

    return TrainResult(
        metrics,
        {name: param.numpy() for name, param in trainable},
    )
