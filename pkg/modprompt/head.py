"""
Joint-embedding projection, cosine-similarity classifier and loss.
"""
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DataError
from .prompts import run_text_encoder, run_vision_encoder
from .tensor import Tensor


DEFAULT_TEMPERATURE = 0.01


class ProjectionParams:
    """
    Linear maps into the joint space and the fixed softmax temperature.
    """
    def __init__(
            self,
            text_width: int,
            vision_width: int,
            embed_dim: int,
            rng: np.random.Generator,
            *,
            temperature: float = DEFAULT_TEMPERATURE,
            std: float = 0.02,
            grad_enabled: bool = False,
    ):
        if temperature <= 0:
            raise ConfigError('`temperature` must be positive, got {}.'.format(temperature))
        self.text = Tensor.normal(
            rng, text_width, embed_dim, std=std, grad_enabled=grad_enabled,
        )
        self.image = Tensor.normal(
            rng, vision_width, embed_dim, std=std, grad_enabled=grad_enabled,
        )
        self.temperature = temperature

    def named_tensors(self, prefix: str):
        yield prefix + '.text', self.text
        yield prefix + '.image', self.image


class ClassWeights:
    """
    Unit-norm class embeddings stacked as rows, C×d.
    """
    def __init__(self, weights: Tensor):
        self.weights = weights

    @property
    def num_classes(self) -> int:
        return self.weights.rows


def encode_image(model: 'PromptedClip', image, layer_hook=None) -> Tensor:
    """
    :param model: assembled model
    :param image: H×W×3 pixels, array or tensor
    :param layer_hook: forwarded to the vision stack
    :return: 1×d unit-norm image embedding
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    row = run_vision_encoder(
        model.schedule,
        model.coupling,
        model.text_prompts.blocks,
        image,
        embeddings=model.embeddings,
        layers=model.vision_layers,
        layer_hook=layer_hook,
    )

    return T.l2_normalize_rows(T.matmul(model.vision_norm(row), model.projection.image))


def encode_images(model: 'PromptedClip', images: Sequence) -> Tensor:
    """
    :return: B×d, one unit-norm row per image
    """
    return T.concat_rows([encode_image(model, image) for image in images])


def encode_texts(model: 'PromptedClip', class_token_lists: Sequence[Sequence[int]]) -> ClassWeights:
    """
    :param model: assembled model
    :param class_token_lists: one token-id list per class
    :return: C×d class weights
    """
    if len(class_token_lists) < 2:
        raise ContractError(
            'At least 2 classes are needed, got {}.'.format(len(class_token_lists)),
        )
    rows = []
    for tokens in class_token_lists:
        row = run_text_encoder(
            model.text_prompts.blocks,
            tokens,
            embeddings=model.embeddings,
            layers=model.text_layers,
            template_tokens=model.config.template_tokens,
        )
        rows.append(T.matmul(model.text_norm(row), model.projection.text))

    return ClassWeights(T.l2_normalize_rows(T.concat_rows(rows)))


def predict_probs(u: Tensor, weights: ClassWeights, temperature: float) -> Tensor:
    """
    Softmax over cosine similarities divided by the temperature.

    :param u: B×d unit-norm image embeddings
    :param weights: C×d class weights
    :param temperature: τ > 0
    :return: B×C class probabilities
    """
    if temperature <= 0:
        raise ConfigError('`temperature` must be positive, got {}.'.format(temperature))
    logits = T.matmul(u, T.transpose(weights.weights))

    return T.softmax_rows(T.scale(logits, 1.0 / temperature))


def cross_entropy_loss(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """
    :return: mean negative log probability of the true classes
    """
    labels = [int(label) for label in labels]
    if len(labels) != probs.rows:
        raise DataError(
            '{} labels for {} predictions.'.format(len(labels), probs.rows),
        )
    bad = [label for label in labels if not 0 <= label < probs.shape[1]]
    if bad:
        raise DataError(
            'Labels {} are outside of [0, {}).'.format(bad, probs.shape[1]),
        )

    return T.nll_loss(probs, labels)
