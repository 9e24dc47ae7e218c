"""
Encoder building blocks shared by the text and vision branches.
"""
import math
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, LengthError, VocabError
from .tensor import Tensor


INIT_STD = 0.02
CHANNELS = 3


@dataclass
class EncoderConfig:
    """
    Shape of one encoder branch.

    Vision branches set `patch_size` and `patch_grid`; text branches set
    `vocab_size` and `max_seq_len`.
    """
    num_layers: int
    num_heads: int
    width: int
    mlp_ratio: int = 4
    patch_size: int = 0
    patch_grid: Tuple[int, int] = (0, 0)
    vocab_size: int = 0
    max_seq_len: int = 0

    @property
    def is_vision(self) -> bool:
        return self.patch_size > 0

    @property
    def num_patches(self) -> int:
        """
        :return: ξ, the number of patch rows
        """
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (
            self.patch_grid[0] * self.patch_size,
            self.patch_grid[1] * self.patch_size,
            CHANNELS,
        )

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size * CHANNELS

    def validate(self):
        """
        :raise: ConfigError
        """
        for name in ('num_layers', 'num_heads', 'width', 'mlp_ratio'):
            if getattr(self, name) < 1:
                raise ConfigError('`{}` must be at least 1.'.format(name))
        if self.width % self.num_heads:
            raise ConfigError(
                '`width` {} is not divisible by `num_heads` {}.'.format(
                    self.width,
                    self.num_heads,
                ),
            )
        if self.is_vision:
            if min(self.patch_grid) < 1:
                raise ConfigError('`patch_grid` extents must be at least 1.')
        elif self.vocab_size < 1 or self.max_seq_len < 1:
            raise ConfigError(
                'A text encoder needs positive `vocab_size` and `max_seq_len`.',
            )


class NormParams:
    """
    Gain and bias of a layer norm.
    """
    def __init__(self, width: int, grad_enabled: bool = False):
        self.gain = Tensor.ones(1, width, grad_enabled=grad_enabled)
        self.bias = Tensor.zeros(1, width, grad_enabled=grad_enabled)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layernorm_rows(x), self.gain), self.bias)

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield prefix + '.gain', self.gain
        yield prefix + '.bias', self.bias


class LayerParams:
    """
    Weights of one pre-norm encoder layer.
    """
    def __init__(
            self,
            config: EncoderConfig,
            rng: np.random.Generator,
            *,
            std: float = INIT_STD,
            grad_enabled: bool = False,
    ):
        """
        :param config: branch shape
        :param rng: generator the weights are drawn from
        :param std: standard deviation of weight matrices
        :param grad_enabled: whether the weights take part in gradients
        """
        width, hidden = config.width, config.width * config.mlp_ratio
        self.num_heads = config.num_heads

        def weight(rows, cols):
            return Tensor.normal(rng, rows, cols, std=std, grad_enabled=grad_enabled)

        def bias(cols):
            return Tensor.zeros(1, cols, grad_enabled=grad_enabled)

        self.query, self.query_bias = weight(width, width), bias(width)
        self.key, self.key_bias = weight(width, width), bias(width)
        self.value, self.value_bias = weight(width, width), bias(width)
        self.out, self.out_bias = weight(width, width), bias(width)
        self.fc1, self.fc1_bias = weight(width, hidden), bias(hidden)
        self.fc2, self.fc2_bias = weight(hidden, width), bias(width)
        self.norm1 = NormParams(width, grad_enabled)
        self.norm2 = NormParams(width, grad_enabled)

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        """
        :return: (dotted name, tensor) pairs
        """
        for name in ('query', 'key', 'value', 'out', 'fc1', 'fc2'):
            yield '{}.{}'.format(prefix, name), getattr(self, name)
            yield '{}.{}_bias'.format(prefix, name), getattr(self, name + '_bias')
        yield from self.norm1.named_tensors(prefix + '.norm1')
        yield from self.norm2.named_tensors(prefix + '.norm2')


class EmbeddingParams:
    """
    Input embeddings of both branches.
    """
    def __init__(
            self,
            text: EncoderConfig,
            vision: EncoderConfig,
            rng: np.random.Generator,
            *,
            std: float = INIT_STD,
            grad_enabled: bool = False,
    ):
        self.patch_size = vision.patch_size
        self.vocab_size = text.vocab_size
        self.token_table = Tensor.normal(
            rng, text.vocab_size, text.width, std=std, grad_enabled=grad_enabled,
        )
        self.text_positional = Tensor.normal(
            rng, text.max_seq_len, text.width, std=std, grad_enabled=grad_enabled,
        )
        self.patch_projection = Tensor.normal(
            rng, vision.patch_pixels, vision.width, std=std,
            grad_enabled=grad_enabled,
        )
        self.class_token = Tensor.zeros(1, vision.width, grad_enabled=grad_enabled)
        self.vision_positional = Tensor.normal(
            rng, 1 + vision.num_patches, vision.width, std=std,
            grad_enabled=grad_enabled,
        )

    @property
    def max_seq_len(self) -> int:
        return self.text_positional.rows

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for name in (
                'token_table',
                'text_positional',
                'patch_projection',
                'class_token',
                'vision_positional',
        ):
            yield '{}.{}'.format(prefix, name), getattr(self, name)


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.add(T.matmul(x, weight), bias)


def multi_head_self_attention(params: LayerParams, x: Tensor) -> Tensor:
    """
    Bidirectional scaled dot-product attention over the rows of `x`.

    :param params: layer weights
    :param x: n×d token rows
    :return: n×d attended rows
    """
    width = x.shape[1]
    if width % params.num_heads:
        raise ConfigError(
            'Width {} is not divisible by {} heads.'.format(width, params.num_heads),
        )
    head_width = width // params.num_heads

    query = _linear(x, params.query, params.query_bias)
    key = _linear(x, params.key, params.key_bias)
    value = _linear(x, params.value, params.value_bias)

    heads = []
    for head in range(params.num_heads):
        start, stop = head * head_width, (head + 1) * head_width
        scores = T.scale(
            T.matmul(
                T.slice_cols(query, start, stop),
                T.transpose(T.slice_cols(key, start, stop)),
            ),
            1.0 / math.sqrt(head_width),
        )
        heads.append(T.matmul(T.softmax_rows(scores), T.slice_cols(value, start, stop)))

    return _linear(T.concat_cols(heads), params.out, params.out_bias)


def mlp(params: LayerParams, x: Tensor) -> Tensor:
    return _linear(T.gelu(_linear(x, params.fc1, params.fc1_bias)), params.fc2, params.fc2_bias)


def encoder_layer_forward(params: LayerParams, x: Tensor) -> Tensor:
    """
    Pre-norm residual layer: x + MSA(LN(x)), then + MLP(LN(·)).
    Row count is preserved.
    """
    x = T.add(x, multi_head_self_attention(params, params.norm1(x)))
    return T.add(x, mlp(params, params.norm2(x)))


def encode_layers(layers: Sequence[LayerParams], x: Tensor) -> Tensor:
    """
    Run a plain stack of layers.
    """
    for layer in layers:
        x = encoder_layer_forward(layer, x)
    return x


def patch_embed(params: EmbeddingParams, image: Tensor) -> Tensor:
    """
    Project non-overlapping patches and prepend the class token.

    :param params: embeddings
    :param image: H×W×3 pixel values
    :return: (1 + ξ)×d_v rows, class token first, positional embeddings added
    """
    if len(image.shape) != 3 or image.shape[2] != CHANNELS:
        raise ConfigError('Expected an H×W×3 image, got {}.'.format(image.shape))
    height, width, _ = image.shape
    patch = params.patch_size
    if height % patch or width % patch:
        raise ConfigError(
            'Image {}×{} is not divisible into {}×{} patches.'.format(
                height, width, patch, patch,
            ),
        )
    count = (height // patch) * (width // patch)
    if 1 + count > params.vision_positional.rows:
        raise ConfigError(
            '{} patches exceed the {} positional rows.'.format(
                count,
                params.vision_positional.rows - 1,
            ),
        )

    patches = T.matmul(T.extract_patches(image, patch), params.patch_projection)
    rows = T.concat_rows([params.class_token, patches])

    return T.add(rows, T.slice_rows(params.vision_positional, 0, 1 + count))


def token_embed(params: EmbeddingParams, tokens: Sequence[int], offset: int = 0) -> Tensor:
    """
    Look up token embeddings and add positional embeddings.

    :param params: embeddings
    :param tokens: token ids
    :param offset: position of the first token in the full sequence
    :return: len(tokens)×d_t rows
    """
    tokens = list(tokens)
    bad = [token for token in tokens if not 0 <= token < params.vocab_size]
    if bad:
        raise VocabError(
            'Token ids {} are outside of the vocabulary of {}.'.format(
                bad,
                params.vocab_size,
            ),
        )
    if offset + len(tokens) > params.max_seq_len:
        raise LengthError(
            'Sequence of {} positions exceeds max_seq_len {}.'.format(
                offset + len(tokens),
                params.max_seq_len,
            ),
        )

    return T.add(
        T.embedding_lookup(params.token_table, tokens),
        T.slice_rows(params.text_positional, offset, offset + len(tokens)),
    )


def build_layers(
        config: EncoderConfig,
        rng: np.random.Generator,
        *,
        std: float = INIT_STD,
        grad_enabled: bool = False,
) -> List[LayerParams]:
    """
    :return: freshly initialized layers for one branch
    """
    return [
        LayerParams(config, rng, std=std, grad_enabled=grad_enabled)
        for _ in range(config.num_layers)
    ]
