"""
The assembled dual encoder with its prompt parameters.

At toy scale there is no pretrained backbone: a seeded random backbone stands
in for it and stays frozen unless `ModelConfig.trainable` says otherwise.
"""
import copy
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Tuple

import numpy as np

from .exceptions import ConfigError
from .head import DEFAULT_TEMPERATURE, ProjectionParams
from .prompts import CouplingParams, PromptSchedule, TextPromptParams
from .tensor import Tensor
from .transformer import (
    INIT_STD,
    EmbeddingParams,
    EncoderConfig,
    NormParams,
    build_layers,
)


logger = logging.getLogger(__name__)

GROUPS = ('text_prompts', 'coupling', 'projection', 'backbone')


def default_text_config() -> EncoderConfig:
    return EncoderConfig(
        num_layers=6, num_heads=4, width=32, vocab_size=64, max_seq_len=16,
    )


def default_vision_config() -> EncoderConfig:
    return EncoderConfig(
        num_layers=6, num_heads=4, width=48, patch_size=4, patch_grid=(4, 4),
    )


@dataclass
class ModelConfig:
    """
    Everything needed to build a `PromptedClip` besides the schedule.
    """
    text: EncoderConfig = field(default_factory=default_text_config)
    vision: EncoderConfig = field(default_factory=default_vision_config)
    embed_dim: int = 32
    temperature: float = DEFAULT_TEMPERATURE
    text_prompt_length: int = 1
    template_tokens: Tuple[int, ...] = (1, 2, 3, 1)
    trainable: Tuple[str, ...] = ('text_prompts', 'coupling')
    init_std: float = INIT_STD
    seed: int = 0

    def validate(self):
        """
        :raise: ConfigError
        """
        if self.text.is_vision or not self.vision.is_vision:
            raise ConfigError('`text` must be a text branch and `vision` a vision branch.')
        self.text.validate()
        self.vision.validate()
        if self.embed_dim < 1:
            raise ConfigError('`embed_dim` must be at least 1.')
        if self.temperature <= 0:
            raise ConfigError('`temperature` must be positive.')
        if self.text_prompt_length < 1:
            raise ConfigError('`text_prompt_length` must be at least 1.')
        unknown = set(self.trainable) - set(GROUPS)
        if unknown:
            raise ConfigError(
                'Unknown `trainable` groups {}; choose from {}.'.format(
                    sorted(unknown),
                    list(GROUPS),
                ),
            )
        bad = [t for t in self.template_tokens if not 0 <= t < self.text.vocab_size]
        if bad:
            raise ConfigError('`template_tokens` {} are outside of the vocabulary.'.format(bad))

    def to_dict(self) -> Dict[str, Any]:
        def encoder(config: EncoderConfig) -> Dict[str, Any]:
            return {
                'num_layers': config.num_layers,
                'num_heads': config.num_heads,
                'width': config.width,
                'mlp_ratio': config.mlp_ratio,
                'patch_size': config.patch_size,
                'patch_grid': list(config.patch_grid),
                'vocab_size': config.vocab_size,
                'max_seq_len': config.max_seq_len,
            }

        return {
            'text': encoder(self.text),
            'vision': encoder(self.vision),
            'embed_dim': self.embed_dim,
            'temperature': self.temperature,
            'text_prompt_length': self.text_prompt_length,
            'template_tokens': list(self.template_tokens),
            'trainable': list(self.trainable),
            'init_std': self.init_std,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> 'ModelConfig':
        """
        Missing keys keep their defaults.
        """
        doc = dict(doc or {})
        defaults = cls()

        def encoder(key: str, base: EncoderConfig) -> EncoderConfig:
            values = dict(base.__dict__)
            values.update(doc.pop(key, None) or {})
            values['patch_grid'] = tuple(values['patch_grid'])
            return EncoderConfig(**values)

        text = encoder('text', defaults.text)
        vision = encoder('vision', defaults.vision)
        for key in ('template_tokens', 'trainable'):
            if key in doc:
                doc[key] = tuple(doc[key])

        return cls(text=text, vision=vision, **doc)


class PromptedClip:
    """
    Dual encoder with deep text prompts coupled into modular vision prompts.
    """
    def __init__(self, config: ModelConfig, schedule: PromptSchedule, seed: int = 0):
        """
        :param config: model shape and trainable groups
        :param schedule: vision prompt plan
        :param seed: seed of the prompt and coupling initialization; the
            backbone uses `config.seed`
        """
        config.validate()
        schedule.validate()
        if schedule.num_layers != config.vision.num_layers:
            raise ConfigError(
                'Schedule has {} layers, the vision encoder {}.'.format(
                    schedule.num_layers,
                    config.vision.num_layers,
                ),
            )
        if schedule.depth > config.text.num_layers:
            raise ConfigError(
                'Prompt depth {} exceeds the {} text layers.'.format(
                    schedule.depth,
                    config.text.num_layers,
                ),
            )

        self.config = config
        self.schedule = schedule
        trainable = set(config.trainable)
        std = config.init_std

        backbone_rng = np.random.default_rng(config.seed)
        backbone = 'backbone' in trainable
        self.embeddings = EmbeddingParams(
            config.text, config.vision, backbone_rng, std=std, grad_enabled=backbone,
        )
        self.text_layers = build_layers(
            config.text, backbone_rng, std=std, grad_enabled=backbone,
        )
        self.vision_layers = build_layers(
            config.vision, backbone_rng, std=std, grad_enabled=backbone,
        )
        self.text_norm = NormParams(config.text.width, backbone)
        self.vision_norm = NormParams(config.vision.width, backbone)
        self.projection = ProjectionParams(
            config.text.width,
            config.vision.width,
            config.embed_dim,
            backbone_rng,
            temperature=config.temperature,
            std=std,
            grad_enabled='projection' in trainable,
        )

        prompt_rng = np.random.default_rng(seed)
        self.text_prompts = TextPromptParams(
            schedule.depth,
            config.text_prompt_length,
            config.text.width,
            prompt_rng,
            std=std,
            grad_enabled='text_prompts' in trainable,
        )
        self.coupling = CouplingParams(
            schedule,
            config.text_prompt_length * config.text.width,
            config.vision.width,
            prompt_rng,
            std=std,
            grad_enabled='coupling' in trainable,
        )
        logger.debug(
            'Built model: %d trainable of %d parameters, schedule %r.',
            self.parameter_count(trainable_only=True),
            self.parameter_count(),
            schedule,
        )

    @property
    def temperature(self) -> float:
        return self.projection.temperature

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        """
        :return: every parameter tensor with a dotted name
        """
        yield from self.embeddings.named_tensors('backbone.embeddings')
        for index, layer in enumerate(self.text_layers):
            yield from layer.named_tensors('backbone.text.{}'.format(index))
        for index, layer in enumerate(self.vision_layers):
            yield from layer.named_tensors('backbone.vision.{}'.format(index))
        yield from self.text_norm.named_tensors('backbone.text_norm')
        yield from self.vision_norm.named_tensors('backbone.vision_norm')
        yield from self.projection.named_tensors('projection')
        yield from self.text_prompts.named_tensors('text_prompts')
        yield from self.coupling.named_tensors('coupling')

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.grad_enabled]

    def frozen_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if not t.grad_enabled]

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(
            t.size
            for _, t in self.named_parameters()
            if t.grad_enabled or not trainable_only
        )

    def zero_grad(self):
        for _, param in self.named_parameters():
            param.zero_grad()

    def digest(self, frozen_only: bool = True) -> str:
        """
        :return: SHA-256 over names and values of the (frozen) parameters
        """
        sha = hashlib.sha256()
        params = self.frozen_parameters() if frozen_only else list(self.named_parameters())
        for name, param in params:
            sha.update(name.encode())
            sha.update(np.ascontiguousarray(param.data).tobytes())
        return sha.hexdigest()

    def snapshot(self) -> Dict[str, np.ndarray]:
        """
        :return: copies of all parameter values by name
        """
        return {name: param.numpy() for name, param in self.named_parameters()}

    def copy(self) -> 'PromptedClip':
        """
        :return: independent deep copy, e.g. for a parallel worker
        """
        return copy.deepcopy(self)
