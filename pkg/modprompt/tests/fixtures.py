"""
Small models and datasets shared by the tests.
"""
from ..data import make_synthetic_dataset
from ..model import ModelConfig, PromptedClip
from ..prompts import mpl
from ..transformer import EncoderConfig


def tiny_config(**overrides) -> ModelConfig:
    """
    Two layers per branch, width 8, 8×8 images cut into four patches.
    """
    values = dict(
        text=EncoderConfig(
            num_layers=2, num_heads=2, width=8, vocab_size=16, max_seq_len=8,
        ),
        vision=EncoderConfig(
            num_layers=2, num_heads=2, width=8, patch_size=4, patch_grid=(2, 2),
        ),
        embed_dim=8,
        temperature=1.0,
        template_tokens=(1, 2),
        init_std=0.3,
    )
    values.update(overrides)
    return ModelConfig(**values)


def tiny_model(schedule=None, seed=0, **overrides) -> PromptedClip:
    config = tiny_config(**overrides)
    if schedule is None:
        schedule = mpl(2, 1, 2, config.vision.num_layers)
    return PromptedClip(config, schedule, seed=seed)


def tiny_dataset(num_classes=4, per_class=3, seed=0, **options):
    options.setdefault('image_size', 8)
    options.setdefault('patch_size', 4)
    options.setdefault('vocab_size', 16)
    return make_synthetic_dataset(num_classes, per_class, 0.05, seed, **options)


def tiny_experiment_doc(**overrides):
    """
    Experiment document small enough for a unit test run.
    """
    doc = {
        'model': {
            'text': {'num_layers': 2, 'num_heads': 2, 'width': 8, 'vocab_size': 16, 'max_seq_len': 8},
            'vision': {'num_layers': 2, 'num_heads': 2, 'width': 8, 'patch_size': 4, 'patch_grid': [2, 2]},
            'embed_dim': 8,
            'temperature': 1.0,
            'template_tokens': [1, 2],
            'init_std': 0.3,
        },
        'schedules': {
            'mpl': {'kind': 'mpl', 'add': 2, 'remove': 1, 'depth': 2},
            'deep_vpt': {'kind': 'deep_vpt', 'add': 2},
        },
        'train': {'shots': 2, 'lr': 0.01, 'epochs': 1, 'batch_size_train': 4},
        'protocol': 'base_to_new',
        'datasets': {
            'train': {'synthetic': {'num_classes': 4, 'per_class': 4, 'image_noise': 0.05, 'seed': 0}},
        },
        'seeds': [0, 1],
    }
    doc.update(overrides)
    return doc
