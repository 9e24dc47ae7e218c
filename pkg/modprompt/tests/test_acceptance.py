"""
Long-running experiments on the default model. Run with
`MODPROMPT_ACCEPTANCE=1 ./test.sh`.
"""
import os
import unittest
from unittest import TestCase

from ..data import make_synthetic_dataset, sample_few_shot
from ..experiment import ExperimentConfig, run_experiment, run_gradcheck
from ..model import ModelConfig, PromptedClip
from ..prompts import mpl
from ..protocols import cross_dataset_protocol
from ..training import TrainConfig, evaluate, train


ENABLED = os.environ.get('MODPROMPT_ACCEPTANCE') == '1'


def toy_dataset(model_config, **options):
    return make_synthetic_dataset(
        8,
        32,
        0.1,
        0,
        image_size=model_config.vision.image_shape[0],
        patch_size=model_config.vision.patch_size,
        vocab_size=model_config.text.vocab_size,
        **options,
    )


@unittest.skipUnless(ENABLED, 'set MODPROMPT_ACCEPTANCE=1 to run')
class AcceptanceTests(TestCase):
    """
    Gradient, trainability and mechanism checks on the default toy model.
    """
    def test_default_gradcheck(self):
        """
        Every trainable coordinate of the default model passes the gradient
        check.
        """
        outcome = run_gradcheck(ExperimentConfig())

        self.assertTrue(outcome.passed, outcome.errors)
        self.assertEqual(outcome.parameter_count, 6400)

    def test_trainability(self):
        """
        Fifty epochs fit the 8-class toy task and beat the untrained model
        on held-out examples by ten points.
        """
        config = ModelConfig()
        schedule = mpl(2, 1, 2, config.vision.num_layers)
        dataset = toy_dataset(config)
        train_set = sample_few_shot(dataset, 16, 0)
        held_out = dataset.without(train_set)
        untrained = evaluate(PromptedClip(config, schedule), held_out)

        model = PromptedClip(config, schedule)
        result = train(model, train_set, TrainConfig(epochs=50))

        self.assertGreaterEqual(result.metrics.accuracy, 0.95)
        self.assertGreaterEqual(evaluate(model, held_out).accuracy, untrained.accuracy + 0.10)

    def test_mechanism_comparison(self):
        """
        Modular and deep prompting both give complete reports over five seeds.
        """
        config = ExperimentConfig.from_dict({
            'schedules': {
                'mpl': {'kind': 'mpl', 'add': 2, 'remove': 1, 'depth': 6},
                'deep_vpt': {'kind': 'deep_vpt', 'add': 2},
            },
            'train': {'epochs': 5},
            'seeds': [0, 1, 2, 3, 4],
        })
        report = run_experiment(config)

        for name in ('mpl', 'deep_vpt'):
            result = report['results'][name]
            self.assertEqual(len(result['runs']), 5)
            for key in ('base_acc', 'new_acc', 'train_acc'):
                self.assertTrue(0.0 <= result['mean'][key] <= 1.0)
                self.assertGreaterEqual(result['std'][key], 0.0)

    def test_shifted_transfer(self):
        """
        A trained model transfers to shifted prototypes: worse than on its
        own data, still clearly above chance.
        """
        config = ModelConfig()
        source = toy_dataset(config, name='source')
        shifted = toy_dataset(config, name='shifted', prototype_shift=0.3)
        model = PromptedClip(config, mpl(2, 1, 2, config.vision.num_layers))
        outcome = cross_dataset_protocol(
            model, source, [source, shifted], TrainConfig(epochs=20),
        )

        chance = 1.0 / 8
        self.assertLessEqual(outcome['shifted_acc'], outcome['source_acc'])
        self.assertGreater(outcome['shifted_acc'], chance + 0.15)
