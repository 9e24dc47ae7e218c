"""
Tests for `experiment.py`.
"""
import os
import tempfile
from unittest import TestCase, mock

from .. import tensor
from ..documents import dump_document
from ..exceptions import ConfigError, ContractError
from ..experiment import (
    ExperimentConfig,
    resolve_dataset,
    run_experiment,
    run_gradcheck,
    run_profile,
    strip_timing,
)
from .fixtures import tiny_config, tiny_experiment_doc


def corrupted_gelu_backward(self, grad):
    x, t = self.x, self.t
    inner = tensor.GELU_SCALE * (1.0 + 3.0 * tensor.GELU_CUBIC * x ** 2)
    return (1.5 * grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * inner),)


class ExperimentConfigTests(TestCase):
    """
    Tests for `ExperimentConfig`.
    """
    def test_round_trip(self):
        """
        A config rebuilds itself from its document form.
        """
        config = ExperimentConfig.from_dict(tiny_experiment_doc())

        self.assertEqual(ExperimentConfig.from_dict(config.to_dict()), config)
        self.assertEqual(list(config.schedules), ['mpl', 'deep_vpt'])
        self.assertEqual(config.train.shots, 2)

    def test_defaults(self):
        """
        An empty document gives a valid default experiment.
        """
        config = ExperimentConfig.from_dict({})

        self.assertEqual(config.protocol, 'base_to_new')
        self.assertEqual(config.seeds, [0])
        self.assertEqual(config.schedule('mpl').depth, 2)

    def test_single_schedule_alias(self):
        """
        A lone `schedule` becomes the only entry of `schedules`.
        """
        doc = tiny_experiment_doc()
        doc.pop('schedules')
        doc['schedule'] = {'kind': 'shallow', 'add': 3}
        config = ExperimentConfig.from_dict(doc)

        self.assertEqual(list(config.schedules), ['main'])
        self.assertEqual(config.schedule('main').layers[0].add, 3)

    def test_unknown_field(self):
        """
        Misspelled fields are not ignored.
        """
        with self.assertRaises(ConfigError) as context:
            ExperimentConfig.from_dict(tiny_experiment_doc(sedes=[1]))
        self.assertIn('sedes', str(context.exception))

    def test_bad_values(self):
        """
        Errors name the field they come from.
        """
        cases = [
            ({'protocol': 'zero_shot'}, '`protocol`'),
            ({'seeds': []}, '`seeds`'),
            ({'workers': 0}, '`workers`'),
            ({'train': {'shots': 0}}, '`train`'),
            ({'model': {'temperature': -1.0}}, '`model`'),
            ({'protocol': 'cross_dataset'}, '`datasets`: `eval`'),
            ({'seeds': ['x']}, '`seeds`'),
            ({'seeds': 3}, '`seeds`'),
            ({'workers': 'two'}, '`workers`'),
            ({'datasets': {'train': {'synthetic': {}}, 'eval': 'shifted'}}, '`datasets`'),
            ({'datasets': ['train']}, '`datasets`'),
        ]
        for overrides, field in cases:
            with self.assertRaises(ConfigError, msg=field) as context:
                ExperimentConfig.from_dict(tiny_experiment_doc(**overrides))
            self.assertIn(field, str(context.exception))

    def test_bad_schedule(self):
        """
        An invalid schedule is a configuration error naming the rule.
        """
        doc = tiny_experiment_doc(schedules={'bad': {'kind': 'mpl', 'add': 1, 'remove': 2, 'depth': 1}})
        with self.assertRaises(ConfigError) as context:
            ExperimentConfig.from_dict(doc)

        self.assertIn('schedules.bad', str(context.exception))
        self.assertIn('remove_count <= add_count', str(context.exception))

    def test_load_syntax_error(self):
        """
        YAML syntax errors point at the file position.
        """
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'broken.yaml')
            with open(path, 'w', encoding='utf-8') as stream:
                stream.write('seeds: [0, 1\nprotocol: plain\n')
            with self.assertRaises(ConfigError) as context:
                ExperimentConfig.load(path)

        self.assertIn('{}:'.format(path), str(context.exception))

    def test_load(self):
        """
        Loading a written document gives the same config.
        """
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'experiment.yaml')
            dump_document(tiny_experiment_doc(), path)

            self.assertEqual(
                ExperimentConfig.load(path),
                ExperimentConfig.from_dict(tiny_experiment_doc()),
            )


class ResolveDatasetTests(TestCase):
    """
    Tests for `resolve_dataset`.
    """
    def test_synthetic_follows_model(self):
        """
        Synthetic images take the model's geometry and vocabulary.
        """
        dataset = resolve_dataset(
            {'synthetic': {'num_classes': 3, 'per_class': 2, 'image_noise': 0.1, 'seed': 0}},
            tiny_config(),
        )

        self.assertEqual(dataset.images.shape, (6, 8, 8, 3))
        self.assertTrue(all(token < 16 for name in dataset.class_names for token in name))

    def test_unknown_source(self):
        """
        A dataset needs a path or a synthetic recipe.
        """
        with self.assertRaises(ConfigError):
            resolve_dataset({'url': 'x'}, tiny_config())
        with self.assertRaises(ConfigError):
            resolve_dataset({'synthetic': {'num_classes': 3}}, tiny_config())


class RunExperimentTests(TestCase):
    """
    Tests for `run_experiment`.
    """
    def setUp(self):
        self.config = ExperimentConfig.from_dict(tiny_experiment_doc())

    def test_report(self):
        """
        Every schedule reports one run per seed, their summary and a profile.
        """
        report = run_experiment(self.config)

        self.assertEqual(set(report['results']), {'mpl', 'deep_vpt'})
        for result in report['results'].values():
            self.assertEqual([run['seed'] for run in result['runs']], [0, 1])
            mean = sum(run['new_acc'] for run in result['runs']) / 2
            self.assertAlmostEqual(result['mean']['new_acc'], mean, places=12)
            self.assertEqual(len(result['profile']['lengths']), 2)
        self.assertEqual(report['results']['mpl']['profile']['lengths'], [7, 8])
        self.assertEqual(report['results']['deep_vpt']['profile']['lengths'], [7, 7])
        self.assertEqual(report['config'], self.config.to_dict())

    def test_reproducible(self):
        """
        Two runs differ in timing fields only.
        """
        first = dump_document(strip_timing(run_experiment(self.config)))
        second = dump_document(strip_timing(run_experiment(self.config)))

        self.assertEqual(first, second)
        self.assertNotIn('wall_time', first)
        self.assertNotIn('created', first)
        self.assertIn('loss_curve', first)

    def test_cross_dataset(self):
        """
        Cross-dataset runs report one score per evaluation dataset.
        """
        synthetic = {'num_classes': 3, 'per_class': 3, 'image_noise': 0.05, 'seed': 0}
        config = ExperimentConfig.from_dict(tiny_experiment_doc(
            protocol='cross_dataset',
            seeds=[0],
            datasets={
                'train': {'synthetic': dict(synthetic, name='source')},
                'eval': [{'synthetic': dict(synthetic, name='shifted', prototype_shift=0.3)}],
            },
        ))
        report = run_experiment(config)

        self.assertEqual(
            set(report['results']['mpl']['runs'][0]),
            {'seed', 'train_acc', 'shifted_acc', 'metrics'},
        )
        metrics = report['results']['mpl']['runs'][0]['metrics']
        self.assertEqual(set(metrics['evaluations']), {'shifted'})
        self.assertEqual(len(metrics['evaluations']['shifted']['per_class_accuracy']), 3)


class GradcheckTests(TestCase):
    """
    Tests for `run_gradcheck`.
    """
    def test_passes(self):
        """
        Tape gradients agree with finite differences on a small model.
        """
        outcome = run_gradcheck(ExperimentConfig.from_dict(tiny_experiment_doc()))

        self.assertTrue(outcome.passed, outcome.errors)
        self.assertEqual(outcome.parameter_count, 304)
        self.assertEqual(len(outcome.errors), 6)

    def test_detects_wrong_backward(self):
        """
        A mis-scaled GELU derivative fails the check.
        """
        config = ExperimentConfig.from_dict(tiny_experiment_doc())
        with mock.patch.object(tensor.Gelu, 'backward', corrupted_gelu_backward):
            outcome = run_gradcheck(config)

        self.assertFalse(outcome.passed)
        self.assertGreater(outcome.max_error, 1e-2)

    def test_nothing_trainable(self):
        """
        A prompt-free model has nothing to check.
        """
        config = ExperimentConfig.from_dict(tiny_experiment_doc(schedules={'none': {'kind': 'none'}}))
        with self.assertRaises(ContractError):
            run_gradcheck(config)

    def test_too_large(self):
        """
        Oversize trainable sets are refused with guidance.
        """
        config = ExperimentConfig.from_dict(tiny_experiment_doc(gradcheck={'max_parameters': 10}))
        with self.assertRaises(ConfigError) as context:
            run_gradcheck(config)
        self.assertIn('304', str(context.exception))


class ProfileTests(TestCase):
    """
    Tests for `run_profile`.
    """
    def test_profile(self):
        """
        Deep prompting with sixteen tokens keeps 213 rows per layer.
        """
        profile = run_profile({'kind': 'deep_vpt', 'add': 16}, 196, 12, 768)

        self.assertEqual(profile.lengths, [213] * 12)
        self.assertGreater(profile.cost, 0.0)
