"""
Tests for `cli.py`.
"""
import io
import os
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from unittest import TestCase, mock

from .. import tensor
from ..cli import (
    EXIT_CONFIG,
    EXIT_FAILURE,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    REPORT_NAME,
    exit_code,
    main,
)
from ..configuration import Config
from ..documents import dump_document, load_document
from ..exceptions import (
    ConfigError,
    DataError,
    DatasetIOError,
    ScheduleError,
    TrainingAborted,
)
from .fixtures import tiny_experiment_doc
from .test_experiment import corrupted_gelu_backward


class ExitCodeTests(TestCase):
    """
    Tests for `exit_code`.
    """
    def test_mapping(self):
        """
        Every failure class has its own status.
        """
        self.assertEqual(exit_code(ConfigError('x')), EXIT_CONFIG)
        self.assertEqual(exit_code(ScheduleError('x')), EXIT_CONFIG)
        self.assertEqual(exit_code(TrainingAborted(3, float('nan'))), EXIT_NUMERIC)
        self.assertEqual(exit_code(DatasetIOError('x')), EXIT_IO)
        self.assertEqual(exit_code(FileNotFoundError('x')), EXIT_IO)
        self.assertEqual(exit_code(DataError('x')), EXIT_FAILURE)


class CommandTests(TestCase):
    """
    Tests for `main`.
    """
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.directory.cleanup()

    def path(self, name):
        return os.path.join(self.directory.name, name)

    def write(self, name, doc):
        dump_document(doc, self.path(name))
        return self.path(name)

    def call(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with redirect_stdout(stdout), redirect_stderr(stderr):
            status = main(list(argv))
        return status, stdout.getvalue(), stderr.getvalue()

    def test_profile(self):
        """
        `profile` prints the table and writes the lengths.
        """
        schedule = self.write('deep.yaml', {'kind': 'deep_vpt', 'add': 16})
        status, output, _ = self.call(
            'profile', schedule, '--patches', '196', '--layers', '12', '--out', self.path('p.yaml'),
        )

        self.assertEqual(status, EXIT_OK)
        self.assertIn('213', output)
        self.assertEqual(load_document(self.path('p.yaml'))['lengths'], [213] * 12)

    def test_profile_invalid_schedule(self):
        """
        An impossible schedule exits with the configuration status.
        """
        schedule = self.write('bad.yaml', {'kind': 'mpl', 'add': 1, 'remove': 2, 'depth': 1})
        status, _, error = self.call('profile', schedule, '--patches', '4', '--layers', '2')

        self.assertEqual(status, EXIT_CONFIG)
        self.assertIn('remove_count <= add_count', error)

    def test_run(self):
        """
        `run` writes a report holding every seed.
        """
        config = self.write('experiment.yaml', tiny_experiment_doc())
        status, output, _ = self.call('run', config, '--out', self.path('report.yaml'))

        self.assertEqual(status, EXIT_OK)
        self.assertEqual(output.strip(), self.path('report.yaml'))
        report = load_document(self.path('report.yaml'))
        self.assertEqual(len(report['results']['mpl']['runs']), 2)
        self.assertIn('created', report)

    def test_run_single_seed_default_location(self):
        """
        `--seed` narrows the run; without `--out` the report lands in the
        output directory.
        """
        config = self.write('experiment.yaml', tiny_experiment_doc())
        with mock.patch.object(Config, 'output_dir', self.path('results')):
            status, _, _ = self.call('run', config, '--seed', '5')

        self.assertEqual(status, EXIT_OK)
        report = load_document(os.path.join(self.path('results'), REPORT_NAME))
        self.assertEqual([run['seed'] for run in report['results']['deep_vpt']['runs']], [5])

    def test_run_missing_config(self):
        """
        A missing config file is an I/O failure.
        """
        status, _, error = self.call('run', self.path('absent.yaml'))

        self.assertEqual(status, EXIT_IO)
        self.assertIn('error: ', error)

    def test_run_missing_dataset(self):
        """
        A missing dataset directory is an I/O failure too.
        """
        config = self.write('experiment.yaml', tiny_experiment_doc(
            datasets={'train': {'path': self.path('nowhere')}},
        ))

        self.assertEqual(self.call('run', config)[0], EXIT_IO)

    def test_gradcheck(self):
        """
        `gradcheck` passes on a small model and reports per tensor.
        """
        config = self.write('experiment.yaml', tiny_experiment_doc())
        status, output, _ = self.call('gradcheck', config, '--out', self.path('g.yaml'))

        self.assertEqual(status, EXIT_OK)
        self.assertTrue(output.startswith('pass'))
        self.assertEqual(len(load_document(self.path('g.yaml'))['errors']), 6)

    def test_gradcheck_wrong_backward(self):
        """
        A broken derivative makes `gradcheck` fail with the numeric status.
        """
        config = self.write('experiment.yaml', tiny_experiment_doc())
        with mock.patch.object(tensor.Gelu, 'backward', corrupted_gelu_backward):
            status, output, _ = self.call('gradcheck', config)

        self.assertEqual(status, EXIT_NUMERIC)
        self.assertTrue(output.startswith('fail'))

    def test_gradcheck_refusals(self):
        """
        Nothing to train and too much to check are configuration failures.
        """
        empty = self.write('none.yaml', tiny_experiment_doc(schedules={'none': {'kind': 'none'}}))
        large = self.write('large.yaml', tiny_experiment_doc(gradcheck={'max_parameters': 10}))

        self.assertEqual(self.call('gradcheck', empty)[0], EXIT_CONFIG)
        self.assertEqual(self.call('gradcheck', large)[0], EXIT_CONFIG)

    def test_run_mistyped_fields(self):
        """
        Values of the wrong type are configuration failures naming the field.
        """
        seeds = self.write('seeds.yaml', tiny_experiment_doc(seeds=['x']))
        workers = self.write('workers.yaml', tiny_experiment_doc(workers='two'))

        status, _, error = self.call('run', seeds)
        self.assertEqual(status, EXIT_CONFIG)
        self.assertIn('`seeds`', error)
        status, _, error = self.call('run', workers)
        self.assertEqual(status, EXIT_CONFIG)
        self.assertIn('`workers`', error)
