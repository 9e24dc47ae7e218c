"""
Tests for `data.py`.
"""
import os
import tempfile
from unittest import TestCase

import numpy as np

from ..data import (
    HEADER,
    IMAGES,
    MANIFEST,
    FewShotDataset,
    load_dataset,
    make_synthetic_dataset,
    sample_few_shot,
    save_dataset,
)
from ..documents import dump_document, load_document
from ..exceptions import ConfigError, DataError, DatasetIOError


class SyntheticDatasetTests(TestCase):
    """
    Tests for `make_synthetic_dataset`.
    """
    def test_shapes(self):
        """
        Images, labels and names match the request.
        """
        dataset = make_synthetic_dataset(5, 3, 0.1, 0)

        self.assertEqual(dataset.images.shape, (15, 16, 16, 3))
        self.assertEqual(dataset.class_counts(), [3] * 5)
        self.assertEqual(len(set(dataset.class_names)), 5)
        self.assertTrue(np.all((dataset.images >= 0.0) & (dataset.images <= 1.0)))

    def test_deterministic(self):
        """
        Equal seeds give identical datasets; different seeds do not.
        """
        first = make_synthetic_dataset(4, 2, 0.1, 3)
        second = make_synthetic_dataset(4, 2, 0.1, 3)
        other = make_synthetic_dataset(4, 2, 0.1, 4)

        np.testing.assert_array_equal(first.images, second.images)
        self.assertEqual(first.class_names, second.class_names)
        self.assertFalse(np.array_equal(first.images, other.images))

    def test_noise_free(self):
        """
        Without noise all samples of a class are the prototype.
        """
        dataset = make_synthetic_dataset(3, 4, 0.0, 1)
        for label in range(3):
            members = dataset.images[dataset.labels == label]
            for image in members[1:]:
                np.testing.assert_array_equal(image, members[0])

    def test_linear_separability(self):
        """
        Least squares on raw pixels separates low-noise classes.
        """
        train = make_synthetic_dataset(8, 10, 0.05, 0, image_size=8)
        features = train.images.reshape(len(train), -1)
        targets = np.eye(8)[train.labels]
        solution = np.linalg.lstsq(features, targets, rcond=None)[0]
        predictions = (features @ solution).argmax(axis=1)

        self.assertGreater((predictions == train.labels).mean(), 0.9)

    def test_shifted_prototypes(self):
        """
        A prototype shift keeps names and shape but moves the images.
        """
        base = make_synthetic_dataset(4, 2, 0.0, 2)
        shifted = make_synthetic_dataset(4, 2, 0.0, 2, prototype_shift=0.3)

        self.assertEqual(base.class_names, shifted.class_names)
        self.assertEqual(base.geometry, shifted.geometry)
        self.assertFalse(np.allclose(base.images, shifted.images))

    def test_invalid(self):
        """
        Degenerate requests are configuration errors.
        """
        with self.assertRaises(ConfigError):
            make_synthetic_dataset(1, 3, 0.1, 0)
        with self.assertRaises(ConfigError):
            make_synthetic_dataset(3, 3, -0.1, 0)
        with self.assertRaises(ConfigError):
            make_synthetic_dataset(3, 3, 0.1, 0, image_size=10, patch_size=4)
        with self.assertRaises(ConfigError):
            make_synthetic_dataset(200, 1, 0.1, 0, vocab_size=8, name_length=1)


class FewShotDatasetTests(TestCase):
    """
    Tests for `FewShotDataset` and `sample_few_shot`.
    """
    def setUp(self):
        self.dataset = make_synthetic_dataset(4, 5, 0.1, 0, image_size=8)

    def test_sample_counts(self):
        """
        Exactly `shots` examples per class, reproducibly.
        """
        first = sample_few_shot(self.dataset, 3, 1)
        second = sample_few_shot(self.dataset, 3, 1)

        self.assertEqual(first.class_counts(), [3] * 4)
        np.testing.assert_array_equal(first.source_indices, second.source_indices)

    def test_sample_whole_class(self):
        """
        Asking for every example returns the whole dataset.
        """
        everything = sample_few_shot(self.dataset, 5, 0)

        self.assertEqual(sorted(everything.source_indices.tolist()), list(range(20)))

    def test_sample_too_many(self):
        """
        Classes smaller than the shot count are reported.
        """
        with self.assertRaises(DataError):
            sample_few_shot(self.dataset, 6, 0)

    def test_without(self):
        """
        The complement of a sample holds exactly the remaining examples.
        """
        sample = sample_few_shot(self.dataset, 2, 0)
        rest = self.dataset.without(sample)

        self.assertEqual(len(rest), 12)
        self.assertFalse(set(rest.source_indices.tolist()) & set(sample.source_indices.tolist()))

    def test_select_classes(self):
        """
        Selected classes are relabelled in the given order.
        """
        split = self.dataset.select_classes([2, 3], 'new')

        self.assertEqual(split.split_tag, 'new')
        self.assertEqual(split.class_names, self.dataset.class_names[2:])
        self.assertEqual(split.class_counts(), [5, 5])
        np.testing.assert_array_equal(
            split.images[split.labels == 0], self.dataset.images[self.dataset.labels == 2],
        )

    def test_validation(self):
        """
        Inconsistent contents are rejected.
        """
        images = np.zeros((2, 4, 4, 3))
        with self.assertRaises(DataError):
            FewShotDataset(images, [0, 2], [(5,), (6,)])
        with self.assertRaises(DataError):
            FewShotDataset(images, [0], [(5,), (6,)])
        with self.assertRaises(DataError):
            FewShotDataset(np.zeros((2, 4, 4)), [0, 1], [(5,), (6,)])
        with self.assertRaises(DataError):
            FewShotDataset(images, [0, 1], [(5,), (6,)], split_tag='test')


class PersistenceTests(TestCase):
    """
    Tests for `save_dataset` and `load_dataset`.
    """
    def setUp(self):
        self.dataset = make_synthetic_dataset(3, 2, 0.1, 0, image_size=8, name='toy')
        self.directory = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.directory.name, 'toy')
        save_dataset(self.dataset, self.path)

    def tearDown(self):
        self.directory.cleanup()

    def test_round_trip(self):
        """
        Loading gives back the saved dataset.
        """
        loaded = load_dataset(self.path)

        np.testing.assert_array_equal(loaded.images, self.dataset.images)
        np.testing.assert_array_equal(loaded.labels, self.dataset.labels)
        self.assertEqual(loaded.class_names, self.dataset.class_names)
        self.assertEqual(loaded.name, 'toy')

    def test_layout(self):
        """
        The image file is the header followed by the float64 payload.
        """
        size = os.path.getsize(os.path.join(self.path, IMAGES))
        manifest = load_document(os.path.join(self.path, MANIFEST))

        self.assertEqual(HEADER.itemsize, 16)
        self.assertEqual(size, 16 + 6 * 8 * 8 * 3 * 8)
        self.assertEqual(manifest['geometry'], {'count': 6, 'height': 8, 'width': 8, 'channels': 3})
        self.assertEqual(manifest['counts'], [2, 2, 2])

    def test_corrupted_magic(self):
        """
        A wrong magic number is an I/O error.
        """
        with open(os.path.join(self.path, IMAGES), 'r+b') as stream:
            stream.write(b'XXXX')
        with self.assertRaises(DatasetIOError):
            load_dataset(self.path)

    def test_truncated(self):
        """
        A short payload is an I/O error.
        """
        images = os.path.join(self.path, IMAGES)
        with open(images, 'rb') as stream:
            raw = stream.read()
        with open(images, 'wb') as stream:
            stream.write(raw[:-8])
        with self.assertRaises(DatasetIOError):
            load_dataset(self.path)

    def test_manifest_disagrees(self):
        """
        Manifest geometry has to match the header.
        """
        manifest_path = os.path.join(self.path, MANIFEST)
        manifest = load_document(manifest_path)
        manifest['geometry']['count'] = 7
        dump_document(manifest, manifest_path)
        with self.assertRaises(DatasetIOError):
            load_dataset(self.path)

    def test_missing(self):
        """
        A missing directory is an I/O error, and an `OSError`.
        """
        with self.assertRaises(DatasetIOError):
            load_dataset(os.path.join(self.directory.name, 'absent'))
        with self.assertRaises(OSError):
            load_dataset(os.path.join(self.directory.name, 'absent'))
