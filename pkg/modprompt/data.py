"""
Few-shot datasets: synthetic generation, sampling, class splits and the
on-disk format.

On disk a dataset is a directory with `manifest.yaml` and `images.bin`. The
binary file starts with a 16-byte little-endian header

    magic b"MPDS" | version u32 | N u32 | H u16 | W u16

followed by N·H·W·3 float64 values, row-major (image, row, column, channel).
"""
import logging
import os
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .documents import dump_document, load_document
from .exceptions import ConfigError, DataError, DatasetIOError


logger = logging.getLogger(__name__)

SPLITS = ('base', 'new', 'all')
MAGIC = b'MPDS'
FORMAT_VERSION = 1
HEADER = np.dtype([
    ('magic', 'S4'),
    ('version', '<u4'),
    ('count', '<u4'),
    ('height', '<u2'),
    ('width', '<u2'),
])
MANIFEST = 'manifest.yaml'
IMAGES = 'images.bin'
RESERVED_TOKENS = 5


@dataclass(eq=False)
class FewShotDataset:
    """
    Labelled images plus the token ids of every class name.
    """
    images: np.ndarray
    labels: np.ndarray
    class_names: List[Tuple[int, ...]]
    split_tag: str = 'all'
    name: str = 'synthetic'
    source_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = [tuple(int(t) for t in name) for name in self.class_names]
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise DataError('Images must be N×H×W×3, got {}.'.format(self.images.shape))
        if len(self.images) != len(self.labels):
            raise DataError(
                '{} images but {} labels.'.format(len(self.images), len(self.labels)),
            )
        if len(self.labels) and not 0 <= self.labels.min() <= self.labels.max() < self.num_classes:
            raise DataError(
                'Labels must lie in [0, {}).'.format(self.num_classes),
            )
        if self.split_tag not in SPLITS:
            raise DataError('Unknown split tag `{}`.'.format(self.split_tag))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def geometry(self) -> Tuple[int, int]:
        """
        :return: image height and width
        """
        return self.images.shape[1], self.images.shape[2]

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, indices: Sequence[int]) -> 'FewShotDataset':
        """
        :return: the selected examples, with their indices into this dataset
        """
        indices = np.asarray(indices, dtype=np.int64)
        source = self.source_indices[indices] if self.source_indices is not None else indices
        return replace(
            self,
            images=self.images[indices],
            labels=self.labels[indices],
            source_indices=source,
        )

    def without(self, other: 'FewShotDataset') -> 'FewShotDataset':
        """
        :param other: a subset of this dataset
        :return: the examples of this dataset not in `other`
        """
        if other.source_indices is None:
            raise DataError('`other` does not record where it was sampled from.')
        own = (
            self.source_indices
            if self.source_indices is not None else np.arange(len(self))
        )
        keep = np.flatnonzero(~np.isin(own, other.source_indices))
        return self.subset(keep)

    def select_classes(self, classes: Sequence[int], split_tag: str = 'all') -> 'FewShotDataset':
        """
        Keep the examples of `classes`, relabelled 0..len(classes)-1 in the
        given order.
        """
        classes = [int(c) for c in classes]
        remap = np.full(self.num_classes, -1, dtype=np.int64)
        remap[classes] = np.arange(len(classes))
        keep = np.flatnonzero(np.isin(self.labels, classes))
        picked = self.subset(keep)
        return replace(
            picked,
            labels=remap[picked.labels],
            class_names=[self.class_names[c] for c in classes],
            split_tag=split_tag,
        )


def _class_names(
        rng: np.random.Generator,
        count: int,
        length: int,
        vocab_size: int,
) -> List[Tuple[int, ...]]:
    available = vocab_size - RESERVED_TOKENS
    if available < 1 or available ** length < count:
        raise ConfigError(
            'A vocabulary of {} cannot name {} classes with {} tokens.'.format(
                vocab_size, count, length,
            ),
        )
    names: List[Tuple[int, ...]] = []
    seen = set()
    while len(names) < count:
        name = tuple(int(t) for t in rng.integers(RESERVED_TOKENS, vocab_size, size=length))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def make_synthetic_dataset(
        num_classes: int,
        per_class: int,
        image_noise: float,
        seed: int,
        *,
        image_size: int = 16,
        patch_size: int = 4,
        vocab_size: int = 64,
        name_length: int = 2,
        prototype_shift: float = 0.0,
        name: str = 'synthetic',
) -> FewShotDataset:
    """
    Classes are random patch-pattern prototypes; samples add Gaussian pixel
    noise and are clipped to [0, 1].

    :param num_classes: C ≥ 2
    :param per_class: examples per class
    :param image_noise: standard deviation of the pixel noise
    :param seed: generator seed, equal seeds give identical datasets
    :param image_size: square image side
    :param patch_size: side of the constant-colour blocks of a prototype
    :param vocab_size: class-name ids are drawn below this
    :param name_length: tokens per class name
    :param prototype_shift: blend weight towards a second random pattern,
        giving a shifted copy of the same classes
    :param name: dataset name
    """
    if num_classes < 2:
        raise ConfigError('At least 2 classes are needed, got {}.'.format(num_classes))
    if per_class < 1 or image_noise < 0 or image_size % patch_size:
        raise ConfigError(
            'Invalid synthetic dataset parameters: per_class={}, image_noise={}, '
            'image_size={}, patch_size={}.'.format(
                per_class, image_noise, image_size, patch_size,
            ),
        )
    if not 0.0 <= prototype_shift <= 1.0:
        raise ConfigError('`prototype_shift` must lie in [0, 1].')

    rng = np.random.default_rng(seed)
    cells = image_size // patch_size
    coarse = rng.uniform(0.0, 1.0, size=(num_classes, cells, cells, 3))
    class_names = _class_names(rng, num_classes, name_length, vocab_size)
    if prototype_shift:
        other = rng.uniform(0.0, 1.0, size=coarse.shape)
        coarse = (1.0 - prototype_shift) * coarse + prototype_shift * other
    prototypes = coarse.repeat(patch_size, axis=1).repeat(patch_size, axis=2)

    labels = np.arange(num_classes).repeat(per_class)
    noise = rng.normal(0.0, 1.0, size=(len(labels), image_size, image_size, 3))
    images = np.clip(prototypes[labels] + image_noise * noise, 0.0, 1.0)

    return FewShotDataset(images, labels, class_names, name=name)


def sample_few_shot(dataset: FewShotDataset, shots: int, seed: int) -> FewShotDataset:
    """
    Draw exactly `shots` examples per class.

    :raise: DataError if a class is too small
    """
    rng = np.random.default_rng(seed)
    picked = []
    for label in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == label)
        if len(members) < shots:
            raise DataError(
                'Class {} has {} examples, {} shots requested.'.format(
                    label, len(members), shots,
                ),
            )
        picked.append(np.sort(rng.choice(members, size=shots, replace=False)))

    return dataset.subset(np.concatenate(picked) if picked else [])


def save_dataset(dataset: FewShotDataset, directory: str):
    """
    Write the manifest and the binary image file.
    """
    height, width = dataset.geometry
    manifest = {
        'name': dataset.name,
        'version': FORMAT_VERSION,
        'split_tag': dataset.split_tag,
        'num_classes': dataset.num_classes,
        'class_names': [list(name) for name in dataset.class_names],
        'counts': dataset.class_counts(),
        'geometry': {'count': len(dataset), 'height': height, 'width': width, 'channels': 3},
        'labels': dataset.labels.tolist(),
        'images': IMAGES,
    }
    header = np.zeros(1, dtype=HEADER)
    header[0] = (MAGIC, FORMAT_VERSION, len(dataset), height, width)
    try:
        os.makedirs(directory, exist_ok=True)
        dump_document(manifest, os.path.join(directory, MANIFEST))
        with open(os.path.join(directory, IMAGES), 'wb') as stream:
            stream.write(header.tobytes())
            stream.write(dataset.images.astype('<f8').tobytes())
    except OSError as error:
        raise DatasetIOError('Cannot write dataset to {}: {}'.format(directory, error)) from error
    logger.info('Saved %d images of %s to %s.', len(dataset), dataset.name, directory)


def load_dataset(directory: str) -> FewShotDataset:
    """
    :raise: DatasetIOError for missing, truncated or inconsistent files
    """
    try:
        manifest = load_document(os.path.join(directory, MANIFEST))
        with open(os.path.join(directory, manifest.get('images', IMAGES)), 'rb') as stream:
            raw = stream.read()
    except OSError as error:
        raise DatasetIOError('Cannot read dataset {}: {}'.format(directory, error)) from error

    if len(raw) < HEADER.itemsize:
        raise DatasetIOError('{}: image file is shorter than its header.'.format(directory))
    header = np.frombuffer(raw[:HEADER.itemsize], dtype=HEADER)[0]
    if header['magic'] != MAGIC or header['version'] != FORMAT_VERSION:
        raise DatasetIOError(
            '{}: unsupported image file (magic {!r}, version {}).'.format(
                directory, header['magic'], header['version'],
            ),
        )
    count, height, width = int(header['count']), int(header['height']), int(header['width'])
    geometry = manifest.get('geometry', {})
    if (geometry.get('count'), geometry.get('height'), geometry.get('width')) != (count, height, width):
        raise DatasetIOError('{}: manifest geometry disagrees with the image header.'.format(directory))

    values = np.frombuffer(raw[HEADER.itemsize:], dtype='<f8')
    if values.size != count * height * width * 3:
        raise DatasetIOError(
            '{}: expected {} values, found {}.'.format(
                directory, count * height * width * 3, values.size,
            ),
        )

    return FewShotDataset(
        images=values.reshape(count, height, width, 3).astype(np.float64),
        labels=manifest['labels'],
        class_names=manifest['class_names'],
        split_tag=manifest.get('split_tag', 'all'),
        name=manifest.get('name', os.path.basename(directory)),
    )
