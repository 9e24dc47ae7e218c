"""
Dense 64-bit tensors with a dynamic tape for reverse-mode differentiation.

Tokens are rows: every two-dimensional operation below is row-wise, which
keeps prompt insertion and removal a matter of stacking and slicing rows.
"""
import contextlib
import logging
import math
import threading
from typing import (
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .exceptions import (
    BoundsError,
    ContractError,
    DeterminismError,
    DimensionError,
    NumericError,
)


logger = logging.getLogger(__name__)

DTYPE = np.float64
LAYERNORM_EPS = 1e-5
GELU_CUBIC = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)

ArrayLike = Union[np.ndarray, float, int, Sequence]
Gradients = Sequence[Optional[np.ndarray]]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """
    :return: whether new operations are recorded on the tape in this thread
    """
    return getattr(_grad_mode, 'enabled', True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Evaluate without recording operations (evaluation, finite differences).
    """
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Function:
    """
    Differentiable operation.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient per input (`None` for no flow).
    """
    def __init__(self, *inputs: 'Tensor'):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        """
        Compute the output array.
        """
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Gradients:
        """
        Compute gradients with respect to the inputs.
        """
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: 'Tensor', **kwargs) -> 'Tensor':
        """
        Run the operation and record it if any input takes part in gradients.

        :param inputs: input tensors
        :return: output tensor
        """
        func = cls(*inputs)
        data = func.forward(*(tensor.data for tensor in inputs), **kwargs)
        track = is_grad_enabled() and any(t.grad_enabled for t in inputs)

        return Tensor(data, grad_enabled=track, creator=func if track else None)


class Tensor:
    """
    Dense array of 64-bit floats with an optional gradient buffer.

    Data is treated as immutable once built; parameter leaves are only
    updated in place by the optimizer and by the finite-difference checker.
    """
    def __init__(
            self,
            data: ArrayLike,
            *,
            grad_enabled: bool = False,
            creator: Function = None,
    ):
        """
        :param data: values, copied into a fresh float64 array
        :param grad_enabled: whether backward populates `grad`
        :param creator: operation that produced this tensor, if recorded
        """
        self.data = np.array(data, dtype=DTYPE)
        self.grad_enabled = grad_enabled
        self.grad: Optional[np.ndarray] = None
        self.creator = creator

    @classmethod
    def zeros(cls, *shape: int, grad_enabled: bool = False) -> 'Tensor':
        """
        :return: zero tensor of the given shape
        """
        return cls(np.zeros(shape), grad_enabled=grad_enabled)

    @classmethod
    def ones(cls, *shape: int, grad_enabled: bool = False) -> 'Tensor':
        """
        :return: tensor of ones of the given shape
        """
        return cls(np.ones(shape), grad_enabled=grad_enabled)

    @classmethod
    def normal(
            cls,
            rng: np.random.Generator,
            *shape: int,
            std: float = 1.0,
            grad_enabled: bool = False,
    ) -> 'Tensor':
        """
        :param rng: seeded generator
        :param shape: extents
        :param std: standard deviation of the zero-mean normal draw
        :return: random tensor
        """
        return cls(rng.normal(0.0, std, size=shape), grad_enabled=grad_enabled)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def rows(self) -> int:
        """
        :return: number of rows of a two-dimensional tensor
        """
        return self.data.shape[0]

    def item(self) -> float:
        """
        :return: the single value of a scalar tensor
        """
        if self.size != 1:
            raise ContractError(
                'item() needs a single value, got shape {}'.format(self.shape),
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """
        :return: a copy of the values
        """
        return self.data.copy()

    def detach(self) -> 'Tensor':
        """
        :return: same values, cut from the tape
        """
        return Tensor(self.data)

    def zero_grad(self):
        """
        Drop the gradient buffer.
        """
        self.grad = None

    def backward(self):
        """
        Shorthand for `backward(self)`.
        """
        backward(self)

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __mul__(self, other: 'Tensor') -> 'Tensor':
        return mul(self, other)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __repr__(self) -> str:
        return 'Tensor(shape={}, grad_enabled={})'.format(
            self.shape,
            self.grad_enabled,
        )


class ComputeGraph:
    """
    Recorded operations reachable from a tensor, in topological order.
    """
    def __init__(self, nodes: List[Tensor]):
        """
        :param nodes: tensors ordered so that inputs precede their outputs
        """
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> 'ComputeGraph':
        """
        Collect every grad-enabled tensor the loss depends on.

        :param loss: the output the graph is rooted at
        :return: the graph
        """
        order: List[Tensor] = []
        visited = set()
        stack = [(loss, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.inputs:
                    if parent.grad_enabled and id(parent) not in visited:
                        stack.append((parent, False))

        return cls(order)

    def backward(self, seed: np.ndarray):
        """
        Propagate `seed` from the last node back to every node exactly once.
        Gradients are accumulated into the `grad` buffers.
        """
        pending: Dict[int, np.ndarray] = {id(self.nodes[-1]): seed}

        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue

            node.grad = grad.copy() if node.grad is None else node.grad + grad

            if node.creator is None:
                continue
            input_grads = node.creator.backward(grad)
            for parent, parent_grad in zip(node.creator.inputs, input_grads):
                if parent_grad is None or not parent.grad_enabled:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


def backward(loss: Tensor):
    """
    Populate `grad` of every grad-enabled ancestor of a scalar loss.

    Repeated calls accumulate into the existing buffers; reset them with
    `zero_grad` first to get fresh gradients.

    :param loss: scalar tensor connected to the tape
    """
    if loss.size != 1:
        raise ContractError(
            'backward() needs a scalar loss, got shape {}'.format(loss.shape),
        )
    if not loss.grad_enabled:
        raise ContractError('Loss is not connected to any grad-enabled tensor.')

    graph = ComputeGraph.from_loss(loss)
    logger.debug('Backward over %d recorded tensors.', len(graph.nodes))
    graph.backward(np.ones_like(loss.data))


def _require_matrix(name: str, array: np.ndarray):
    if array.ndim != 2:
        raise DimensionError(
            '{} needs a two-dimensional tensor, got shape {}'.format(
                name,
                array.shape,
            ),
        )


class MatMul(Function):
    """
    Matrix product.
    """
    def forward(self, a, b):
        _require_matrix('matmul', a)
        _require_matrix('matmul', b)
        if a.shape[1] != b.shape[0]:
            raise DimensionError(
                'matmul: inner extents differ for shapes {} and {}'.format(
                    a.shape,
                    b.shape,
                ),
            )
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Concat(Function):
    """
    Stack blocks along one axis.
    """
    def forward(self, *blocks, axis: int = 0):
        if not blocks:
            raise DimensionError('concat needs at least one block')
        other = 1 - axis
        for block in blocks:
            _require_matrix('concat', block)
            if block.shape[other] != blocks[0].shape[other]:
                raise DimensionError(
                    'concat: blocks of shapes {} do not agree on axis {}'.format(
                        [b.shape for b in blocks],
                        other,
                    ),
                )
        self.axis = axis
        self.offsets = np.cumsum([0] + [b.shape[axis] for b in blocks])
        return np.concatenate(blocks, axis=axis)

    def backward(self, grad):
        return [
            np.take(grad, range(start, stop), axis=self.axis)
            for start, stop in zip(self.offsets[:-1], self.offsets[1:])
        ]


class Slice(Function):
    """
    Contiguous range along one axis.
    """
    def forward(self, array, start: int = 0, stop: int = 0, axis: int = 0):
        _require_matrix('slice', array)
        extent = array.shape[axis]
        if not 0 <= start <= stop <= extent:
            raise BoundsError(
                'slice [{}, {}) out of range for extent {} of shape {}'.format(
                    start,
                    stop,
                    extent,
                    array.shape,
                ),
            )
        self.shape, self.start, self.stop, self.axis = (
            array.shape, start, stop, axis,
        )
        return np.take(array, range(start, stop), axis=axis)

    def backward(self, grad):
        full = np.zeros(self.shape)
        if self.axis == 0:
            full[self.start:self.stop] = grad
        else:
            full[:, self.start:self.stop] = grad
        return (full,)


class Transpose(Function):
    """
    Swap the two axes of a matrix.
    """
    def forward(self, array):
        _require_matrix('transpose', array)
        return array.T

    def backward(self, grad):
        return (grad.T,)


class Reshape(Function):
    """
    Same values, new extents.
    """
    def forward(self, array, shape: Tuple[int, ...] = ()):
        if int(np.prod(shape)) != array.size:
            raise DimensionError(
                'cannot reshape {} into {}'.format(array.shape, shape),
            )
        self.shape = array.shape
        return array.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def _broadcast_rows(name: str, a: np.ndarray, b: np.ndarray):
    """
    Allow equal shapes, or `b` as a single row added to every row of `a`.
    """
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.shape == (1, a.shape[1]):
        return True
    raise DimensionError(
        '{}: shapes {} and {} are incompatible'.format(name, a.shape, b.shape),
    )


class Add(Function):
    """
    Elementwise sum, with row broadcast of the second operand.
    """
    def forward(self, a, b):
        self.broadcast = _broadcast_rows('add', a, b)
        return a + b

    def backward(self, grad):
        if self.broadcast:
            return grad, grad.sum(axis=0, keepdims=True)
        return grad, grad


class Mul(Function):
    """
    Elementwise product, with row broadcast of the second operand.
    """
    def forward(self, a, b):
        self.broadcast = _broadcast_rows('mul', a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        grad_b = grad * self.a
        if self.broadcast:
            grad_b = grad_b.sum(axis=0, keepdims=True)
        return grad * self.b, grad_b


class Scale(Function):
    """
    Multiplication by a constant.
    """
    def forward(self, array, factor: float = 1.0):
        self.factor = factor
        return array * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Gelu(Function):
    """
    GELU, tanh approximation.
    """
    def forward(self, array):
        self.x = array
        self.t = np.tanh(GELU_SCALE * (array + GELU_CUBIC * array ** 3))
        return 0.5 * array * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        inner = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * inner),)


class LayerNormRows(Function):
    """
    Per-row standardization, no affine part.
    """
    def forward(self, array):
        _require_matrix('layernorm_rows', array)
        if array.shape[1] < 1:
            raise DimensionError('layernorm_rows needs at least one column')
        centered = array - array.mean(axis=1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(
            (centered ** 2).mean(axis=1, keepdims=True) + LAYERNORM_EPS,
        )
        self.normed = centered * self.inv_std
        return self.normed

    def backward(self, grad):
        normed = self.normed
        return (self.inv_std * (
            grad
            - grad.mean(axis=1, keepdims=True)
            - normed * (grad * normed).mean(axis=1, keepdims=True)
        ),)


class L2NormalizeRows(Function):
    """
    Scale every row to unit Euclidean norm.
    """
    def forward(self, array):
        _require_matrix('l2_normalize_rows', array)
        if array.shape[1] < 1:
            raise DimensionError('l2_normalize_rows needs at least one column')
        self.norm = np.sqrt((array ** 2).sum(axis=1, keepdims=True))
        zero_rows = np.flatnonzero(self.norm[:, 0] == 0.0)
        if zero_rows.size:
            raise NumericError(
                'l2_normalize_rows: rows {} have zero norm'.format(
                    zero_rows.tolist(),
                ),
            )
        self.out = array / self.norm
        return self.out

    def backward(self, grad):
        out = self.out
        return ((grad - out * (grad * out).sum(axis=1, keepdims=True))
                / self.norm,)


class SoftmaxRows(Function):
    """
    Row-wise softmax, max-subtracted.
    """
    def forward(self, array):
        _require_matrix('softmax_rows', array)
        if not np.all(np.isfinite(array)):
            raise NumericError('softmax_rows: input has non-finite entries')
        shifted = np.exp(array - array.max(axis=1, keepdims=True))
        self.out = shifted / shifted.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad):
        out = self.out
        return (out * (grad - (grad * out).sum(axis=1, keepdims=True)),)


class SumAll(Function):
    """
    Sum of every entry, as a scalar.
    """
    def forward(self, array):
        self.shape = array.shape
        return np.array(array.sum())

    def backward(self, grad):
        return (np.full(self.shape, float(grad)),)


class MeanAll(Function):
    """
    Mean of every entry, as a scalar.
    """
    def forward(self, array):
        self.shape = array.shape
        return np.array(array.mean())

    def backward(self, grad):
        return (np.full(self.shape, float(grad) / max(1, int(np.prod(self.shape)))),)


class EmbeddingLookup(Function):
    """
    Gather table rows by id.
    """
    def forward(self, table, ids: Sequence[int] = ()):
        _require_matrix('embedding_lookup', table)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.shape = table.shape
        return table[self.ids]

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.ids, grad)
        return (full,)


class ExtractPatches(Function):
    """
    Cut an H×W×C image into non-overlapping square patches, one per row.

    Rows follow the patch grid row-major; within a row values run over pixel
    row, pixel column, then channel.
    """
    def forward(self, image, patch: int = 1):
        if image.ndim != 3:
            raise DimensionError(
                'extract_patches needs an H×W×C image, got {}'.format(image.shape),
            )
        height, width, channels = image.shape
        self.shape, self.patch = image.shape, patch
        grid = image.reshape(height // patch, patch, width // patch, patch, channels)
        return grid.transpose(0, 2, 1, 3, 4).reshape(-1, patch * patch * channels)

    def backward(self, grad):
        height, width, channels = self.shape
        patch = self.patch
        grid = grad.reshape(height // patch, width // patch, patch, patch, channels)
        return (grid.transpose(0, 2, 1, 3, 4).reshape(self.shape),)


class NLLLoss(Function):
    """
    Mean negative log probability of the labelled columns.
    """
    def forward(self, probs, labels: Sequence[int] = ()):
        _require_matrix('nll_loss', probs)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.probs = probs
        rows = np.arange(probs.shape[0])
        with np.errstate(divide='ignore'):
            return np.array(-np.log(probs[rows, self.labels]).mean())

    def backward(self, grad):
        count = self.probs.shape[0]
        rows = np.arange(count)
        full = np.zeros(self.probs.shape)
        full[rows, self.labels] = -float(grad) / (count * self.probs[rows, self.labels])
        return (full,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    :return: a·b for a: m×k and b: k×n
    """
    return MatMul.apply(a, b)


def concat_rows(blocks: Sequence[Tensor]) -> Tensor:
    """
    Stack blocks of equal width in list order.
    """
    return Concat.apply(*blocks, axis=0)


def concat_cols(blocks: Sequence[Tensor]) -> Tensor:
    """
    Place blocks of equal height side by side.
    """
    return Concat.apply(*blocks, axis=1)


def slice_rows(tensor: Tensor, start: int, stop: int) -> Tensor:
    """
    :return: rows `start` (inclusive) to `stop` (exclusive)
    """
    return Slice.apply(tensor, start=start, stop=stop, axis=0)


def slice_cols(tensor: Tensor, start: int, stop: int) -> Tensor:
    """
    :return: columns `start` (inclusive) to `stop` (exclusive)
    """
    return Slice.apply(tensor, start=start, stop=stop, axis=1)


def transpose(tensor: Tensor) -> Tensor:
    return Transpose.apply(tensor)


def reshape(tensor: Tensor, *shape: int) -> Tensor:
    return Reshape.apply(tensor, shape=shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(tensor: Tensor, factor: float) -> Tensor:
    return Scale.apply(tensor, factor=factor)


def gelu(tensor: Tensor) -> Tensor:
    return Gelu.apply(tensor)


def layernorm_rows(tensor: Tensor) -> Tensor:
    """
    Rows to mean 0 and variance 1, stabilized with `LAYERNORM_EPS`.
    """
    return LayerNormRows.apply(tensor)


def l2_normalize_rows(tensor: Tensor) -> Tensor:
    """
    Rows to unit norm. A zero row raises `NumericError`.
    """
    return L2NormalizeRows.apply(tensor)


def softmax_rows(tensor: Tensor) -> Tensor:
    return SoftmaxRows.apply(tensor)


def sum_all(tensor: Tensor) -> Tensor:
    return SumAll.apply(tensor)


def mean_all(tensor: Tensor) -> Tensor:
    return MeanAll.apply(tensor)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    return EmbeddingLookup.apply(table, ids=list(ids))


def extract_patches(image: Tensor, patch: int) -> Tensor:
    return ExtractPatches.apply(image, patch=patch)


def nll_loss(probs: Tensor, labels: Sequence[int]) -> Tensor:
    return NLLLoss.apply(probs, labels=list(labels))


def finite_diff_check(
        evaluate: Callable[[], Tensor],
        param: Tensor,
        eps: float = 1e-5,
        coordinates: Iterable[Tuple[int, ...]] = None,
) -> float:
    """
    Compare the tape gradient of a scalar function against central
    differences.

    :param evaluate: builds the scalar loss from the current parameter values
    :param param: grad-enabled leaf to perturb
    :param eps: half-width of the central difference
    :param coordinates: indices to perturb, all of them by default
    :return: max over coordinates of
        |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    if eps <= 0:
        raise ContractError('eps must be positive, got {}'.format(eps))
    if not param.grad_enabled:
        raise ContractError('Parameter is not grad-enabled.')

    param.zero_grad()
    loss = evaluate()
    reference = loss.item()
    with no_grad():
        repeated = evaluate().item()
    if repeated != reference:
        raise DeterminismError(
            'Evaluator returned {} then {} for the same parameters.'.format(
                reference,
                repeated,
            ),
        )

    backward(loss)
    analytic = (
        param.grad.copy() if param.grad is not None else np.zeros(param.shape)
    )

    worst = 0.0
    with no_grad():
        for index in coordinates or np.ndindex(*param.shape):
            original = param.data[index]
            param.data[index] = original + eps
            plus = evaluate().item()
            param.data[index] = original - eps
            minus = evaluate().item()
            param.data[index] = original

            numeric = (plus - minus) / (2.0 * eps)
            exact = analytic[index]
            error = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
            worst = max(worst, error)

    logger.debug('Gradient check over %s: max relative error %.3e', param, worst)

    return float(worst)
