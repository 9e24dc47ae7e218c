"""
Modular prompts: per-layer add / remove / carry schedules on the vision
branch, deep replaced prompts on the text branch and the affine coupling
between them.

A vision layer input is always laid out as

    [new prompts | carried prompts | class token | patches]

and removal drops the leading rows of the new block, so survivors and the
carried block stay contiguous.
"""
import logging
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

from . import tensor as T
from .exceptions import ModPromptError, ScheduleError
from .tensor import Tensor
from .transformer import (
    INIT_STD,
    EmbeddingParams,
    LayerParams,
    encoder_layer_forward,
    patch_embed,
    token_embed,
)


logger = logging.getLogger(__name__)

ATTENTION_FLOPS = 4
PROJECTION_FLOPS = 24

LayerHook = Callable[[int, Tensor, 'LayerOps'], Tensor]


@dataclass(frozen=True)
class LayerOps:
    """
    Operations applied around one vision layer.

    :param add: prompts inserted at the layer input
    :param remove: prompts dropped from the layer output
    :param carry: whether surviving prompts flow into the next layer
    """
    add: int = 0
    remove: int = 0
    carry: bool = True

    @property
    def is_identity(self) -> bool:
        return self.add == 0 and self.remove == 0 and self.carry

    def to_dict(self) -> Mapping[str, Any]:
        return {'add': self.add, 'remove': self.remove, 'carry': self.carry}


def _carry_flag(entry: Mapping[str, Any], index: int) -> bool:
    carry = entry.get('carry', True)
    if not isinstance(carry, bool):
        raise ScheduleError(
            '`carry` must be true or false, got {!r}.'.format(carry),
            invariant='carry is a boolean',
            layer=index + 1,
        )
    return carry


class PromptSchedule:
    """
    Per-layer plan of prompt operations for the vision encoder.
    """
    def __init__(self, layers: Sequence[LayerOps]):
        """
        :raise: ScheduleError if any invariant is violated
        :param layers: one entry per encoder layer
        """
        self.layers: Tuple[LayerOps, ...] = tuple(layers)
        self.validate()

    def validate(self):
        """
        Check counts and the removal constraint layer by layer.
        """
        if not self.layers:
            raise ScheduleError(
                'A schedule needs at least one layer.',
                invariant='num_layers >= 1',
            )
        for number, ops in enumerate(self.layers, 1):
            if ops.add < 0 or ops.remove < 0:
                raise ScheduleError(
                    'counts must be nonnegative, got add={} remove={}.'.format(
                        ops.add,
                        ops.remove,
                    ),
                    invariant='add_count >= 0 and remove_count >= 0',
                    layer=number,
                )
            if ops.remove > ops.add:
                raise ScheduleError(
                    'cannot remove {} prompts when {} were inserted and {} are '
                    'carried in; removal only draws from prompts inserted at '
                    'the same layer.'.format(
                        ops.remove,
                        ops.add,
                        self.carried_counts()[number - 1],
                    ),
                    invariant='0 <= kept <= inserted (remove_count <= add_count)',
                    layer=number,
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def depth(self) -> int:
        """
        :return: number of leading layers holding an add or remove operation
        """
        active = [
            number
            for number, ops in enumerate(self.layers, 1)
            if ops.add or ops.remove
        ]
        return max(active, default=0)

    def carried_counts(self) -> List[int]:
        """
        Prompt counts entering each layer, plus the count after the last one.

        :return: q_1 .. q_{ℓ+1} with q_1 = 0
        """
        counts = [0]
        for ops in self.layers:
            kept = counts[-1] + ops.add - ops.remove
            counts.append(kept if ops.carry else 0)
        return counts

    def __getitem__(self, index: int) -> LayerOps:
        return self.layers[index]

    def __iter__(self) -> Iterator[LayerOps]:
        return iter(self.layers)

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, PromptSchedule) and self.layers == other.layers

    def __repr__(self) -> str:
        return 'PromptSchedule({})'.format(
            ', '.join(
                '{}/{}{}'.format(ops.add, ops.remove, '' if ops.carry else '!')
                for ops in self.layers
            ),
        )

    def to_dict(self) -> Mapping[str, Any]:
        """
        :return: explicit document form of the schedule
        """
        return {
            'num_layers': self.num_layers,
            'layers': [ops.to_dict() for ops in self.layers],
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], num_layers: int = None) -> 'PromptSchedule':
        """
        Build a schedule from its document form.

        Either an explicit `layers` list (padded with identity entries up to
        `num_layers`) or a `kind` shorthand: `mpl` (add, remove, depth),
        `deep_vpt` (add), `shallow` (add) or `none`.

        :param doc: parsed document
        :param num_layers: encoder depth, overrides the document's own
        """
        if not isinstance(doc, Mapping):
            raise ScheduleError('A schedule document must be a mapping.')
        num_layers = num_layers or doc.get('num_layers')
        if not num_layers:
            raise ScheduleError(
                'The number of layers is unknown.',
                invariant='num_layers >= 1',
            )

        try:
            kind = doc.get('kind')
            if kind is None:
                entries = [
                    LayerOps(
                        add=int(entry.get('add', 0)),
                        remove=int(entry.get('remove', 0)),
                        carry=_carry_flag(entry, index),
                    )
                    for index, entry in enumerate(doc.get('layers', []))
                ]
                if len(entries) > num_layers:
                    raise ScheduleError(
                        '{} entries for {} layers.'.format(len(entries), num_layers),
                        invariant='len(layers) <= num_layers',
                    )
                return cls(entries + [LayerOps()] * (num_layers - len(entries)))
            if kind == 'mpl':
                return mpl(
                    int(doc['add']),
                    int(doc['remove']),
                    int(doc['depth']),
                    num_layers,
                )
            if kind == 'deep_vpt':
                return deep_vpt(int(doc['add']), num_layers)
            if kind == 'shallow':
                return shallow(int(doc['add']), num_layers)
            if kind == 'none':
                return no_prompts(num_layers)
        except KeyError as error:
            raise ScheduleError(
                'schedule of kind `{}` is missing `{}`.'.format(doc.get('kind'), error.args[0]),
            ) from error
        except (TypeError, ValueError, AttributeError) as error:
            raise ScheduleError('malformed schedule document: {}'.format(error)) from error

        raise ScheduleError('unknown schedule kind `{}`.'.format(kind))


def _check_counts(**counts: int):
    for name, value in counts.items():
        if value < 0:
            raise ScheduleError(
                '`{}` must be nonnegative, got {}.'.format(name, value),
                invariant='{} >= 0'.format(name),
            )


def no_prompts(num_layers: int) -> PromptSchedule:
    """
    :return: schedule without any prompt operation
    """
    return PromptSchedule([LayerOps()] * num_layers)


def deep_vpt(add: int, num_layers: int) -> PromptSchedule:
    """
    Fresh prompts at every layer, all of them removed after it.
    """
    _check_counts(add=add)
    return PromptSchedule([LayerOps(add, add, carry=False)] * num_layers)


def shallow(add: int, num_layers: int) -> PromptSchedule:
    """
    Prompts inserted at the first layer and carried through all others.
    """
    _check_counts(add=add)
    return PromptSchedule([LayerOps(add, 0, True)] + [LayerOps()] * (num_layers - 1))


def mpl(add: int, remove: int, depth: int, num_layers: int) -> PromptSchedule:
    """
    Insert `add` and remove `remove` prompts at each of the first `depth`
    layers, carrying survivors to the end of the encoder.
    """
    _check_counts(add=add, remove=remove, depth=depth)
    if depth > num_layers:
        raise ScheduleError(
            'prompt depth {} exceeds {} layers.'.format(depth, num_layers),
            invariant='prompt_depth <= num_layers',
        )
    return PromptSchedule(
        [LayerOps(add, remove, True)] * depth
        + [LayerOps()] * (num_layers - depth),
    )


@dataclass(frozen=True)
class LayerRecord:
    """
    Bookkeeping for one vision layer.

    Row ranges index the layer input (and output, which has the same rows).
    """
    layer: int
    inserted: range
    carried: range
    removed: range
    kept: int


@dataclass
class PromptState:
    """
    Prompt block flowing between vision layers.
    """
    carried_block: Tensor
    records: List[LayerRecord] = field(default_factory=list)

    @classmethod
    def empty(cls, width: int) -> 'PromptState':
        return cls(Tensor.zeros(0, width))

    @property
    def carried_count(self) -> int:
        return self.carried_block.rows


class CouplingParams:
    """
    Affine maps from text prompts to vision prompts, one per prompted layer.
    """
    def __init__(
            self,
            schedule: PromptSchedule,
            text_width: int,
            vision_width: int,
            rng: np.random.Generator,
            *,
            std: float = INIT_STD,
            grad_enabled: bool = True,
    ):
        """
        :param schedule: decides how many prompts each layer receives
        :param text_width: m·d_t, width of a flattened text prompt block
        :param vision_width: d_v
        :param rng: generator the matrices are drawn from
        """
        self.vision_width = vision_width
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for ops in schedule.layers[:schedule.depth]:
            self.weights.append(Tensor.normal(
                rng, ops.add * vision_width, text_width, std=std,
                grad_enabled=grad_enabled,
            ))
            self.biases.append(
                Tensor.zeros(1, ops.add * vision_width, grad_enabled=grad_enabled),
            )

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for layer, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            yield '{}.{}.weight'.format(prefix, layer), weight
            yield '{}.{}.bias'.format(prefix, layer), bias


class TextPromptParams:
    """
    Learnable text prompt blocks; the first one takes the place of the
    leading template word.
    """
    def __init__(
            self,
            depth: int,
            length: int,
            width: int,
            rng: np.random.Generator,
            *,
            std: float = INIT_STD,
            grad_enabled: bool = True,
    ):
        self.blocks: List[Tensor] = [
            Tensor.normal(rng, length, width, std=std, grad_enabled=grad_enabled)
            for _ in range(depth)
        ]

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for layer, block in enumerate(self.blocks):
            yield '{}.{}'.format(prefix, layer), block


def couple(params: CouplingParams, text_prompt: Tensor, layer: int) -> Tensor:
    """
    Map a layer's text prompt block to that layer's vision prompts.

    :param params: coupling maps
    :param text_prompt: m×d_t text prompt block
    :param layer: 0-based layer index
    :return: p_i×d_v prompts
    """
    if not 0 <= layer < len(params.weights):
        raise ScheduleError(
            'no coupling for a layer beyond the prompt depth {}.'.format(
                len(params.weights),
            ),
            invariant='layer <= prompt_depth',
            layer=layer + 1,
        )
    weight, bias = params.weights[layer], params.biases[layer]
    flat = T.reshape(text_prompt, 1, text_prompt.size)
    out = T.add(T.matmul(flat, T.transpose(weight)), bias)

    return T.reshape(out, weight.rows // params.vision_width, params.vision_width)


def apply_add(state: PromptState, new_prompts: Tensor, x: Tensor, ops: LayerOps) -> Tensor:
    """
    Assemble a layer input as [new prompts; carried prompts; x].

    :param state: carried prompts entering the layer
    :param new_prompts: p_i×d_v prompts inserted now
    :param x: class token and patch rows
    :param ops: the layer's schedule entry
    """
    if new_prompts.rows != ops.add:
        raise ScheduleError(
            '{} prompts given where the schedule inserts {}.'.format(
                new_prompts.rows,
                ops.add,
            ),
            invariant='inserted rows == add_count',
        )
    if not new_prompts.rows and not state.carried_count:
        return x

    return T.concat_rows([new_prompts, state.carried_block, x])


def apply_remove(layer_out: Tensor, ops: LayerOps, carried_in: int = 0) -> Tensor:
    """
    Drop the first `ops.remove` rows of the newly inserted block.

    :param layer_out: layer output in input layout
    :param ops: the layer's schedule entry
    :param carried_in: prompts that entered the layer already carried
    """
    present = ops.add + carried_in
    if ops.remove > ops.add or ops.remove > present:
        raise ScheduleError(
            'cannot remove {} of {} inserted prompts.'.format(ops.remove, ops.add),
            invariant='remove_count <= add_count',
        )
    if not ops.remove:
        return layer_out

    return T.slice_rows(layer_out, ops.remove, layer_out.rows)


def apply_carry(
        remaining: Tensor,
        ops: LayerOps,
        state: PromptState,
        layer: int,
) -> Tuple[PromptState, Tensor]:
    """
    Split the surviving prompts from the image rows and decide whether they
    flow on.

    :param remaining: [survivors; carried; class token; patches]
    :param ops: the layer's schedule entry
    :param state: state that entered the layer
    :param layer: 0-based layer index
    :return: state for the next layer, class token and patch rows
    """
    kept = ops.add - ops.remove + state.carried_count
    if kept > remaining.rows:
        raise ScheduleError(
            '{} surviving prompts but only {} rows.'.format(kept, remaining.rows),
            invariant='prompt rows <= layer rows',
        )
    tokens = T.slice_rows(remaining, kept, remaining.rows) if kept else remaining
    if ops.carry and kept:
        carried = T.slice_rows(remaining, 0, kept)
    else:
        carried = Tensor.zeros(0, remaining.shape[1])

    record = LayerRecord(
        layer=layer,
        inserted=range(0, ops.add),
        carried=range(ops.add, ops.add + state.carried_count),
        removed=range(0, ops.remove),
        kept=carried.rows,
    )

    return PromptState(carried, state.records + [record]), tokens


def run_vision_layers(
        schedule: PromptSchedule,
        coupling: CouplingParams,
        text_prompts: Sequence[Tensor],
        x: Tensor,
        layers: Sequence[LayerParams],
        layer_hook: Optional[LayerHook] = None,
) -> Tuple[Tensor, PromptState]:
    """
    Run the prompted vision stack on embedded rows.

    :param schedule: prompt plan, one entry per layer
    :param coupling: text-to-vision maps
    :param text_prompts: text prompt blocks, one per prompted layer
    :param x: (1 + ξ)×d_v embedded class token and patches
    :param layers: vision layers
    :param layer_hook: called as hook(index, output, ops) after each layer,
        its return value replaces the output
    :return: final class token and patch rows, final prompt state
    """
    if schedule.num_layers != len(layers):
        raise ScheduleError(
            'schedule has {} layers, encoder has {}.'.format(
                schedule.num_layers,
                len(layers),
            ),
            invariant='schedule.num_layers == encoder.num_layers',
        )

    state = PromptState.empty(x.shape[1])
    for index, ops in enumerate(schedule):
        try:
            if ops.add:
                new_prompts = couple(coupling, text_prompts[index], index)
            else:
                new_prompts = Tensor.zeros(0, x.shape[1])
            out = encoder_layer_forward(layers[index], apply_add(state, new_prompts, x, ops))
            if layer_hook is not None:
                out = layer_hook(index, out, ops)
            remaining = apply_remove(out, ops, state.carried_count)
            state, x = apply_carry(remaining, ops, state, index)
        except ModPromptError as error:
            if getattr(error, 'layer', None) is None:
                error.layer = index + 1
                error.args = ('vision layer {}: {}'.format(index + 1, error),)
            raise

    return x, state


def run_vision_encoder(
        schedule: PromptSchedule,
        coupling: CouplingParams,
        text_prompts: Sequence[Tensor],
        image: Tensor,
        *,
        embeddings: EmbeddingParams,
        layers: Sequence[LayerParams],
        layer_hook: Optional[LayerHook] = None,
) -> Tensor:
    """
    Embed an image and run it through the prompted vision stack.

    :return: 1×d_v class-token row of the last layer
    """
    x = patch_embed(embeddings, image)
    tokens, _ = run_vision_layers(
        schedule, coupling, text_prompts, x, layers, layer_hook,
    )

    return T.slice_rows(tokens, 0, 1)


def run_text_encoder(
        text_prompts: Sequence[Tensor],
        class_tokens: Sequence[int],
        *,
        embeddings: EmbeddingParams,
        layers: Sequence[LayerParams],
        template_tokens: Sequence[int] = (),
) -> Tensor:
    """
    Encode `[T_1] template class` with deep replacement of the prompt rows.

    The first prompt block stands in for the leading template word; at every
    later prompted layer its rows are replaced by that layer's block.

    :param text_prompts: m×d_t blocks, one per prompted layer
    :param class_tokens: class-name token ids
    :param embeddings: token and positional tables
    :param layers: text layers
    :param template_tokens: fixed template ids between prompt and class name
    :return: 1×d_t embedding at the final position
    """
    length = text_prompts[0].rows if text_prompts else 0
    if any(block.rows != length for block in text_prompts):
        raise ScheduleError(
            'text prompt blocks differ in length.',
            invariant='equal text prompt lengths',
        )

    tokens = list(template_tokens) + list(class_tokens)
    words = token_embed(embeddings, tokens, offset=length)
    if length:
        lead = T.add(text_prompts[0], T.slice_rows(embeddings.text_positional, 0, length))
        x = T.concat_rows([lead, words])
    else:
        x = words

    for index, layer in enumerate(layers):
        if 0 < index < len(text_prompts):
            x = T.concat_rows([text_prompts[index], T.slice_rows(x, length, x.rows)])
        x = encoder_layer_forward(layer, x)

    return T.slice_rows(x, x.rows - 1, x.rows)


@dataclass
class ContextProfile:
    """
    Context length per vision layer and an analytic forward cost.

    Per layer: ATTENTION_FLOPS·n²·d + PROJECTION_FLOPS·n·d².
    """
    lengths: List[int]
    carried: List[int]
    width: int
    attention_cost: float
    projection_cost: float

    @property
    def cost(self) -> float:
        return self.attention_cost + self.projection_cost

    def to_dict(self) -> Mapping[str, Any]:
        return {
            'lengths': list(self.lengths),
            'carried': list(self.carried),
            'width': self.width,
            'attention_cost': self.attention_cost,
            'projection_cost': self.projection_cost,
            'cost': self.cost,
        }

    def format_table(self) -> str:
        """
        :return: aligned text table, 1-based layer numbers
        """
        lines = ['{:>5}  {:>7}  {:>7}  {:>14}'.format('layer', 'carried', 'length', 'flops')]
        for number, (carried, length) in enumerate(zip(self.carried, self.lengths), 1):
            flops = (
                ATTENTION_FLOPS * length ** 2 * self.width
                + PROJECTION_FLOPS * length * self.width ** 2
            )
            lines.append('{:>5}  {:>7}  {:>7}  {:>14,}'.format(number, carried, length, flops))
        lines.append('total forward flops: {:,.0f}'.format(self.cost))
        return '\n'.join(lines)


def context_length_profile(
        schedule: PromptSchedule,
        num_patches: int,
        width: int = 768,
) -> ContextProfile:
    """
    :param schedule: prompt plan
    :param num_patches: ξ
    :param width: d_v used by the cost estimate
    :return: n_i = p_i + q_i + 1 + ξ per layer and the cost estimate
    """
    schedule.validate()
    carried = schedule.carried_counts()[:-1]
    lengths = [
        ops.add + count + 1 + num_patches
        for ops, count in zip(schedule, carried)
    ]

    return ContextProfile(
        lengths=lengths,
        carried=carried,
        width=width,
        attention_cost=float(sum(ATTENTION_FLOPS * n ** 2 * width for n in lengths)),
        projection_cost=float(sum(PROJECTION_FLOPS * n * width ** 2 for n in lengths)),
    )
