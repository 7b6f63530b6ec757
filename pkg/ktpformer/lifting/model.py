"""
The full lifting network and its wiring variants.

Parameters are held as plain float64 arrays in a fixed enumeration order
(`parameter_shapes`). A forward pass binds them to fresh differentiable leaves,
so independent tapes can share one set of arrays read-only.
"""

import logging
from dataclasses import dataclass, fields, replace
from typing import Dict, Iterator, List, NamedTuple, Optional, Set, Tuple

import numpy as np

from . import numerics as nx
from .exceptions import ConfigurationError, ShapeMismatchError
from .prior_attention import (
    KPAParams, TPABlockParams, TPAParams, kpa_forward, linear_embedding, tpa_stack,
)
from .topology import build_spatial_local, build_temporal_local, init_global, resolve_skeleton
from .transformer import (
    MLP_RATIO, EncoderParams, MHSAParams, check_heads, encoder_block, init_matrix,
    reshape_spatial_temporal,
)

logger = logging.getLogger(__name__)

MODES = ('UMD', 'PMD', 'SMD-S', 'SMD', 'BASELINE')
MODE_IDS = {mode: index for index, mode in enumerate(MODES)}
VARIANTS = ('full', 'no_global', 'no_prior')
VARIANT_IDS = {variant: index for index, variant in enumerate(VARIANTS)}

ENCODER_FIELDS = (
    ('mhsa.qkv', 'qkv'),
    ('mhsa.out', 'out'),
    ('ln.gain', 'gain'),
    ('ln.bias', 'bias'),
    ('mlp.fc1.weight', 'fc1'),
    ('mlp.fc1.bias', 'fc1_bias'),
    ('mlp.fc2.weight', 'fc2'),
    ('mlp.fc2.bias', 'fc2_bias'),
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture, loss, optimizer and run settings in one flat record."""
    frames: int = 27
    joints: int = 17
    channels: int = 64
    heads: int = 4
    depth: int = 2
    mode: str = 'SMD'
    kpa_variant: str = 'full'
    tpa_variant: str = 'full'
    temporal_radius: int = 1
    lambda_t: float = 0.1
    lambda_m: float = 1.0
    joint_weights: Optional[Tuple[float, ...]] = None
    learning_rate: float = 7e-5
    lr_decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 7
    epochs: int = 1
    max_steps: int = 0
    seed: int = 0
    layer_norm_eps: float = 1e-5
    skeleton: str = 'h36m'
    workers: int = 1

    def __post_init__(self):
        for name in ('frames', 'joints', 'channels', 'heads', 'temporal_radius', 'batch_size', 'workers'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ('depth', 'epochs', 'max_steps', 'seed'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative, got {getattr(self, name)}")
        check_heads(self.channels, self.heads)
        if self.mode not in MODE_IDS:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        for name in ('kpa_variant', 'tpa_variant'):
            if getattr(self, name) not in VARIANT_IDS:
                raise ConfigurationError(f"unknown {name} {getattr(self, name)!r}")
        if self.lambda_t < 0 or self.lambda_m < 0:
            raise ConfigurationError("loss weights lambda_t and lambda_m must be >= 0")
        if self.joint_weights is not None:
            if len(self.joint_weights) != self.joints:
                raise ConfigurationError(
                    f"joint_weights has {len(self.joint_weights)} entries, expected {self.joints}")
            if any(w <= 0 for w in self.joint_weights):
                raise ConfigurationError("joint_weights must be strictly positive")
        if self.learning_rate <= 0 or not (0 < self.lr_decay <= 1):
            raise ConfigurationError("learning_rate must be > 0 and lr_decay in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigurationError("adam betas must lie in [0, 1) and adam_eps must be > 0")
        if self.layer_norm_eps <= 0:
            raise ConfigurationError("layer_norm_eps must be > 0")

    @property
    def mlp_width(self) -> int:
        return MLP_RATIO * self.channels

    @property
    def tpa_block_count(self) -> int:
        return 1 if self.mode == 'SMD-S' else 2

    @property
    def weights(self) -> np.ndarray:
        if self.joint_weights is None:
            return np.ones(self.joints)
        return np.asarray(self.joint_weights, dtype=np.float64)

    def with_overrides(self, **changes) -> 'ModelConfig':
        return replace(self, **changes)

    def frozen_parameters(self) -> Set[str]:
        """Parameters the ablation variants hold fixed during optimisation."""
        frozen: Set[str] = set()
        kpa_variant = 'no_prior' if self.mode == 'BASELINE' else self.kpa_variant
        tpa_variant = 'no_prior' if self.mode == 'BASELINE' else self.tpa_variant
        if kpa_variant in ('no_global', 'no_prior'):
            frozen.add('kpa.global_affinity')
        if kpa_variant == 'no_prior':
            frozen.add('kpa.modulation')
        for b in range(self.tpa_block_count):
            if tpa_variant in ('no_global', 'no_prior'):
                frozen.add(f'tpa.block{b}.global_affinity')
            if tpa_variant == 'no_prior':
                frozen.add(f'tpa.block{b}.modulation')
            if self.mode == 'BASELINE':
                frozen.add(f'tpa.block{b}.transform')
        return frozen


def config_field_names() -> List[str]:
    return [f.name for f in fields(ModelConfig)]


def encoder_names(depth: int) -> List[str]:
    names = ['entry_spatial', 'entry_temporal']
    for j in range(depth):
        names += [f'stack{j}.spatial', f'stack{j}.temporal']
    return names


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """The stable enumeration order of every learnable array, with its shape."""
    T, N, d, dff = config.frames, config.joints, config.channels, config.mlp_width
    shapes: List[Tuple[str, Tuple[int, ...]]] = [
        ('kpa.embed', (2, d)),
        ('kpa.global_affinity', (N, N)),
        ('kpa.modulation', (N, d)),
        ('kpa.spatial_pos', (N, d)),
    ]
    for b in range(config.tpa_block_count):
        shapes += [
            (f'tpa.block{b}.transform', (d, d)),
            (f'tpa.block{b}.global_affinity', (T, T)),
            (f'tpa.block{b}.modulation', (T, d)),
        ]
    shapes.append(('tpa.temporal_pos', (T, d)))
    encoder_shapes = {
        'qkv': (d, 3 * d), 'out': (d, d), 'gain': (d,), 'bias': (d,),
        'fc1': (d, dff), 'fc1_bias': (dff,), 'fc2': (dff, d), 'fc2_bias': (d,),
    }
    for enc in encoder_names(config.depth):
        shapes += [(f'encoder.{enc}.{suffix}', encoder_shapes[key]) for suffix, key in ENCODER_FIELDS]
    shapes += [('head.weight', (d, 3)), ('head.bias', (3,))]
    return shapes


def analytic_parameter_count(config: ModelConfig) -> int:
    """
    Closed form of the parameter count:

        KPA     = 2d + N² + 2Nd
        TPA     = B(d² + T² + Td) + Td          (B = TPA blocks)
        encoder = 4d² + 2·d·d_ff + d_ff + 3d    (one block)
        head    = 3d + 3
        total   = KPA + TPA + (2 + 2L)·encoder + head
    """
    T, N, d, dff, L = config.frames, config.joints, config.channels, config.mlp_width, config.depth
    kpa = 2 * d + N * N + 2 * N * d
    tpa = config.tpa_block_count * (d * d + T * T + T * d) + T * d
    encoder = 4 * d * d + 2 * d * dff + dff + 3 * d
    return kpa + tpa + (2 + 2 * L) * encoder + 3 * d + 3


def _encoder_flops(batch: int, seq_len: int, config: ModelConfig) -> int:
    d, dff = config.channels, config.mlp_width
    tokens = batch * seq_len
    projections = 2 * tokens * d * 3 * d + 2 * tokens * d * d
    attention = 2 * 2 * batch * seq_len * seq_len * d
    feed_forward = 2 * 2 * tokens * d * dff
    return projections + attention + feed_forward


def count_flops(config: ModelConfig) -> int:
    """
    Multiply-accumulate count of one forward pass (a matmul costs 2mnk).
    Elementwise operations, softmax and normalisation are not counted.
    """
    T, N, d = config.frames, config.joints, config.channels
    total = 2 * T * N * 2 * d
    if config.mode != 'BASELINE':
        if config.kpa_variant != 'no_prior':
            total += 2 * T * N * N * d
        per_block = 2 * N * T * d * d
        if config.tpa_variant != 'no_prior':
            per_block += 2 * N * T * T * d
        total += config.tpa_block_count * per_block
    pairs = 1 + config.depth
    total += pairs * (_encoder_flops(T, N, config) + _encoder_flops(N, T, config))
    total += 2 * T * N * d * 3
    return total


def count_parameters(params: 'ModelParameters') -> int:
    """Exact count of learnable scalars in a registry."""
    return int(sum(array.size for array in params.arrays.values()))


def _initial_value(name: str, shape: Tuple[int, ...], config: ModelConfig,
                   frozen: Set[str], rng: np.random.Generator) -> np.ndarray:
    d = config.channels
    leaf = name.rsplit('.', 1)[-1]
    if name.endswith('global_affinity'):
        return np.zeros(shape) if name in frozen else init_global(shape[0], rng)
    if name.endswith('modulation'):
        return np.ones(shape)
    if name.endswith('_pos') or leaf == 'bias':
        return np.zeros(shape)
    if name.endswith('ln.gain'):
        return np.ones(shape)
    if name == 'kpa.embed':
        return init_matrix(shape, shape[0], rng)
    if name.endswith('transform'):
        return np.eye(d) + rng.uniform(-1e-2, 1e-2, size=shape)
    return init_matrix(shape, d, rng)


class ModelParameters:
    """Flat, ordered registry of learnable arrays."""

    def __init__(self, config: ModelConfig, arrays: Dict[str, np.ndarray]):
        expected = parameter_shapes(config)
        if [name for name, _ in expected] != list(arrays):
            raise ConfigurationError("parameter names do not follow the enumeration order")
        for name, shape in expected:
            if arrays[name].shape != shape:
                raise ShapeMismatchError(f"parameter {name} has the wrong shape", arrays[name].shape, shape)
        self.config = config
        self.arrays: Dict[str, np.ndarray] = {name: np.asarray(a, dtype=np.float64) for name, a in arrays.items()}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: Optional[int] = None) -> 'ModelParameters':
        """Seeded initialisation: one child generator per parameter, in enumeration order."""
        shapes = parameter_shapes(config)
        children = np.random.SeedSequence(config.seed if seed is None else seed).spawn(len(shapes))
        frozen = config.frozen_parameters()
        arrays = {
            name: _initial_value(name, shape, config, frozen, np.random.default_rng(child))
            for (name, shape), child in zip(shapes, children)
        }
        return cls(config, arrays)

    def names(self) -> List[str]:
        return list(self.arrays)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.arrays.items())

    def copy(self) -> 'ModelParameters':
        return ModelParameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self) -> 'BoundParameters':
        return BoundParameters(self)


class BoundParameters:
    """Differentiable leaves over a registry's arrays, for one tape."""

    def __init__(self, params: ModelParameters):
        self.config = params.config
        self.leaves: Dict[str, nx.Tensor] = {
            name: nx.Tensor(array, requires_grad=True, name=name) for name, array in params.items()
        }

    def __getitem__(self, name: str) -> nx.Tensor:
        return self.leaves[name]

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: leaf.grad for name, leaf in self.leaves.items()}

    def zero_grad(self) -> None:
        nx.zero_grads(self.leaves.values())

    @property
    def kpa(self) -> KPAParams:
        return KPAParams(self['kpa.embed'], self['kpa.global_affinity'],
                         self['kpa.modulation'], self['kpa.spatial_pos'])

    @property
    def tpa(self) -> TPAParams:
        blocks = [
            TPABlockParams(self[f'tpa.block{b}.transform'], self[f'tpa.block{b}.global_affinity'],
                           self[f'tpa.block{b}.modulation'])
            for b in range(self.config.tpa_block_count)
        ]
        return TPAParams(blocks, self['tpa.temporal_pos'])

    def encoder(self, name: str) -> EncoderParams:
        p = f'encoder.{name}.'
        return EncoderParams(
            mhsa=MHSAParams(self[p + 'mhsa.qkv'], self[p + 'mhsa.out'], self.config.heads),
            ln_gain=self[p + 'ln.gain'], ln_bias=self[p + 'ln.bias'],
            fc1_weight=self[p + 'mlp.fc1.weight'], fc1_bias=self[p + 'mlp.fc1.bias'],
            fc2_weight=self[p + 'mlp.fc2.weight'], fc2_bias=self[p + 'mlp.fc2.bias'],
        )


@dataclass(frozen=True)
class Topologies:
    """The fixed local affinity matrices a forward pass uses."""
    spatial: np.ndarray
    temporal: np.ndarray

    @classmethod
    def from_config(cls, config: ModelConfig) -> 'Topologies':
        skeleton = resolve_skeleton(config.skeleton, config.joints)
        return cls(build_spatial_local(skeleton), build_temporal_local(config.frames, config.temporal_radius))


class ForwardRecord(NamedTuple):
    pred: nx.Tensor               # T x N x 3
    attn_spatial: np.ndarray      # T x h x N x N, entry spatial block
    attn_temporal: np.ndarray     # N x h x T x T, entry temporal block


def _validate_input(seq2d, config: ModelConfig) -> nx.Tensor:
    seq = nx.as_tensor(seq2d)
    expected = (config.frames, config.joints, 2)
    if seq.shape != expected:
        raise ShapeMismatchError("forward: input does not match the configured T x N x 2", seq.shape, expected)
    return seq


def _bind(params, config: ModelConfig) -> BoundParameters:
    bound = params.bind() if isinstance(params, ModelParameters) else params
    if bound.config.frames != config.frames or bound.config.joints != config.joints \
            or bound.config.channels != config.channels or bound.config.depth != config.depth \
            or bound.config.tpa_block_count != config.tpa_block_count:
        raise ConfigurationError("parameters were built for a different configuration")
    return bound


def _spatial_tokens(seq: nx.Tensor, bound: BoundParameters, config: ModelConfig, topo: Topologies,
                    embedded: Optional[nx.Tensor] = None) -> nx.Tensor:
    kpa = bound.kpa
    if embedded is None:
        embedded = linear_embedding(seq, kpa)
    if config.mode == 'BASELINE' or config.kpa_variant == 'no_prior':
        return nx.add(embedded, kpa.spatial_pos)
    return kpa_forward(seq, kpa, topo.spatial, embedded=embedded)


def _temporal_tokens(tokens: nx.Tensor, bound: BoundParameters, config: ModelConfig,
                     topo: Topologies) -> nx.Tensor:
    tpa = bound.tpa
    if config.mode == 'BASELINE':
        return nx.add(tokens, tpa.temporal_pos)
    return tpa_stack(tokens, tpa, topo.temporal, use_prior=config.tpa_variant != 'no_prior')


def forward(seq2d, params, config: ModelConfig, topologies: Optional[Topologies] = None) -> ForwardRecord:
    """
    Lift a T x N x 2 sequence to T x N x 3 using the wiring named by `config.mode`.

    Attention probabilities are captured from the entry spatial and temporal
    blocks, the ones fed by the prior modules.
    """
    seq = _validate_input(seq2d, config)
    bound = _bind(params, config)
    topo = topologies or Topologies.from_config(config)
    eps = config.layer_norm_eps
    swap = reshape_spatial_temporal

    if config.mode == 'UMD':
        h = swap(_temporal_tokens(swap(_spatial_tokens(seq, bound, config, topo)), bound, config, topo))
        h, attn_s = encoder_block(h, bound.encoder('entry_spatial'), eps)
        h, attn_t = encoder_block(swap(h), bound.encoder('entry_temporal'), eps)
    elif config.mode == 'PMD':
        embedded = linear_embedding(seq, bound.kpa)
        spatial, attn_s = encoder_block(_spatial_tokens(seq, bound, config, topo, embedded),
                                        bound.encoder('entry_spatial'), eps)
        temporal = _temporal_tokens(swap(embedded), bound, config, topo)
        h, attn_t = encoder_block(nx.add(swap(spatial), temporal), bound.encoder('entry_temporal'), eps)
    else:
        h, attn_s = encoder_block(_spatial_tokens(seq, bound, config, topo), bound.encoder('entry_spatial'), eps)
        h = _temporal_tokens(swap(h), bound, config, topo)
        h, attn_t = encoder_block(h, bound.encoder('entry_temporal'), eps)
    h = swap(h)

    for j in range(config.depth):
        h, _ = encoder_block(h, bound.encoder(f'stack{j}.spatial'), eps)
        h, _ = encoder_block(swap(h), bound.encoder(f'stack{j}.temporal'), eps)
        h = swap(h)

    pred = nx.add(nx.matmul(h, bound['head.weight']), bound['head.bias'])
    return ForwardRecord(pred, attn_s.value, attn_t.value)


def forward_mode(seq2d, params, config: ModelConfig, mode: Optional[str] = None,
                 topologies: Optional[Topologies] = None) -> nx.Tensor:
    """Run one of the five wirings and return only the prediction."""
    if mode is not None and mode != config.mode:
        if mode not in MODE_IDS:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
        if (mode == 'SMD-S') != (config.mode == 'SMD-S'):
            raise ConfigurationError("SMD-S uses a different parameter layout; build parameters for it")
        config = config.with_overrides(mode=mode)
    return forward(seq2d, params, config, topologies).pred


def extract_attention(record: ForwardRecord) -> Tuple[np.ndarray, np.ndarray]:
    """
    Head-averaged attention of the entry blocks.

    Returns:
        (spatial N x N averaged over frames and heads,
         temporal T x T averaged over joints and heads)
    """
    spatial = np.mean(record.attn_spatial, axis=(0, 1))
    temporal = np.mean(record.attn_temporal, axis=(0, 1))
    return spatial, temporal
