"""
Training objective, Adam with per-epoch learning-rate decay, the training loop
and the finite-difference gradient audit.
"""

import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import numerics as nx
from .clips import ClipPair, PoseClip
from .exceptions import ConfigurationError, FormatError, NumericalError, ShapeMismatchError
from .model import ModelConfig, ModelParameters, Topologies, forward

logger = logging.getLogger(__name__)

LOG_HEADER = ['step', 'epoch', 'lr', 'loss_total', 'loss_w', 'loss_t', 'loss_m']
OPTIMIZER_MAGIC = b'KTPO'
OPTIMIZER_VERSION = 2
GRADCHECK_FLOOR = 1e-3


@dataclass(frozen=True)
class LossWeights:
    joint_weights: np.ndarray
    lambda_t: float = 0.1
    lambda_m: float = 1.0

    def __post_init__(self):
        weights = np.asarray(self.joint_weights, dtype=np.float64)
        if weights.ndim != 1 or np.any(weights <= 0):
            raise ConfigurationError("joint weights must be a strictly positive vector")
        if self.lambda_t < 0 or self.lambda_m < 0:
            raise ConfigurationError("lambda_t and lambda_m must be >= 0")
        object.__setattr__(self, 'joint_weights', weights)

    @classmethod
    def from_config(cls, config: ModelConfig) -> 'LossWeights':
        return cls(config.weights, config.lambda_t, config.lambda_m)


class LossBreakdown(NamedTuple):
    total: nx.Tensor
    wmpjpe: nx.Tensor
    temporal: nx.Tensor
    velocity: nx.Tensor

    def as_floats(self) -> Tuple[float, float, float, float]:
        return self.total.item(), self.wmpjpe.item(), self.temporal.item(), self.velocity.item()


def _check_pair(pred: nx.Tensor, gt: np.ndarray) -> None:
    if pred.ndim != 3 or pred.shape[-1] != 3 or pred.shape != np.shape(gt):
        raise ShapeMismatchError("loss: prediction and target must both be T x N x 3", pred.shape, np.shape(gt))


def loss_wmpjpe(pred, gt, joint_weights) -> nx.Tensor:
    """Mean over frames and joints of w_n · ||pred - gt||."""
    pred = nx.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    weights = np.asarray(joint_weights, dtype=np.float64)
    if weights.shape != (pred.shape[1],):
        raise ShapeMismatchError("loss: joint weights do not match the joint count", weights.shape, pred.shape)
    distances = nx.norm_lastaxis(nx.sub(pred, gt))
    return nx.mean(nx.mul(distances, weights))


def loss_temporal_consistency(pred) -> nx.Tensor:
    """Mean squared frame-to-frame displacement of the prediction."""
    pred = nx.as_tensor(pred)
    if pred.shape[0] < 2:
        logger.warning("temporal consistency loss needs at least two frames; returning 0")
        return nx.Tensor(0.0)
    step = nx.sub(pred[1:], pred[:-1])
    return nx.mean(nx.sum(nx.square(step), axis=-1))


def loss_mpjve(pred, gt) -> nx.Tensor:
    """Mean norm of the difference between predicted and true per-frame velocities."""
    pred = nx.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    if pred.shape[0] < 2:
        logger.warning("velocity loss needs at least two frames; returning 0")
        return nx.Tensor(0.0)
    velocity = nx.sub(pred[1:], pred[:-1])
    return nx.mean(nx.norm_lastaxis(nx.sub(velocity, np.diff(gt, axis=0))))


def loss_components(pred, gt, weights: LossWeights) -> LossBreakdown:
    wmpjpe = loss_wmpjpe(pred, gt, weights.joint_weights)
    temporal = loss_temporal_consistency(pred)
    velocity = loss_mpjve(pred, gt)
    total = nx.add(nx.add(wmpjpe, nx.scale(temporal, weights.lambda_t)), nx.scale(velocity, weights.lambda_m))
    return LossBreakdown(total, wmpjpe, temporal, velocity)


def loss_total(pred, gt, weights: LossWeights) -> nx.Tensor:
    """L = L_W + λ_T·L_T + λ_M·L_M."""
    return loss_components(pred, gt, weights).total


# optimisation

@dataclass
class OptimizerState:
    """
    Adam moments and schedule.

    `epoch` counts completed epochs; a resumed run starts there.
    """
    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 7e-5
    decay: float = 0.99
    epoch: int = 0

    @classmethod
    def for_parameters(cls, params: ModelParameters, config: Optional[ModelConfig] = None) -> 'OptimizerState':
        config = config or params.config
        return cls(
            first_moment={name: np.zeros_like(a) for name, a in params.items()},
            second_moment={name: np.zeros_like(a) for name, a in params.items()},
            beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
            base_lr=config.learning_rate, decay=config.lr_decay,
        )

    def learning_rate(self, epoch: int) -> float:
        return self.base_lr * self.decay ** epoch

    def save(self, path: Union[str, Path]) -> None:
        chunks = [OPTIMIZER_MAGIC, struct.pack('<IQQ', OPTIMIZER_VERSION, self.step, self.epoch),
                  struct.pack('<5d', self.beta1, self.beta2, self.eps, self.base_lr, self.decay),
                  struct.pack('<I', len(self.first_moment))]
        for name, m in self.first_moment.items():
            encoded = name.encode('utf-8')
            v = self.second_moment[name]
            chunks += [struct.pack('<I', len(encoded)), encoded, struct.pack('<Q', m.size),
                       m.astype('<f8').tobytes(), v.astype('<f8').tobytes()]
        Path(path).write_bytes(b''.join(chunks))

    @classmethod
    def load(cls, path: Union[str, Path], params: Optional[ModelParameters] = None) -> 'OptimizerState':
        data = Path(path).read_bytes()
        reader = _Reader(data, str(path))
        if reader.take(4) != OPTIMIZER_MAGIC:
            raise FormatError("bad optimizer-state magic", 0, str(path))
        (version,) = reader.unpack('<I')
        if version != OPTIMIZER_VERSION:
            raise FormatError(f"unsupported optimizer-state version {version}", 4, str(path))
        step, epoch = reader.unpack('<QQ')
        beta1, beta2, eps, base_lr, decay = reader.unpack('<5d')
        (count,) = reader.unpack('<I')
        first, second = {}, {}
        for _ in range(count):
            (name_len,) = reader.unpack('<I')
            name = reader.take(name_len).decode('utf-8')
            (size,) = reader.unpack('<Q')
            first[name] = np.frombuffer(reader.take(8 * size), dtype='<f8').astype(np.float64)
            second[name] = np.frombuffer(reader.take(8 * size), dtype='<f8').astype(np.float64)
            if params is not None:
                if name not in params.arrays or params.arrays[name].size != size:
                    raise FormatError(f"optimizer state entry {name!r} does not match the model",
                                      reader.offset, str(path))
                shape = params.arrays[name].shape
                first[name] = first[name].reshape(shape)
                second[name] = second[name].reshape(shape)
        return cls(first, second, step, beta1, beta2, eps, base_lr, decay, epoch)


class _Reader:
    def __init__(self, data: bytes, source: Optional[str] = None):
        self.data, self.offset, self.source = data, 0, source

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(f"truncated: need {count} bytes, {len(self.data) - self.offset} left",
                              self.offset, self.source)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def adam_step(params: ModelParameters, grads: Dict[str, np.ndarray], state: OptimizerState,
              epoch: int = 0, frozen: Iterable[str] = ()) -> float:
    """
    One bias-corrected Adam update at lr(epoch) = base · decay^epoch.

    Every gradient is checked before anything is modified, so a NaN aborts the
    whole step.

    Returns:
        the learning rate used.

    Raises:
        NumericalError: naming the first parameter with a non-finite gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient, step aborted", parameter=name)

    frozen = set(frozen)
    state.step += 1
    lr = state.learning_rate(epoch)
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, array in params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        array -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return lr


# training loop

@dataclass
class TrainingClip:
    """One clip prepared for the objective: normalised 2D input, root-relative 3D target in metres."""
    name: str
    inputs: np.ndarray
    targets: np.ndarray


def normalize_screen(points: np.ndarray, width: float, height: float) -> np.ndarray:
    """Map pixel coordinates to [-1, 1] along x, preserving the aspect ratio."""
    return points / width * 2.0 - np.array([1.0, height / width])


def root_relative(points: np.ndarray, root: int = 0) -> np.ndarray:
    return points - points[:, root:root + 1, :]


def normalize_input(clip: PoseClip) -> np.ndarray:
    if clip.dims != 2:
        raise ShapeMismatchError("model input must be a 2D clip", clip.data.shape)
    if clip.unit == 'norm':
        return clip.data.copy()
    if clip.image_size is None:
        raise ConfigurationError(f"pixel clip {clip.name or '?'} carries no image size metadata")
    return normalize_screen(clip.data, *clip.image_size)


def target_millimetres(clip: PoseClip) -> np.ndarray:
    """Root-relative 3D pose in millimetres, the frame metrics are reported in."""
    if clip.dims != 3:
        raise ShapeMismatchError("target must be a 3D clip", clip.data.shape)
    relative = root_relative(clip.data)
    return relative if clip.unit == 'mm' else relative * 1000.0


def prepare_clip(pair: ClipPair) -> TrainingClip:
    return TrainingClip(pair.name, normalize_input(pair.input2d), target_millimetres(pair.gt3d) / 1000.0)


def predict_millimetres(params: ModelParameters, config: ModelConfig, inputs: np.ndarray,
                        topologies: Optional[Topologies] = None) -> np.ndarray:
    """Inference without a tape; the model works in metres."""
    with nx.no_grad():
        return forward(inputs, params, config, topologies).pred.value * 1000.0


class StepRecord(NamedTuple):
    step: int
    epoch: int
    lr: float
    loss_total: float
    loss_w: float
    loss_t: float
    loss_m: float

    def as_row(self) -> List[str]:
        return [str(self.step), str(self.epoch)] + [repr(float(v)) for v in self[2:]]


@dataclass
class TrainingResult:
    steps: int
    epochs: int
    history: List[StepRecord] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.history[-1].loss_total if self.history else None


class Trainer:
    """
    Minibatch Adam over a fixed clip set.

    An epoch is one pass over the clip set. Per-clip gradients are computed on
    independent tapes (optionally on a thread pool) and summed in clip order,
    so results do not depend on the worker count.
    """

    def __init__(self, config: ModelConfig, params: ModelParameters, clips: Sequence[TrainingClip],
                 state: Optional[OptimizerState] = None, topologies: Optional[Topologies] = None,
                 log_path: Optional[Union[str, Path]] = None, progress: bool = False):
        if not clips:
            raise ConfigurationError("training needs at least one clip")
        for clip in clips:
            if clip.inputs.shape != (config.frames, config.joints, 2):
                raise ShapeMismatchError(f"clip {clip.name} does not match the configured T x N x 2",
                                         clip.inputs.shape, (config.frames, config.joints, 2))
        self.config = config
        self.params = params
        self.clips = list(clips)
        self.state = state or OptimizerState.for_parameters(params, config)
        self.topologies = topologies or Topologies.from_config(config)
        self.weights = LossWeights.from_config(config)
        self.frozen = config.frozen_parameters()
        self.log_path = Path(log_path) if log_path else None
        self.progress = progress

    def clip_gradients(self, clip: TrainingClip) -> Tuple[Dict[str, np.ndarray], Tuple[float, ...]]:
        bound = self.params.bind()
        record = forward(clip.inputs, bound, self.config, self.topologies)
        losses = loss_components(record.pred, clip.targets, self.weights)
        nx.backward(losses.total)
        return bound.gradients(), losses.as_floats()

    def _batch_gradients(self, batch: List[TrainingClip]):
        if self.config.workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = list(pool.map(self.clip_gradients, batch))
        else:
            results = [self.clip_gradients(clip) for clip in batch]
        grads = {name: np.zeros_like(a) for name, a in self.params.items()}
        losses = np.zeros(4)
        for clip_grads, clip_losses in results:
            for name, g in clip_grads.items():
                grads[name] += g
            losses += clip_losses
        scale = 1.0 / len(batch)
        return {name: g * scale for name, g in grads.items()}, losses * scale

    def batches(self, epoch: int) -> List[List[TrainingClip]]:
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.clips))
        size = min(self.config.batch_size, len(self.clips))
        return [[self.clips[i] for i in order[k:k + size]] for k in range(0, len(order), size)]

    def step(self, batch: List[TrainingClip], epoch: int) -> StepRecord:
        grads, losses = self._batch_gradients(batch)
        lr = adam_step(self.params, grads, self.state, epoch, self.frozen)
        return StepRecord(self.state.step, epoch, lr, *(float(v) for v in losses))

    def run(self) -> TrainingResult:
        result = TrainingResult(steps=0, epochs=0)
        writer_file = open(self.log_path, 'w', newline='') if self.log_path else None
        try:
            writer = csv.writer(writer_file, lineterminator='\n') if writer_file else None
            if writer:
                writer.writerow(LOG_HEADER)
            limit = self.config.max_steps or None
            total = self.config.epochs * len(self.batches(0))
            bar = tqdm(total=min(total, limit) if limit else total, disable=not self.progress, desc='train')
            first = self.state.epoch
            if first:
                logger.info("resuming schedule", extra={'epoch': first, 'step': self.state.step})
            for epoch in range(first, first + self.config.epochs):
                complete = True
                for batch in self.batches(epoch):
                    if limit and result.steps >= limit:
                        complete = False
                        break
                    record = self.step(batch, epoch)
                    result.history.append(record)
                    result.steps += 1
                    if writer:
                        writer.writerow(record.as_row())
                    bar.update(1)
                    logger.debug("step complete", extra={'step': record.step, 'epoch': epoch,
                                                         'loss': record.loss_total})
                if complete:
                    self.state.epoch = epoch + 1
                result.epochs = epoch + 1 - first
                if limit and result.steps >= limit:
                    break
            bar.close()
        finally:
            if writer_file:
                writer_file.close()
        logger.info("training finished", extra={'steps': result.steps, 'final_loss': result.final_loss})
        return result


# gradient audit

@dataclass
class GroupCheck:
    name: str
    entries: int
    max_abs_error: float
    max_rel_error: float
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    groups: List[GroupCheck]

    @property
    def passed(self) -> bool:
        return all(group.passed for group in self.groups)

    @property
    def failures(self) -> List[GroupCheck]:
        return [group for group in self.groups if not group.passed]


def audit_fixture(config: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded random input/target pair for the gradient audit."""
    rng = np.random.default_rng([config.seed, 7])
    inputs = rng.uniform(-1.0, 1.0, size=(config.frames, config.joints, 2))
    targets = rng.normal(0.0, 0.3, size=(config.frames, config.joints, 3))
    return inputs, targets


def gradcheck(config: ModelConfig, tolerance: float = 1e-4, params: Optional[ModelParameters] = None,
              fixture: Optional[Tuple[np.ndarray, np.ndarray]] = None, max_entries: Optional[int] = None,
              fd_step: float = 1e-6, progress: bool = False) -> GradcheckReport:
    """
    Compare backward gradients of the total loss with central differences.

    Each parameter array is one group. The relative error of an entry is
    |analytic - numeric| / max(|analytic|, |numeric|, GRADCHECK_FLOOR); with
    `max_entries` set, a seeded subset of each group is checked.
    """
    params = params or ModelParameters.initialize(config)
    inputs, targets = fixture or audit_fixture(config)
    topo = Topologies.from_config(config)
    weights = LossWeights.from_config(config)

    bound = params.bind()
    nx.backward(loss_total(forward(inputs, bound, config, topo).pred, targets, weights))
    analytic = bound.gradients()

    def evaluate() -> float:
        with nx.no_grad():
            return loss_total(forward(inputs, params, config, topo).pred, targets, weights).item()

    rng = np.random.default_rng([config.seed, 11])
    groups = []
    for name, array in tqdm(list(params.items()), disable=not progress, desc='gradcheck'):
        flat = array.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        max_abs = max_rel = 0.0
        grad = analytic[name].reshape(-1)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + fd_step
            upper = evaluate()
            flat[idx] = original - fd_step
            lower = evaluate()
            flat[idx] = original
            numeric = (upper - lower) / (2.0 * fd_step)
            error = abs(grad[idx] - numeric)
            max_abs = max(max_abs, error)
            max_rel = max(max_rel, error / max(abs(grad[idx]), abs(numeric), GRADCHECK_FLOOR))
        groups.append(GroupCheck(name, len(indices), max_abs, max_rel, max_rel < tolerance))
        if max_rel >= tolerance:
            logger.warning("gradient mismatch", extra={'parameter': name, 'max_rel_error': max_rel})
    return GradcheckReport(tolerance, groups)
