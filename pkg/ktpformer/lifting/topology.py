"""
Skeleton graphs and the affinity matrices built from them.

The fixed local topologies (skeleton adjacency across joints, banded adjacency
across frames) are plain numpy arrays. The learnable global matrices live in
the parameter registry; `combine` symmetrises local + global on the tape.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numerics as nx
from .exceptions import ConfigurationError, FormatError, ShapeMismatchError

logger = logging.getLogger(__name__)

SKELETON_MAGIC = 'ktp-skel'
SKELETON_VERSION = 'v1'
DEFAULT_SKELETON_PATH = Path(__file__).resolve().parent.parent / 'data' / 'h36m_17.skel'
GLOBAL_INIT_RANGE = 1e-2


@dataclass(frozen=True)
class SkeletonGraph:
    """Joint names plus an undirected bone list (no self-edges)."""
    joint_count: int
    edges: Tuple[Tuple[int, int], ...]
    joint_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.joint_count < 1:
            raise ConfigurationError("skeleton must have at least one joint")
        if self.joint_names and len(self.joint_names) != self.joint_count:
            raise ConfigurationError(
                f"skeleton declares {self.joint_count} joints but names {len(self.joint_names)}")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < self.joint_count and 0 <= j < self.joint_count):
                raise ConfigurationError(f"edge ({i}, {j}) outside [0, {self.joint_count})")
            if i == j:
                raise ConfigurationError(f"self-edge ({i}, {j}) in edge list")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ConfigurationError(f"duplicate edge ({i}, {j})")
            seen.add(key)

    def parents(self, root: int = 0) -> List[int]:
        """Parent index of every joint in a breadth-first tree rooted at `root` (-1 for the root)."""
        neighbours = [[] for _ in range(self.joint_count)]
        for i, j in self.edges:
            neighbours[i].append(j)
            neighbours[j].append(i)
        parent = [-2] * self.joint_count
        parent[root] = -1
        queue = [root]
        while queue:
            current = queue.pop(0)
            for nxt in sorted(neighbours[current]):
                if parent[nxt] == -2:
                    parent[nxt] = current
                    queue.append(nxt)
        if -2 in parent:
            raise ConfigurationError("skeleton is not connected")
        return parent


@dataclass
class AffinityPair:
    """A fixed local matrix and its same-shape learnable global counterpart."""
    local: np.ndarray
    global_learnable: nx.Tensor

    def __post_init__(self):
        local = np.asarray(self.local, dtype=np.float64)
        if local.ndim != 2 or local.shape[0] != local.shape[1]:
            raise ShapeMismatchError("affinity: local matrix must be square", local.shape)
        if not np.isin(local, (0.0, 1.0)).all():
            raise ConfigurationError("affinity: local matrix entries must be 0 or 1")
        if not np.array_equal(local, local.T):
            raise ConfigurationError("affinity: local matrix must be symmetric")
        if local.shape != self.global_learnable.shape:
            raise ShapeMismatchError("affinity: local and global shapes differ",
                                     local.shape, self.global_learnable.shape)
        self.local = local


def chain_skeleton(joint_count: int) -> SkeletonGraph:
    """Path graph 0-1-...-(N-1), used when no anatomical skeleton exists for N."""
    edges = tuple((i, i + 1) for i in range(joint_count - 1))
    names = tuple(f"joint_{i}" for i in range(joint_count))
    return SkeletonGraph(joint_count, edges, names)


def build_spatial_local(skeleton: SkeletonGraph) -> np.ndarray:
    """A_N: 1 on the diagonal and on every bone, 0 elsewhere."""
    n = skeleton.joint_count
    matrix = np.eye(n, dtype=np.float64)
    for i, j in skeleton.edges:
        matrix[i, j] = 1.0
        matrix[j, i] = 1.0
    return matrix


def build_temporal_local(frames: int, radius: int = 1) -> np.ndarray:
    """A_T: 1 where two frames are at most `radius` apart (self included)."""
    if frames < 1:
        raise ConfigurationError(f"temporal topology needs at least one frame, got {frames}")
    if radius < 1:
        raise ConfigurationError(f"temporal radius must be >= 1, got {radius}")
    idx = np.arange(frames)
    return (np.abs(idx[:, None] - idx[None, :]) <= radius).astype(np.float64)


def combine(pair: AffinityPair) -> nx.Tensor:
    """((A + Â) + (A + Â)ᵀ) / 2, differentiable with respect to Â."""
    summed = nx.add(pair.local, pair.global_learnable)
    return nx.scale(nx.add(summed, nx.transpose(summed)), 0.5)


def init_global(size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-GLOBAL_INIT_RANGE, GLOBAL_INIT_RANGE, size=(size, size))


def parse_skeleton(text: str, source: Optional[str] = None) -> SkeletonGraph:
    """Parse the `ktp-skel v1` text format."""
    offset = 0
    lines = []
    for raw in text.splitlines(keepends=True):
        lines.append((offset, raw.strip()))
        offset += len(raw.encode('utf-8'))
    if not lines:
        raise FormatError("empty skeleton file", 0, source)

    head_offset, head = lines[0]
    parts = head.split()
    if len(parts) != 3 or parts[0] != SKELETON_MAGIC:
        raise FormatError(f"expected '{SKELETON_MAGIC} {SKELETON_VERSION} <N>' header", head_offset, source)
    if parts[1] != SKELETON_VERSION:
        raise FormatError(f"unsupported skeleton version {parts[1]!r}", head_offset, source)
    try:
        count = int(parts[2])
    except ValueError:
        raise FormatError(f"joint count {parts[2]!r} is not an integer", head_offset, source) from None

    if len(lines) < count + 2:
        raise FormatError(f"expected {count} joint lines and an 'edges:' line", offset, source)
    names = []
    for k in range(count):
        line_offset, line = lines[1 + k]
        fields = line.split(maxsplit=1)
        if len(fields) != 2 or fields[0] != str(k):
            raise FormatError(f"expected joint line '{k} <name>'", line_offset, source)
        names.append(fields[1])

    marker_offset, marker = lines[1 + count]
    if marker != 'edges:':
        raise FormatError("expected 'edges:'", marker_offset, source)
    edges = []
    for line_offset, line in lines[2 + count:]:
        if not line:
            continue
        fields = line.split()
        try:
            i, j = (int(v) for v in fields)
        except ValueError:
            raise FormatError(f"bad edge line {line!r}", line_offset, source) from None
        edges.append((i, j))
    try:
        return SkeletonGraph(count, tuple(edges), tuple(names))
    except ConfigurationError as exc:
        raise FormatError(str(exc), marker_offset, source) from exc


def load_skeleton(path: Union[str, Path, None] = None) -> SkeletonGraph:
    path = Path(path) if path else DEFAULT_SKELETON_PATH
    return parse_skeleton(path.read_text(encoding='utf-8'), str(path))


def serialize_skeleton(skeleton: SkeletonGraph) -> str:
    names = skeleton.joint_names or tuple(f"joint_{i}" for i in range(skeleton.joint_count))
    lines = [f"{SKELETON_MAGIC} {SKELETON_VERSION} {skeleton.joint_count}"]
    lines += [f"{i} {name}" for i, name in enumerate(names)]
    lines.append('edges:')
    lines += [f"{i} {j}" for i, j in skeleton.edges]
    return '\n'.join(lines) + '\n'


def save_skeleton(skeleton: SkeletonGraph, path: Union[str, Path]) -> None:
    Path(path).write_text(serialize_skeleton(skeleton), encoding='utf-8')


def resolve_skeleton(reference: Optional[str], joint_count: int) -> SkeletonGraph:
    """
    Turn a config `skeleton` value into a graph.

    `h36m` (or empty) selects the shipped 17-joint skeleton when N is 17 and a
    chain otherwise; `chain` forces a chain; anything else is a file path.
    """
    reference = (reference or 'h36m').strip()
    if reference == 'chain' or (reference == 'h36m' and joint_count != 17):
        skeleton = chain_skeleton(joint_count)
    elif reference == 'h36m':
        skeleton = load_skeleton()
    else:
        skeleton = load_skeleton(reference)
    if skeleton.joint_count != joint_count:
        raise ConfigurationError(
            f"skeleton has {skeleton.joint_count} joints but the model expects {joint_count}")
    return skeleton
