"""
Text pose-clip files.

    ktp-clip v1 <T> <N> <D> <unit>
    # name=<text>          optional metadata lines
    # fps=<float>
    # image=<W>x<H>
    <D floats>             T·N lines, frame-major

Values are written with repr() so a save/load cycle is bitwise lossless.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .exceptions import FormatError, ShapeMismatchError

logger = logging.getLogger(__name__)

CLIP_MAGIC = 'ktp-clip'
CLIP_VERSION = 'v1'
UNITS = {2: ('px', 'norm'), 3: ('mm', 'm')}
INPUT_SUFFIX = '.2d.clip'
TARGET_SUFFIX = '.3d.clip'


@dataclass
class PoseClip:
    data: np.ndarray
    unit: str
    name: Optional[str] = None
    frame_rate: Optional[float] = None
    image_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] not in UNITS:
            raise ShapeMismatchError("clip: expected a T x N x D array with D in {2, 3}", self.data.shape)
        if self.unit not in UNITS[self.dims]:
            raise FormatError(f"unit {self.unit!r} is not valid for D={self.dims}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("clip payload contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def joints(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> int:
        return self.data.shape[2]


@dataclass
class ClipPair:
    name: str
    input2d: PoseClip
    gt3d: PoseClip


def serialize_clip(clip: PoseClip) -> str:
    lines = [f'{CLIP_MAGIC} {CLIP_VERSION} {clip.frames} {clip.joints} {clip.dims} {clip.unit}']
    if clip.name:
        lines.append(f'# name={clip.name}')
    if clip.frame_rate is not None:
        lines.append(f'# fps={clip.frame_rate!r}')
    if clip.image_size is not None:
        lines.append(f'# image={clip.image_size[0]}x{clip.image_size[1]}')
    for row in clip.data.reshape(-1, clip.dims):
        lines.append(' '.join(repr(float(v)) for v in row))
    return '\n'.join(lines) + '\n'


def save_clip(clip: PoseClip, path: Union[str, Path]) -> None:
    Path(path).write_text(serialize_clip(clip), encoding='utf-8')


def _parse_header(line: str, source: Optional[str]) -> Tuple[int, int, int, str]:
    tokens = line.split()
    if len(tokens) != 6 or tokens[0] != CLIP_MAGIC:
        raise FormatError(f"bad clip magic; expected '{CLIP_MAGIC} {CLIP_VERSION} T N D unit'", 0, source)
    if tokens[1] != CLIP_VERSION:
        raise FormatError(f"unsupported clip version {tokens[1]!r}", len(tokens[0]) + 1, source)
    try:
        frames, joints, dims = (int(t) for t in tokens[2:5])
    except ValueError:
        raise FormatError("clip header dimensions must be integers", 0, source)
    if frames < 1 or joints < 1:
        raise FormatError(f"clip header declares an empty clip ({frames} x {joints})", 0, source)
    if dims not in UNITS:
        raise FormatError(f"clip dimension D={dims} is not 2 or 3", 0, source)
    if tokens[5] not in UNITS[dims]:
        raise FormatError(f"unit {tokens[5]!r} is not valid for D={dims}", 0, source)
    return frames, joints, dims, tokens[5]


def parse_clip(text: str, source: Optional[str] = None) -> PoseClip:
    lines = text.splitlines(keepends=True)
    if not lines:
        raise FormatError("empty clip file", 0, source)
    frames, joints, dims, unit = _parse_header(lines[0], source)
    meta = {}
    rows: List[List[float]] = []
    offset = len(lines[0].encode('utf-8'))
    for line in lines[1:]:
        stripped = line.strip()
        if stripped.startswith('#'):
            key, _, value = stripped[1:].strip().partition('=')
            meta[key.strip()] = value.strip()
        elif stripped:
            try:
                values = [float(v) for v in stripped.split()]
            except ValueError:
                raise FormatError(f"unparsable value in row {len(rows)}", offset, source)
            if len(values) != dims:
                raise FormatError(f"row {len(rows)} has {len(values)} values, expected {dims}", offset, source)
            rows.append(values)
        offset += len(line.encode('utf-8'))
    expected = frames * joints
    if len(rows) != expected:
        raise FormatError(f"payload has {len(rows)} rows, header declares {expected} (T·N)", offset, source)

    image_size = None
    if 'image' in meta:
        try:
            width, height = (int(v) for v in meta['image'].split('x'))
        except ValueError:
            raise FormatError(f"bad image metadata {meta['image']!r}", None, source)
        image_size = (width, height)
    try:
        frame_rate = float(meta['fps']) if 'fps' in meta else None
    except ValueError:
        raise FormatError(f"bad fps metadata {meta['fps']!r}", None, source)
    data = np.array(rows, dtype=np.float64).reshape(frames, joints, dims)
    return PoseClip(data, unit, meta.get('name'), frame_rate, image_size)


def load_clip(path: Union[str, Path]) -> PoseClip:
    return parse_clip(Path(path).read_text(encoding='utf-8'), str(path))


def clip_paths(directory: Union[str, Path], name: str) -> Tuple[Path, Path]:
    directory = Path(directory)
    return directory / f'{name}{INPUT_SUFFIX}', directory / f'{name}{TARGET_SUFFIX}'


def save_clip_pair(pair: ClipPair, directory: Union[str, Path]) -> Tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    input_path, target_path = clip_paths(directory, pair.name)
    save_clip(pair.input2d, input_path)
    save_clip(pair.gt3d, target_path)
    return input_path, target_path


def load_clip_pairs(directory: Union[str, Path]) -> List[ClipPair]:
    """Every `<name>.2d.clip` / `<name>.3d.clip` pair in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"clip directory {directory} does not exist")
    pairs = []
    for input_path in sorted(directory.glob(f'*{INPUT_SUFFIX}')):
        name = input_path.name[:-len(INPUT_SUFFIX)]
        _, target_path = clip_paths(directory, name)
        if not target_path.exists():
            raise FormatError(f"clip {name} has no matching {TARGET_SUFFIX} file", None, str(input_path))
        input2d, gt3d = load_clip(input_path), load_clip(target_path)
        if input2d.dims != 2 or gt3d.dims != 3:
            raise FormatError(f"clip pair {name} must hold 2D input and 3D target", None, str(input_path))
        if input2d.data.shape[:2] != gt3d.data.shape[:2]:
            raise ShapeMismatchError(f"clip pair {name} disagrees on T x N", input2d.data.shape, gt3d.data.shape)
        pairs.append(ClipPair(name, input2d, gt3d))
    if not pairs:
        raise FormatError(f"no *{INPUT_SUFFIX} files found", None, str(directory))
    logger.info("loaded clip pairs", extra={'directory': str(directory), 'count': len(pairs)})
    return pairs
