"""
Binary checkpoint files.

Layout (little-endian): magic `KTPF`, u32 version, u32 T, N, d_m, h, L,
packed mode id, temporal radius, f64 lambda_t, lambda_m, then every parameter
in enumeration order as a u64 element count followed by f64 values.
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .exceptions import FormatError
from .model import MODE_IDS, MODES, VARIANT_IDS, VARIANTS, ModelConfig, ModelParameters, parameter_shapes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'KTPF'
CHECKPOINT_VERSION = 1
HEADER = struct.Struct('<4sIIIIIIII2d')


def pack_mode(config: ModelConfig) -> int:
    return MODE_IDS[config.mode] | VARIANT_IDS[config.kpa_variant] << 8 | VARIANT_IDS[config.tpa_variant] << 16


def unpack_mode(packed: int) -> Tuple[str, str, str]:
    mode, kpa, tpa = packed & 0xFF, (packed >> 8) & 0xFF, (packed >> 16) & 0xFF
    if mode >= len(MODES) or kpa >= len(VARIANTS) or tpa >= len(VARIANTS) or packed >> 24:
        raise ValueError(f"unknown packed mode id {packed:#x}")
    return MODES[mode], VARIANTS[kpa], VARIANTS[tpa]


def serialize_checkpoint(params: ModelParameters) -> bytes:
    c = params.config
    chunks = [HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, c.frames, c.joints, c.channels, c.heads,
                          c.depth, pack_mode(c), c.temporal_radius, c.lambda_t, c.lambda_m)]
    for _, array in params.items():
        chunks.append(struct.pack('<Q', array.size))
        chunks.append(array.astype('<f8').tobytes())
    return b''.join(chunks)


def save_checkpoint(params: ModelParameters, path: Union[str, Path]) -> None:
    Path(path).write_bytes(serialize_checkpoint(params))
    logger.info("checkpoint written", extra={'path': str(path), 'parameters': len(params.arrays)})


def parse_checkpoint(data: bytes, source: Optional[str] = None,
                     base: Optional[ModelConfig] = None) -> ModelParameters:
    """
    Rebuild parameters and their configuration from checkpoint bytes.

    Fields the header does not carry come from `base` (or the defaults).
    """
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header: {len(data)} of {HEADER.size} bytes", len(data), source)
    magic, version, frames, joints, channels, heads, depth, packed, radius, lambda_t, lambda_m = \
        HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0, source)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, source)
    try:
        mode, kpa_variant, tpa_variant = unpack_mode(packed)
    except ValueError as exc:
        raise FormatError(str(exc), 28, source)
    config = (base or ModelConfig()).with_overrides(
        frames=frames, joints=joints, channels=channels, heads=heads, depth=depth, mode=mode,
        kpa_variant=kpa_variant, tpa_variant=tpa_variant, temporal_radius=radius,
        lambda_t=lambda_t, lambda_m=lambda_m,
        joint_weights=base.joint_weights if base and base.joints == joints else None,
    )

    offset = HEADER.size
    arrays = {}
    for name, shape in parameter_shapes(config):
        if offset + 8 > len(data):
            raise FormatError(f"truncated before parameter {name}", offset, source)
        (count,) = struct.unpack_from('<Q', data, offset)
        expected = int(np.prod(shape))
        if count != expected:
            raise FormatError(f"parameter {name} stores {count} values, expected {expected}", offset, source)
        offset += 8
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"parameter {name} truncated: need {8 * count} bytes, have {len(data) - offset}",
                              offset, source)
        arrays[name] = np.frombuffer(data[offset:end], dtype='<f8').astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the last parameter", offset, source)
    return ModelParameters(config, arrays)


def load_checkpoint(path: Union[str, Path], base: Optional[ModelConfig] = None) -> ModelParameters:
    return parse_checkpoint(Path(path).read_bytes(), str(path), base)
