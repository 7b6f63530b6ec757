"""
Seeded synthetic motion: a forward-kinematic skeleton driven by sums of
sinusoids, observed by a pinhole camera.

Coordinates are camera-space millimetres with x right, y down and z forward.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .clips import ClipPair, PoseClip
from .exceptions import ConfigurationError, ShapeMismatchError
from .topology import SkeletonGraph, resolve_skeleton

logger = logging.getLogger(__name__)

MAX_AMPLITUDE = 1.0
MIN_DEPTH = 100.0
CHAIN_BONE = 200.0

# parent-relative rest offsets of the 17-joint skeleton, mm
H36M_REST_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [-130.0, 0.0, 0.0], [0.0, 450.0, 0.0], [0.0, 450.0, 0.0],
    [130.0, 0.0, 0.0], [0.0, 450.0, 0.0], [0.0, 450.0, 0.0],
    [0.0, -230.0, 0.0], [0.0, -250.0, 0.0], [0.0, -115.0, -30.0], [0.0, -115.0, 0.0],
    [150.0, 0.0, 0.0], [0.0, 280.0, 0.0], [0.0, 250.0, 0.0],
    [-150.0, 0.0, 0.0], [0.0, 280.0, 0.0], [0.0, 250.0, 0.0],
])


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    frames: int = 27
    joints: int = 17
    skeleton: str = 'h36m'
    bone_scale: float = 1.0
    harmonics: int = 3
    amplitude: float = 0.4
    focal_length: float = 1145.0
    camera_distance: float = 4500.0
    image_width: int = 1000
    image_height: int = 1000
    noise_std: float = 0.0
    frame_rate: float = 50.0
    name: str = 'synth'

    def __post_init__(self):
        if self.frames < 1 or self.joints < 1:
            raise ConfigurationError("frames and joints must be positive")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.bone_scale <= 0:
            raise ConfigurationError("bone lengths must be positive (bone_scale > 0)")
        if self.harmonics < 1:
            raise ConfigurationError("harmonics must be at least 1")
        if not 0.0 <= self.amplitude <= MAX_AMPLITUDE:
            raise ConfigurationError(f"amplitude must lie in [0, {MAX_AMPLITUDE}] radians")
        if self.focal_length <= 0 or self.camera_distance <= 0:
            raise ConfigurationError("focal_length and camera_distance must be positive")
        if self.image_width < 1 or self.image_height < 1:
            raise ConfigurationError("image size must be positive")
        if self.noise_std < 0 or self.frame_rate <= 0:
            raise ConfigurationError("noise_std must be >= 0 and frame_rate > 0")
        if not self.name or any(c.isspace() or c in '/\\' for c in self.name):
            raise ConfigurationError(f"clip name {self.name!r} must be a non-empty single token")


def rest_offsets(skeleton: SkeletonGraph, parents: List[int]) -> np.ndarray:
    """Parent-relative rest offsets; the shipped skeleton has anatomical ones, others a zigzag."""
    if skeleton.joint_count == 17 and skeleton.edges == _h36m_edges():
        return H36M_REST_OFFSETS.copy()
    offsets = np.zeros((skeleton.joint_count, 3))
    for joint, parent in enumerate(parents):
        if parent >= 0:
            side = 1.0 if joint % 2 else -1.0
            offsets[joint] = [0.3 * CHAIN_BONE * side, -CHAIN_BONE, 0.0]
    return offsets


def _h36m_edges():
    return resolve_skeleton('h36m', 17).edges


def _kinematic_order(parents: List[int]) -> List[int]:
    depth = []
    for joint in range(len(parents)):
        d, current = 0, joint
        while parents[current] >= 0:
            current = parents[current]
            d += 1
        depth.append(d)
    return sorted(range(len(parents)), key=lambda j: (depth[j], j))


def _sinusoids(rng: np.random.Generator, spec: SynthSpec, count: int, times: np.ndarray) -> np.ndarray:
    """count x T x 3 rotation vectors, each axis a sum of `harmonics` sinusoids bounded by `amplitude`."""
    base = rng.uniform(0.2, 0.8)
    coeffs = rng.uniform(-1.0, 1.0, size=(count, 3, spec.harmonics)) * spec.amplitude / spec.harmonics
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(count, 3, spec.harmonics))
    freqs = base * np.arange(1, spec.harmonics + 1)
    angles = 2.0 * math.pi * freqs[None, None, :, None] * times[None, None, None, :] + phases[..., None]
    return np.einsum('jah,jaht->jta', coeffs, np.sin(angles))


def forward_kinematics(offsets: np.ndarray, parents: List[int], local: Rotation,
                       root_positions: np.ndarray) -> np.ndarray:
    """
    Global joint positions, T x N x 3.

    `local` is a stack of N·T rotations (joint-major); each joint's rotation
    turns the bones hanging below it.
    """
    joints, frames = offsets.shape[0], root_positions.shape[0]
    positions = np.zeros((frames, joints, 3))
    orientations: List[Optional[Rotation]] = [None] * joints
    for joint in _kinematic_order(parents):
        own = local[joint * frames:(joint + 1) * frames]
        parent = parents[joint]
        if parent < 0:
            positions[:, joint] = root_positions
            orientations[joint] = own
        else:
            positions[:, joint] = positions[:, parent] + orientations[parent].apply(offsets[joint])
            orientations[joint] = orientations[parent] * own
    return positions


def project(points: np.ndarray, focal_length: float, image_width: int, image_height: int) -> np.ndarray:
    """Pinhole projection with the principal point at the image centre."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] != 3:
        raise ShapeMismatchError("project: expected ... x 3 camera-space points", points.shape)
    too_close = np.argwhere(points[..., 2] < MIN_DEPTH)
    if too_close.size:
        index = tuple(int(i) for i in too_close[0])
        raise ConfigurationError(
            f"point {index} is {points[index][2]:.1f} mm from the camera plane (minimum {MIN_DEPTH} mm); "
            f"increase camera_distance or lower amplitude")
    centre = np.array([image_width / 2.0, image_height / 2.0])
    return focal_length * points[..., :2] / points[..., 2:3] + centre


def synth_generate(spec: SynthSpec) -> Tuple[PoseClip, PoseClip]:
    """
    Generate (gt3d in mm, input2d in px) for one clip.

    Bone lengths are fixed by construction: every frame is a rigid rotation
    of the same rest offsets.
    """
    skeleton = resolve_skeleton(spec.skeleton, spec.joints)
    parents = skeleton.parents()
    offsets = rest_offsets(skeleton, parents) * spec.bone_scale
    rng = np.random.default_rng(spec.seed)
    times = np.arange(spec.frames) / spec.frame_rate

    rotvecs = _sinusoids(rng, spec, skeleton.joint_count, times)
    heading = _sinusoids(rng, spec, 1, times)[0] * np.array([0.0, 1.0, 0.0])
    rotvecs[0] = heading + 0.25 * rotvecs[0]
    sway = _sinusoids(rng, spec, 1, times)[0] * 100.0 * spec.bone_scale
    root = sway + np.array([0.0, 0.0, spec.camera_distance])

    local = Rotation.from_rotvec(rotvecs.reshape(-1, 3))
    gt3d = forward_kinematics(offsets, parents, local, root)
    pixels = project(gt3d, spec.focal_length, spec.image_width, spec.image_height)
    pixels = pixels + spec.noise_std * rng.standard_normal(pixels.shape)

    logger.debug("synthesised clip", extra={'clip': spec.name, 'frames': spec.frames, 'seed': spec.seed})
    image = (spec.image_width, spec.image_height)
    return (PoseClip(gt3d, 'mm', spec.name, spec.frame_rate),
            PoseClip(pixels, 'px', spec.name, spec.frame_rate, image))


def synth_pair(spec: SynthSpec) -> ClipPair:
    gt3d, input2d = synth_generate(spec)
    return ClipPair(spec.name, input2d, gt3d)


def bone_lengths(positions: np.ndarray, skeleton: SkeletonGraph) -> np.ndarray:
    """T x E bone lengths of a T x N x 3 sequence."""
    edges = np.array(skeleton.edges)
    return np.linalg.norm(positions[:, edges[:, 0]] - positions[:, edges[:, 1]], axis=-1)
