"""Synthetic skeleton/occupancy/label triples and the ``TMS1`` container format.

Container layout (little-endian)::

    magic "TMS1" | version u16 | n_samples u32 | V u16 | max_joints u16 | radius f32
    per sample: label u16 | n_joints u16 | joints n*3 f32 | parents n i16 | occupancy bits

Occupancy bits are the C-order flattening of the V^3 grid, packed eight to a
byte least-significant bit first, padded to a whole byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .errors import BadMagic, CorruptSample, DatasetError, DegenerateSkeleton, VersionMismatch
from .skeleton import FAMILY_MIN_JOINTS, Family, Skeleton, bone_list, sample_random_tree, validate_skeleton

MAGIC = b"TMS1"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHf")
MAX_RETRIES = 100


@dataclass(frozen=True)
class DataConfig:
    voxel_res: int = 16
    radius: float = 1.5  # voxels
    min_joints: int = 4
    max_joints: int = 12


@dataclass(frozen=True)
class DatasetHeader:
    n_samples: int
    voxel_res: int
    max_joints: int
    radius: float
    version: int = VERSION


@dataclass(frozen=True, eq=False)
class DatasetSample:
    skeleton: Skeleton
    occupancy: np.ndarray
    label: int

    @property
    def family(self) -> Family:
        return Family(self.label)

    def __eq__(self, other):
        if not isinstance(other, DatasetSample):
            return NotImplemented
        return (self.label == other.label and self.skeleton == other.skeleton
                and np.array_equal(self.occupancy, other.occupancy))


def rasterize_capsules(skel: Skeleton, voxel_res: int = 16, radius: float = 1.5) -> np.ndarray:
    """Mark voxels whose centre lies within ``radius`` voxels of any bone segment.

    Joints map from [-0.5, 0.5]^3 to voxel units by ``(x + 0.5) * V``; voxel
    ``i`` has its centre at ``i + 0.5``. A single-joint skeleton is a sphere.
    """
    if radius <= 0:
        raise DegenerateSkeleton(f"capsule radius must be positive, got {radius}")
    pts = (skel.joints + 0.5) * voxel_res
    c = np.arange(voxel_res, dtype=np.float64) + 0.5
    cx, cy, cz = np.meshgrid(c, c, c, indexing="ij")
    r2 = radius * radius
    bones = bone_list(skel) or [(0, 0)]
    occ = np.zeros((voxel_res,) * 3, dtype=bool)
    for a_idx, b_idx in bones:
        ax, ay, az = pts[a_idx]
        ex, ey, ez = pts[b_idx] - pts[a_idx]
        denom = ex * ex + ey * ey + ez * ez
        dx, dy, dz = cx - ax, cy - ay, cz - az
        if denom > 0:
            t = np.clip((dx * ex + dy * ey + dz * ez) / denom, 0.0, 1.0)
        else:
            t = np.zeros_like(dx)
        rx = cx - (ax + t * ex)
        ry = cy - (ay + t * ey)
        rz = cz - (az + t * ez)
        occ |= rx * rx + ry * ry + rz * rz <= r2
    return occ


def _round_f32(skel: Skeleton) -> Skeleton:
    return validate_skeleton(skel.joints.astype(np.float32).astype(np.float64), skel.parents)


def make_sample(seed: int, index: int, config: DataConfig) -> DatasetSample:
    """Sample ``index`` of the dataset with master ``seed``; independent of other indices."""
    rng = np.random.default_rng([seed, index])
    radius = float(np.float32(config.radius))
    for _ in range(MAX_RETRIES):
        family = Family(int(rng.integers(len(Family))))
        lo = max(config.min_joints, FAMILY_MIN_JOINTS[family])
        n = int(rng.integers(lo, config.max_joints + 1))
        skel = _round_f32(sample_random_tree(int(rng.integers(2**31)), n, family,
                                             min_joints=config.min_joints, max_joints=config.max_joints))
        occ = rasterize_capsules(skel, config.voxel_res, radius)
        if occ.any():
            return DatasetSample(skel, occ, int(family))
    raise DegenerateSkeleton(f"sample {index}: {MAX_RETRIES} empty rasterizations in a row")


def make_samples(seed: int, n_samples: int, config: DataConfig = DataConfig(), start: int = 0) -> list[DatasetSample]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return [make_sample(seed, start + i, config) for i in range(n_samples)]


def _encode_sample(s: DatasetSample) -> bytes:
    n = s.skeleton.n_joints
    out = struct.pack("<HH", s.label, n)
    out += s.skeleton.joints.astype("<f4").tobytes()
    out += s.skeleton.parents.astype("<i2").tobytes()
    out += np.packbits(s.occupancy.reshape(-1), bitorder="little").tobytes()
    return out


def encode_dataset(samples: list[DatasetSample], config: DataConfig) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, len(samples), config.voxel_res, config.max_joints, config.radius)
    return header + b"".join(_encode_sample(s) for s in samples)


def write_dataset(path, samples: list[DatasetSample], config: DataConfig = DataConfig()) -> None:
    Path(path).write_bytes(encode_dataset(samples, config))


def make_dataset(path, seed: int, n_samples: int, config: DataConfig = DataConfig()) -> list[DatasetSample]:
    samples = make_samples(seed, n_samples, config)
    write_dataset(path, samples, config)
    return samples


def _read_exact(f: BinaryIO, n: int, index: int) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise CorruptSample(index, f"truncated: wanted {n} bytes, got {len(chunk)}")
    return chunk


def read_header(f: BinaryIO) -> DatasetHeader:
    raw = f.read(_HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise DatasetError("truncated header")
    _, version, n, v, max_joints, radius = _HEADER.unpack(raw)
    if version != VERSION:
        raise VersionMismatch(f"file version {version}, reader supports {VERSION}")
    return DatasetHeader(n, v, max_joints, radius, version)


def iter_dataset(path, verify: bool = True) -> Iterator[DatasetSample]:
    """Stream samples in file order, validating each one."""
    with open(path, "rb") as f:
        header = read_header(f)
        v = header.voxel_res
        n_bytes_occ = (v**3 + 7) // 8
        for i in range(header.n_samples):
            label, n = struct.unpack("<HH", _read_exact(f, 4, i))
            if not 1 <= n <= header.max_joints:
                raise CorruptSample(i, f"joint count {n} outside [1, {header.max_joints}]")
            if label >= len(Family):
                raise CorruptSample(i, f"label {label} is not a known family")
            joints = np.frombuffer(_read_exact(f, 12 * n, i), dtype="<f4").reshape(n, 3)
            parents = np.frombuffer(_read_exact(f, 2 * n, i), dtype="<i2")
            bits = np.frombuffer(_read_exact(f, n_bytes_occ, i), dtype=np.uint8)
            occ = np.unpackbits(bits, count=v**3, bitorder="little").astype(bool).reshape(v, v, v)
            try:
                skel = validate_skeleton(joints.astype(np.float64), parents.astype(np.int64))
            except ValueError as exc:
                raise CorruptSample(i, f"invalid skeleton: {exc}") from exc
            if verify and not np.array_equal(occ, rasterize_capsules(skel, v, header.radius)):
                raise CorruptSample(i, "occupancy differs from the rasterized skeleton")
            yield DatasetSample(skel, occ, label)
        if f.read(1):
            raise DatasetError(f"trailing bytes after {header.n_samples} samples")


def load_dataset(path, verify: bool = True) -> tuple[DatasetHeader, list[DatasetSample]]:
    with open(path, "rb") as f:
        header = read_header(f)
    return header, list(iter_dataset(path, verify))


# --- standalone occupancy grids ------------------------------------------------

OCC_MAGIC = b"OCC1"
_OCC_HEADER = struct.Struct("<4sH")


def encode_occupancy_file(occ: np.ndarray) -> bytes:
    """``OCC1`` magic, V as u16, then the grid bit-packed like dataset samples."""
    occ = np.asarray(occ, dtype=bool)
    v = occ.shape[0]
    if occ.shape != (v, v, v):
        raise DatasetError(f"occupancy must be a cube, got {occ.shape}")
    return _OCC_HEADER.pack(OCC_MAGIC, v) + np.packbits(occ.reshape(-1), bitorder="little").tobytes()


def decode_occupancy_file(data: bytes) -> np.ndarray:
    if len(data) < _OCC_HEADER.size or data[:4] != OCC_MAGIC:
        raise BadMagic(f"expected magic {OCC_MAGIC!r}, got {data[:4]!r}")
    _, v = _OCC_HEADER.unpack_from(data)
    body = data[_OCC_HEADER.size :]
    if len(body) != (v**3 + 7) // 8:
        raise DatasetError(f"occupancy body has {len(body)} bytes, expected {(v**3 + 7) // 8}")
    bits = np.frombuffer(body, dtype=np.uint8)
    return np.unpackbits(bits, count=v**3, bitorder="little").astype(bool).reshape(v, v, v)


def write_occupancy(path, occ: np.ndarray) -> None:
    Path(path).write_bytes(encode_occupancy_file(occ))


def read_occupancy(path) -> np.ndarray:
    return decode_occupancy_file(Path(path).read_bytes())


def write_point_list(path, occ: np.ndarray) -> None:
    """Occupied voxel centres as OBJ vertex lines, normalized to [-0.5, 0.5]."""
    v = occ.shape[0]
    pts = (np.argwhere(occ) + 0.5) / v - 0.5
    Path(path).write_text("".join(f"v {x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in pts), encoding="utf-8")
