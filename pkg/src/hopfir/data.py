"""Dataset ingestion, input normalization, and a synthetic pose generator.

Two on-disk formats:

* ``hfp`` (binary, primary): magic ``HFP1``, u32 LE joint count N, u64 LE
  sample count; per sample a u32 LE action-label length plus UTF-8 bytes,
  then N*2 float32 LE (normalized 2D) and N*3 float32 LE (root-relative 3D
  in meters).
* ``csv`` (for human inspection): header
  ``action,j0x2,j0y2,...,j{N-1}x2,j{N-1}y2,j0x3,j0y3,j0z3,...``, one sample
  per row.

2D inputs live in image-width-normalized coordinates: the principal point
maps to the origin and both axes are scaled by half the image width, so the
aspect ratio is preserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .skeleton import H36M_EDGES, H36M_NUM_JOINTS, SkeletonGraph
from .tensor import Rng

__all__ = [
    "PoseSample", "CameraModel", "DataError",
    "load_dataset", "write_dataset", "normalize_sample", "denormalize_2d",
    "synth_poses", "stack_samples", "BONE_TABLE", "JOINT_ANGLE_LIMITS_DEG",
]

STREAM_DATA = 3


class DataError(ValueError):
    pass


@dataclass
class PoseSample:
    joints2d: np.ndarray          # (N, 2) normalized image coordinates
    joints3d: np.ndarray          # (N, 3) meters, root-relative
    action: str = ""
    subject: str = ""

    def validate(self, expected_joints=None, root=0):
        j2, j3 = np.asarray(self.joints2d), np.asarray(self.joints3d)
        if j2.ndim != 2 or j2.shape[1] != 2 or j3.ndim != 2 or j3.shape[1] != 3:
            raise DataError(f"bad sample shapes {j2.shape} / {j3.shape}")
        if j2.shape[0] != j3.shape[0]:
            raise DataError(f"2D joint count {j2.shape[0]} != 3D joint count {j3.shape[0]}")
        if expected_joints is not None and j2.shape[0] != expected_joints:
            raise DataError(
                f"sample has {j2.shape[0]} joints but the skeleton has {expected_joints}")
        if not (np.isfinite(j2).all() and np.isfinite(j3).all()):
            raise DataError("sample contains NaN/Inf")
        if np.abs(j3[root]).max() > 1e-6:
            raise DataError(f"root joint is not at the origin: {j3[root]}")
        return self


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 1000
    height: int = 1000

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        return self

    def project(self, points3d):
        """Perspective projection of camera-space points (Z > 0) to pixels."""
        p = np.asarray(points3d, dtype=np.float64)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx,
                         self.fy * p[..., 1] / z + self.cy], axis=-1)


def normalize_sample(pixels2d, camera_space3d, camera, root=0, action="", subject=""):
    """Map raw detections to the model's input frame.

    2D pixels are centered on the principal point and scaled by width/2 on
    both axes; 3D is shifted so the root joint sits at the origin.
    """
    camera.validate()
    px = np.asarray(pixels2d, dtype=np.float64)
    half_w = camera.width / 2.0
    j2 = np.stack([(px[:, 0] - camera.cx) / half_w,
                   (px[:, 1] - camera.cy) / half_w], axis=-1)
    j3 = np.asarray(camera_space3d, dtype=np.float64)
    j3 = j3 - j3[root]
    return PoseSample(j2.astype(np.float32), j3.astype(np.float32), action, subject)


def denormalize_2d(joints2d, camera):
    """Invert the 2D normalization back to pixel coordinates."""
    j = np.asarray(joints2d, dtype=np.float64)
    half_w = camera.width / 2.0
    return np.stack([j[:, 0] * half_w + camera.cx,
                     j[:, 1] * half_w + camera.cy], axis=-1)


# ---------------------------------------------------------------------------
# File formats


def write_dataset(path, samples, fmt="hfp"):
    if fmt == "hfp":
        _write_hfp(path, samples)
    elif fmt == "csv":
        _write_csv(path, samples)
    else:
        raise DataError(f"unknown dataset format {fmt!r}")


def load_dataset(path, fmt="hfp", expected_joints=None):
    """Load samples, validating the per-sample invariants.

    ``expected_joints`` ties the file to a configured skeleton; a mismatch is
    an error naming both counts.
    """
    if fmt == "hfp":
        samples = _read_hfp(path)
    elif fmt == "csv":
        samples = _read_csv(path)
    else:
        raise DataError(f"unknown dataset format {fmt!r}")
    for sample in samples:
        sample.validate(expected_joints=expected_joints)
    return samples


_HFP_MAGIC = b"HFP1"


def _write_hfp(path, samples):
    n = samples[0].joints2d.shape[0] if samples else 0
    with open(path, "wb") as fh:
        fh.write(_HFP_MAGIC)
        fh.write(int(n).to_bytes(4, "little"))
        fh.write(len(samples).to_bytes(8, "little"))
        for s in samples:
            label = s.action.encode("utf-8")
            fh.write(len(label).to_bytes(4, "little"))
            fh.write(label)
            fh.write(np.ascontiguousarray(s.joints2d, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.joints3d, dtype="<f4").tobytes())


def _read_hfp(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) == 0:
        return []
    if buf[:4] != _HFP_MAGIC:
        raise DataError(f"{path}: not an hfp dataset (bad magic)")
    pos = 4

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise DataError(f"{path}: truncated {what} at byte offset {pos}")
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    n = int.from_bytes(take(4, "header"), "little")
    count = int.from_bytes(take(8, "header"), "little")
    samples = []
    for i in range(count):
        label_len = int.from_bytes(take(4, f"sample {i} label length"), "little")
        action = take(label_len, f"sample {i} label").decode("utf-8")
        j2 = np.frombuffer(take(n * 2 * 4, f"sample {i} 2D block"), dtype="<f4").reshape(n, 2)
        j3 = np.frombuffer(take(n * 3 * 4, f"sample {i} 3D block"), dtype="<f4").reshape(n, 3)
        samples.append(PoseSample(j2.copy(), j3.copy(), action))
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes after sample {count - 1}")
    return samples


def _csv_header(n):
    cols = ["action"]
    cols += [f"j{i}{a}2" for i in range(n) for a in "xy"]
    cols += [f"j{i}{a}3" for i in range(n) for a in "xyz"]
    return ",".join(cols)


def _write_csv(path, samples):
    n = samples[0].joints2d.shape[0] if samples else H36M_NUM_JOINTS
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_csv_header(n) + "\n")
        for s in samples:
            values = [s.action]
            values += [np.format_float_repr(v) for v in np.asarray(s.joints2d, dtype=np.float32).ravel()]
            values += [np.format_float_repr(v) for v in np.asarray(s.joints3d, dtype=np.float32).ravel()]
            fh.write(",".join(values) + "\n")


def _read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return []
    header = lines[0].split(",")
    if (len(header) - 1) % 5:
        raise DataError(f"{path}: line 1: header has {len(header)} columns, expected 1 + 5*N")
    n = (len(header) - 1) // 5
    if header != _csv_header(n).split(","):
        raise DataError(f"{path}: line 1: unexpected header for {n} joints")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 1 + 5 * n:
            raise DataError(f"{path}: line {lineno}: {len(parts)} fields, expected {1 + 5 * n}")
        try:
            flat = np.asarray([float(v) for v in parts[1:]], dtype=np.float32)
        except ValueError as e:
            raise DataError(f"{path}: line {lineno}: {e}") from None
        samples.append(PoseSample(flat[:2 * n].reshape(n, 2), flat[2 * n:].reshape(n, 3), parts[0]))
    return samples


def stack_samples(samples, dtype=np.float32):
    """Stack a sample list into (M, N, 2) inputs and (M, N, 3) targets."""
    x = np.stack([s.joints2d for s in samples]).astype(dtype)
    y = np.stack([s.joints3d for s in samples]).astype(dtype)
    return x, y


# ---------------------------------------------------------------------------
# Synthetic kinematic poses
#
# Segment lengths (meters) and rest directions for the default skeleton in a
# y-up body frame; conservative per-joint rotation limits keep the samples
# human-plausible at desk scale.

BONE_TABLE = {
    # child: (parent, rest direction, length in meters)
    1: (0, (-1.0, 0.0, 0.0), 0.13),
    2: (1, (0.0, -1.0, 0.0), 0.45),
    3: (2, (0.0, -1.0, 0.0), 0.44),
    4: (0, (1.0, 0.0, 0.0), 0.13),
    5: (4, (0.0, -1.0, 0.0), 0.45),
    6: (5, (0.0, -1.0, 0.0), 0.44),
    7: (0, (0.0, 1.0, 0.0), 0.24),
    8: (7, (0.0, 1.0, 0.0), 0.25),
    9: (8, (0.0, 1.0, 0.0), 0.18),
    10: (8, (1.0, 0.0, 0.0), 0.17),
    11: (10, (0.0, -1.0, 0.0), 0.28),
    12: (11, (0.0, -1.0, 0.0), 0.25),
    13: (8, (-1.0, 0.0, 0.0), 0.17),
    14: (13, (0.0, -1.0, 0.0), 0.28),
    15: (14, (0.0, -1.0, 0.0), 0.25),
}

JOINT_ANGLE_LIMITS_DEG = {
    1: 50.0, 4: 50.0,      # hips
    2: 120.0, 5: 120.0,    # knees
    3: 35.0, 6: 35.0,      # ankles
    7: 25.0, 8: 25.0,      # spine, thorax
    9: 40.0,               # neck/head
    10: 80.0, 13: 80.0,    # shoulders
    11: 110.0, 14: 110.0,  # elbows
    12: 45.0, 15: 45.0,    # wrists
}


def _rotation_about(axis, angle):
    x, y, z = axis
    c, s, t = math.cos(angle), math.sin(angle), 1.0 - math.cos(angle)
    return np.array([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])


def _random_axis(gen):
    v = gen.normal(size=3)
    return v / np.linalg.norm(v)


def _fk_pose(gen):
    """Sample one pose: per-joint rotations within limits, composed down the tree."""
    positions = np.zeros((H36M_NUM_JOINTS, 3))
    rotations = {0: _rotation_about((0.0, 1.0, 0.0), gen.uniform(0.0, 2.0 * math.pi))}
    for child in sorted(BONE_TABLE):
        parent, rest_dir, length = BONE_TABLE[child]
        limit = math.radians(JOINT_ANGLE_LIMITS_DEG[child])
        local = _rotation_about(_random_axis(gen), gen.uniform(0.0, limit))
        rotations[child] = rotations[parent] @ local
        offset = rotations[child] @ (np.asarray(rest_dir) * length)
        positions[child] = positions[parent] + offset
    return positions


def _random_camera(gen):
    f = gen.uniform(900.0, 1200.0)
    return CameraModel(fx=f, fy=f, cx=500.0, cy=500.0, width=1000, height=1000)


def synth_poses(count, seed, graph: SkeletonGraph):
    """Deterministic synthetic samples: forward kinematics plus projection.

    Bone lengths are exactly the table constants; each sample gets its own
    randomized camera. Only the default 16-joint skeleton is supported.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if graph.num_joints != H36M_NUM_JOINTS or set(graph.edges) != {tuple(sorted(e)) for e in H36M_EDGES}:
        raise ValueError("synthetic generation supports only the default 16-joint skeleton")
    samples = []
    for index in range(count):
        gen = Rng(seed, STREAM_DATA, index).gen
        body = _fk_pose(gen)
        camera = _random_camera(gen)
        # rigid world->camera map: y flips down, the body sits on the optical axis
        distance = gen.uniform(3.5, 5.5)
        lateral = gen.uniform(-0.3, 0.3, size=2)
        cam_space = np.stack([
            body[:, 0] + lateral[0],
            -body[:, 1] + lateral[1],
            distance - body[:, 2],
        ], axis=-1)
        pixels = camera.project(cam_space)
        samples.append(normalize_sample(pixels, cam_space, camera,
                                        root=graph.root, action=f"synthetic{index % 4}"))
    return samples
