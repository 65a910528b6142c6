"""Human skeleton graph: exact-k-hop structure, affinity normalization, limb groups.

The default skeleton is the 16-joint kinematic tree used throughout:
0 pelvis (root), 1 R-hip, 2 R-knee, 3 R-foot, 4 L-hip, 5 L-knee, 6 L-foot,
7 spine, 8 thorax, 9 head, 10 L-shoulder, 11 L-elbow, 12 L-wrist,
13 R-shoulder, 14 R-elbow, 15 R-wrist.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SkeletonGraph", "AffinityMatrix", "build_skeleton", "default_skeleton",
    "hop_matrix", "normalize_affinity", "limb_groups", "parse_skeleton_file",
    "H36M_NUM_JOINTS", "H36M_EDGES", "H36M_ROOT", "H36M_JOINT_NAMES",
    "H36M_LIMB_GROUPS",
]

H36M_NUM_JOINTS = 16
H36M_ROOT = 0
H36M_EDGES = (
    (0, 1), (1, 2), (2, 3),        # right leg
    (0, 4), (4, 5), (5, 6),        # left leg
    (0, 7), (7, 8), (8, 9),        # spine to head
    (8, 10), (10, 11), (11, 12),   # left arm
    (8, 13), (13, 14), (14, 15),   # right arm
)
H36M_JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_foot", "l_hip", "l_knee", "l_foot",
    "spine", "thorax", "head", "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
)
H36M_LIMB_GROUPS = {
    "right_leg": (1, 2, 3),
    "left_leg": (4, 5, 6),
    "torso_head": (0, 7, 8, 9),
    "left_arm": (10, 11, 12),
    "right_arm": (13, 14, 15),
}


@dataclass(frozen=True)
class SkeletonGraph:
    """Immutable skeleton graph; safe to share read-only across threads."""

    num_joints: int
    edges: tuple
    root: int
    distances: np.ndarray        # all-pairs shortest path hop counts
    hop_matrices: tuple          # hop_matrices[k-1] is the exact-k binary matrix
    limb_groups: dict | None     # name -> sorted joint tuple, or None for custom

    @property
    def adjacency(self):
        return self.hop_matrices[0]

    @property
    def diameter(self):
        return len(self.hop_matrices)

    def hop_matrix(self, k):
        return hop_matrix(self, k)


def _validate_groups(num_joints, groups):
    seen = set()
    for name, members in groups.items():
        for j in members:
            if not 0 <= j < num_joints:
                raise ValueError(f"group {name!r} member {j} out of range")
            if j in seen:
                raise ValueError(f"joint {j} appears in more than one group")
            seen.add(j)
    if seen != set(range(num_joints)):
        missing = sorted(set(range(num_joints)) - seen)
        raise ValueError(f"groups do not cover joints {missing}")


def build_skeleton(num_joints, edges, root=0, groups=None):
    """Build a skeleton graph with all exact-k hop matrices precomputed.

    Distances come from per-node breadth-first search; the graph must be
    connected and free of duplicate or self edges. For the default 16-joint
    skeleton the limb groups are filled in automatically.
    """
    if num_joints < 1:
        raise ValueError("need at least one joint")
    if not 0 <= root < num_joints:
        raise ValueError(f"root {root} out of range for {num_joints} joints")
    canon = []
    seen = set()
    adj = [[] for _ in range(num_joints)]
    for i, j in edges:
        if not (0 <= i < num_joints and 0 <= j < num_joints):
            raise ValueError(f"edge ({i}, {j}) out of range for {num_joints} joints")
        if i == j:
            raise ValueError(f"self edge at joint {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ValueError(f"duplicate edge {key}")
        seen.add(key)
        canon.append(key)
        adj[i].append(j)
        adj[j].append(i)

    dist = np.full((num_joints, num_joints), -1, dtype=np.int64)
    for src in range(num_joints):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[src, v] < 0:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    if (dist < 0).any():
        raise ValueError("skeleton graph is disconnected; hop distances undefined")

    diameter = int(dist.max())
    hops = tuple((dist == k).astype(np.float64) for k in range(1, diameter + 1))

    if groups is None and num_joints == H36M_NUM_JOINTS and seen == {tuple(sorted(e)) for e in H36M_EDGES}:
        groups = dict(H36M_LIMB_GROUPS)
    if groups is not None:
        groups = {name: tuple(sorted(members)) for name, members in groups.items()}
        _validate_groups(num_joints, groups)

    return SkeletonGraph(num_joints, tuple(sorted(canon)), root, dist, hops, groups)


def default_skeleton():
    return build_skeleton(H36M_NUM_JOINTS, H36M_EDGES, H36M_ROOT)


def hop_matrix(graph, k):
    """Binary matrix with (i, j) = 1 iff the shortest path i->j has exactly k edges.

    k past the graph diameter yields the zero matrix.
    """
    if k < 1:
        raise ValueError(f"hop index must be >= 1, got {k}")
    if k <= graph.diameter:
        return graph.hop_matrices[k - 1]
    n = graph.num_joints
    return np.zeros((n, n), dtype=np.float64)


def limb_groups(graph):
    if graph.limb_groups is None:
        raise ValueError("custom skeleton has no limb groups; supply them at build time")
    return graph.limb_groups


@dataclass(frozen=True)
class AffinityMatrix:
    values: np.ndarray
    hop: int


def normalize_affinity(a, learnable=None, mode="symmetric", hop=1):
    """Normalize a nonnegative square affinity matrix with self-loops added.

    With ``learnable`` present, the matrix is squashed elementwise through a
    sigmoid and added to ``a`` before self-loops and normalization, so the
    learned component stays bounded in (0, 1). ``mode`` picks symmetric
    (D^-1/2 (A+I) D^-1/2) or row-stochastic (D^-1 (A+I)) scaling.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"affinity must be square, got shape {a.shape}")
    if (a < 0).any():
        raise ValueError("affinity must be nonnegative")
    aug = a + np.eye(a.shape[0])
    if learnable is not None:
        learnable = np.asarray(learnable, dtype=np.float64)
        if learnable.shape != a.shape:
            raise ValueError(f"learnable shape {learnable.shape} != affinity shape {a.shape}")
        aug = aug + 1.0 / (1.0 + np.exp(-learnable))
    deg = aug.sum(axis=1)
    if mode == "symmetric":
        inv_sqrt = 1.0 / np.sqrt(deg)
        values = aug * inv_sqrt[:, None] * inv_sqrt[None, :]
    elif mode == "row":
        values = aug / deg[:, None]
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return AffinityMatrix(values, hop)


def parse_skeleton_file(path):
    """Parse the plain-text skeleton format.

    First non-comment line is the joint count N, then one ``i j`` edge pair
    per line, plus optional ``group <name> i j k ...`` lines.
    """
    lines = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            text = raw.split("#", 1)[0].strip()
            if text:
                lines.append(text)
    if not lines:
        raise ValueError(f"skeleton file {path} is empty")
    try:
        n = int(lines[0])
    except ValueError:
        raise ValueError(f"skeleton file {path}: first line must be the joint count") from None
    edges = []
    groups = {}
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "group":
            if len(parts) < 3:
                raise ValueError(f"skeleton file {path}: malformed group line {line!r}")
            groups[parts[1]] = tuple(int(p) for p in parts[2:])
        else:
            if len(parts) != 2:
                raise ValueError(f"skeleton file {path}: malformed edge line {line!r}")
            edges.append((int(parts[0]), int(parts[1])))
    return build_skeleton(n, edges, root=0, groups=groups or None)
