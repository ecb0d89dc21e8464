"""Plain data containers shared between modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CurveSkeleton:
    """Polyline graph sampled inside the canonical shape.

    ``vertex_sample[i]`` is the sample that surface vertex ``i`` contracted to,
    which encodes the per-sample correspondence sets.
    """

    samples: np.ndarray  # (M, 3)
    edges: np.ndarray  # (E, 2) int
    vertex_sample: np.ndarray  # (N,) int
    sample_weights: np.ndarray | None = None  # (M, B)

    @property
    def sample_count(self):
        return len(self.samples)

    def adjacency(self):
        adj = [[] for _ in range(len(self.samples))]
        for a, b in self.edges:
            adj[a].append(int(b))
            adj[b].append(int(a))
        return [sorted(n) for n in adj]

    def degrees(self):
        deg = np.zeros(len(self.samples), dtype=int)
        np.add.at(deg, self.edges.reshape(-1), 1)
        return deg

    def mean_edge_length(self):
        if len(self.edges) == 0:
            return 0.0
        d = self.samples[self.edges[:, 0]] - self.samples[self.edges[:, 1]]
        return float(np.linalg.norm(d, axis=1).mean())

    def correspondences(self):
        """List of vertex index arrays, one per sample."""
        order = np.argsort(self.vertex_sample, kind="stable")
        counts = np.bincount(self.vertex_sample, minlength=len(self.samples))
        return np.split(order, np.cumsum(counts)[:-1])


@dataclass
class KinematicTree:
    """Joints with a parent array; ``parents[root] == -1``."""

    joints: np.ndarray  # (J, 3) canonical positions
    parents: np.ndarray  # (J,) int
    joint_samples: np.ndarray = field(default=None)  # (J,) skeleton sample index or -1

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float).reshape(-1, 3)
        self.parents = np.asarray(self.parents, dtype=int).reshape(-1)
        if self.joint_samples is None:
            self.joint_samples = np.full(len(self.joints), -1, dtype=int)
        self.joint_samples = np.asarray(self.joint_samples, dtype=int).reshape(-1)

    @property
    def joint_count(self):
        return len(self.joints)

    @property
    def root(self):
        return int(np.flatnonzero(self.parents < 0)[0])

    @property
    def edges(self):
        """(J-1, 2) array of (parent, child) pairs ordered by child index."""
        child = np.flatnonzero(self.parents >= 0)
        return np.stack([self.parents[child], child], axis=1).reshape(-1, 2)

    def children(self, j):
        return [int(c) for c in np.flatnonzero(self.parents == j)]

    def order(self):
        """Depth-first order from the root, children in ascending index."""
        out, stack = [], [self.root]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(reversed(self.children(j)))
        return out

    def depth(self):
        d = np.zeros(self.joint_count, dtype=int)
        for j in self.order():
            if self.parents[j] >= 0:
                d[j] = d[self.parents[j]] + 1
        return d

    def subtree(self, j):
        out, stack = [], [j]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(reversed(self.children(k)))
        return out

    def validate(self):
        """Raise ValueError unless this is a single-rooted acyclic tree."""
        j = self.joint_count
        if j == 0:
            raise ValueError("tree has no joints")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root, found {len(roots)}")
        if np.any(self.parents >= j):
            raise ValueError("parent index out of range")
        if len(self.order()) != j:
            raise ValueError("parent graph is cyclic or disconnected")
