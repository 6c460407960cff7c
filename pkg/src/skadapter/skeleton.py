"""Rooted-tree skeletons: validation, topology matrices, procedural sampling, text I/O."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CoordinateOutOfBounds,
    CycleDetected,
    IndexOutOfRange,
    InvalidJointCount,
    MultipleRoots,
    NonFiniteCoordinate,
    SkeletonParseError,
)

COORD_LIMIT = 0.5
DEFAULT_D_MAX = 5
N_RELATIONS = 6

# relation codes, assigned in this precedence order off the diagonal
SELF, PARENT, CHILD, SIBLING, DISTANT, END_EFFECTOR = range(N_RELATIONS)

MIN_BONE, MAX_BONE = 0.08, 0.35


class Family(enum.IntEnum):
    CHAIN = 0
    STAR = 1
    QUADRUPED = 2
    RANDOM = 3

    @classmethod
    def parse(cls, value: "Family | str | int") -> "Family":
        if isinstance(value, Family):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint coordinates (N x 3, normalized to [-0.5, 0.5]^3) plus a parent array.

    Construct through :func:`validate_skeleton`; the arrays are made read-only.
    """

    joints: np.ndarray
    parents: np.ndarray
    _children: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        children: list[list[int]] = [[] for _ in range(len(self.parents))]
        for i, p in enumerate(self.parents):
            if p >= 0:
                children[p].append(i)
        object.__setattr__(self, "_children", tuple(tuple(c) for c in children))

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parents == -1)[0])

    def children(self, i: int) -> tuple[int, ...]:
        return self._children[i]

    def is_leaf(self, i: int) -> bool:
        return not self._children[i]

    def depths(self) -> np.ndarray:
        depth = np.full(self.n_joints, -1, dtype=np.int64)
        for i in range(self.n_joints):
            path = []
            j = i
            while depth[j] < 0 and self.parents[j] >= 0:
                path.append(j)
                j = self.parents[j]
            if depth[j] < 0:
                depth[j] = 0
            for k in reversed(path):
                depth[k] = depth[self.parents[k]] + 1
        return depth

    def permuted(self, perm) -> "Skeleton":
        """Relabel joints so that new joint ``k`` is old joint ``perm[k]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        old_parents = self.parents[perm]
        parents = np.where(old_parents >= 0, inv[np.maximum(old_parents, 0)], -1)
        return validate_skeleton(self.joints[perm], parents)

    def translated(self, offset) -> "Skeleton":
        """Shift every joint; the result is clipped into the normalized cube."""
        joints = np.clip(self.joints + np.asarray(offset, dtype=np.float64), -COORD_LIMIT, COORD_LIMIT)
        return validate_skeleton(joints, self.parents)

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return (
            self.joints.shape == other.joints.shape
            and np.array_equal(self.joints, other.joints)
            and np.array_equal(self.parents, other.parents)
        )

    def __hash__(self):
        return hash((self.joints.tobytes(), self.parents.tobytes()))


def validate_skeleton(joints, parents) -> Skeleton:
    """Check the tree invariants and return an immutable :class:`Skeleton`.

    Inputs are copied; the caller's arrays are never touched.
    """
    joints = np.array(joints, dtype=np.float64, copy=True)
    parents = np.array(parents, dtype=np.int64, copy=True)
    if joints.ndim != 2 or joints.shape[1] != 3:
        raise InvalidJointCount(f"joints must be N x 3, got shape {joints.shape}")
    n = len(parents)
    if n < 1 or joints.shape[0] != n:
        raise InvalidJointCount(f"need N >= 1 joints matching {n} parents, got {joints.shape[0]}")

    if not np.all(np.isfinite(joints)):
        raise NonFiniteCoordinate("joint coordinates must be finite")
    if np.any(np.abs(joints) > COORD_LIMIT):
        bad = int(np.flatnonzero(np.any(np.abs(joints) > COORD_LIMIT, axis=1))[0])
        raise CoordinateOutOfBounds(f"joint {bad} at {joints[bad].tolist()} leaves [-0.5, 0.5]^3")

    roots = np.flatnonzero(parents == -1)
    bad_index = (parents < -1) | (parents >= n)
    if bad_index.any():
        i = int(np.flatnonzero(bad_index)[0])
        raise IndexOutOfRange(f"parent of joint {i} is {parents[i]}, outside [0, {n})")
    if len(roots) > 1:
        raise MultipleRoots(f"{len(roots)} roots: {roots.tolist()}")

    # Walking up from every joint must terminate at the root within n steps.
    state = np.zeros(n, dtype=np.int8)  # 0 unseen, 1 on current path, 2 reaches root
    for start in range(n):
        path = []
        j = start
        while j != -1 and state[j] == 0:
            state[j] = 1
            path.append(j)
            j = parents[j]
        if j != -1 and state[j] == 1:
            raise CycleDetected(f"parent chain from joint {start} revisits joint {j}")
        for k in path:
            state[k] = 2
    if len(roots) == 0:
        # unreachable in practice: a parent array without -1 always has a cycle
        raise CycleDetected("no root joint")

    joints.setflags(write=False)
    parents.setflags(write=False)
    return Skeleton(joints, parents)


def bone_list(skel: Skeleton) -> list[tuple[int, int]]:
    return [(int(p), i) for i, p in enumerate(skel.parents) if p >= 0]


def _ancestor_chains(skel: Skeleton) -> list[list[int]]:
    chains = []
    for i in range(skel.n_joints):
        chain = [i]
        while skel.parents[chain[-1]] >= 0:
            chain.append(int(skel.parents[chain[-1]]))
        chains.append(chain)
    return chains


def tree_distance_matrix(skel: Skeleton) -> np.ndarray:
    """Unclipped hop counts, via depth(i) + depth(j) - 2 depth(lca)."""
    n = skel.n_joints
    chains = _ancestor_chains(skel)
    depth = np.array([len(c) - 1 for c in chains], dtype=np.int64)
    dist = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        ancestors_i = set(chains[i])
        for j in range(i + 1, n):
            lca = next(a for a in chains[j] if a in ancestors_i)
            dist[i, j] = dist[j, i] = depth[i] + depth[j] - 2 * depth[lca]
    return dist


def topo_distance_matrix(skel: Skeleton, d_max: int = DEFAULT_D_MAX) -> np.ndarray:
    if d_max < 1:
        raise ValueError(f"d_max must be >= 1, got {d_max}")
    return np.minimum(tree_distance_matrix(skel), d_max)


def relation_matrix(skel: Skeleton) -> np.ndarray:
    n = skel.n_joints
    p = skel.parents
    rel = np.full((n, n), DISTANT, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i == j:
                rel[i, j] = END_EFFECTOR if skel.is_leaf(i) else SELF
            elif p[i] == j:
                rel[i, j] = PARENT
            elif p[j] == i:
                rel[i, j] = CHILD
            elif p[i] == p[j]:
                rel[i, j] = SIBLING
    return rel


@dataclass(frozen=True)
class TopologyMatrices:
    D: np.ndarray
    R: np.ndarray
    d_max: int = DEFAULT_D_MAX

    @classmethod
    def of(cls, skel: Skeleton, d_max: int = DEFAULT_D_MAX) -> "TopologyMatrices":
        return cls(topo_distance_matrix(skel, d_max), relation_matrix(skel), d_max)

    @property
    def n(self) -> int:
        return self.D.shape[0]


# --- procedural sampling -----------------------------------------------------

FAMILY_MIN_JOINTS = {Family.CHAIN: 2, Family.STAR: 2, Family.QUADRUPED: 6, Family.RANDOM: 2}

# quadruped growth order after the six-joint core (hip, shoulder, four legs):
# lower legs, then head, then tail
_QUAD_PARENTS = [-1, 0, 1, 1, 0, 0, 2, 3, 4, 5, 1, 0]
_QUAD_ROLES = ["hip", "shoulder", "leg", "leg", "leg", "leg", "leg", "leg", "leg", "leg", "head", "tail"]


def _family_parents(family: Family, n: int, rng: np.random.Generator) -> list[int]:
    if family is Family.CHAIN:
        return [-1] + list(range(n - 1))
    if family is Family.STAR:
        return [-1] + [0] * (n - 1)
    if family is Family.QUADRUPED:
        if n > len(_QUAD_PARENTS):
            raise InvalidJointCount(f"quadruped supports at most {len(_QUAD_PARENTS)} joints")
        return _QUAD_PARENTS[:n]
    return [-1] + [int(rng.integers(0, i)) for i in range(1, n)]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(np.linalg.norm(v), 1e-12)


def _bone_direction(family, i, parents, joints, rng, spine_dir):
    if family is Family.CHAIN and i >= 2:
        prev = _unit(joints[parents[i]] - joints[parents[parents[i]]])
        return _unit(prev + 0.9 * rng.normal(size=3))
    if family is Family.QUADRUPED:
        role = _QUAD_ROLES[i]
        if role == "shoulder":
            return spine_dir
        if role == "leg":
            side = np.cross(spine_dir, [0.0, 1.0, 0.0])
            sign = 1.0 if i in (2, 4, 6, 8) else -1.0
            return _unit(np.array([0.0, -1.0, 0.0]) + 0.35 * sign * side + 0.15 * rng.normal(size=3))
        if role == "head":
            return _unit(spine_dir + np.array([0.0, 0.8, 0.0]) + 0.2 * rng.normal(size=3))
        return _unit(-spine_dir + np.array([0.0, 0.5, 0.0]) + 0.2 * rng.normal(size=3))
    return _unit(rng.normal(size=3))


def sample_random_tree(
    seed: int,
    n_joints: int,
    family: Family | str | int,
    *,
    min_joints: int = 4,
    max_joints: int = 12,
    margin: float = 0.08,
) -> Skeleton:
    """Draw a random skeleton of a given topology family.

    Deterministic in ``(seed, n_joints, family)``. Every bone length lies in
    [0.08, 0.35] and all joints stay at least ``margin`` inside the unit cube.
    """
    family = Family.parse(family)
    lo = max(min_joints, FAMILY_MIN_JOINTS[family])
    if not lo <= n_joints <= max_joints:
        raise InvalidJointCount(f"{family.name.lower()} needs {lo}..{max_joints} joints, got {n_joints}")

    rng = np.random.default_rng([seed, n_joints, int(family)])
    parents = _family_parents(family, n_joints, rng)
    bound = COORD_LIMIT - margin
    for _ in range(200):
        joints = np.zeros((n_joints, 3))
        if family is Family.QUADRUPED:
            joints[0] = rng.uniform([-0.1, 0.05, -0.1], [0.1, 0.2, 0.1])
            theta = rng.uniform(0, 2 * math.pi)
            spine_dir = np.array([math.cos(theta), 0.0, math.sin(theta)])
        else:
            joints[0] = rng.uniform(-0.15, 0.15, size=3)
            spine_dir = None
        ok = True
        for i in range(1, n_joints):
            for _ in range(50):
                d = _bone_direction(family, i, parents, joints, rng, spine_dir)
                length = rng.uniform(MIN_BONE, MAX_BONE)
                cand = joints[parents[i]] + length * d
                if np.all(np.abs(cand) <= bound):
                    joints[i] = cand
                    break
            else:
                ok = False
                break
        if ok:
            return validate_skeleton(joints, parents)
    raise InvalidJointCount(f"could not place {n_joints} joints inside the cube")  # pragma: no cover


# --- text format -------------------------------------------------------------


def parse_skeleton_text(text: str) -> Skeleton:
    """Parse ``N`` followed by N lines of ``x y z parent``."""
    lines = [(k + 1, ln.strip()) for k, ln in enumerate(text.split("\n"))]
    lines = [(k, ln) for k, ln in lines if ln]
    if not lines:
        raise SkeletonParseError(1, "empty skeleton file")
    k0, head = lines[0]
    try:
        n = int(head)
    except ValueError:
        raise SkeletonParseError(k0, f"expected joint count, got {head!r}") from None
    if n < 1:
        raise SkeletonParseError(k0, f"joint count must be >= 1, got {n}")
    rows = lines[1:]
    if len(rows) != n:
        raise SkeletonParseError(rows[-1][0] if rows else k0, f"expected {n} joint lines, found {len(rows)}")
    joints, parents = [], []
    for k, ln in rows:
        parts = ln.split()
        if len(parts) != 4:
            raise SkeletonParseError(k, f"expected 'x y z parent', got {ln!r}")
        try:
            joints.append([float(v) for v in parts[:3]])
            parents.append(int(parts[3]))
        except ValueError as exc:
            raise SkeletonParseError(k, str(exc)) from None
    try:
        return validate_skeleton(joints, parents)
    except Exception as exc:
        raise SkeletonParseError(rows[0][0], f"invalid skeleton: {exc}") from exc


def format_skeleton_text(skel: Skeleton) -> str:
    out = [str(skel.n_joints)]
    for (x, y, z), p in zip(skel.joints, skel.parents):
        out.append(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(p)}")
    return "\n".join(out) + "\n"


def read_skeleton(path) -> Skeleton:
    return parse_skeleton_text(Path(path).read_text(encoding="utf-8"))


def write_skeleton(path, skel: Skeleton) -> None:
    Path(path).write_text(format_skeleton_text(skel), encoding="utf-8", newline="\n")
