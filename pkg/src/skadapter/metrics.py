"""Structural-alignment metrics: Chamfer, occupancy IoU and the rerigging score."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import EmptyOccupancy, EmptySet, ResolutionMismatch
from .skeleton import Skeleton, bone_list


def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptySet("point set is empty")
    return pts


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def chamfer(a, b) -> float:
    """Mean nearest-neighbour distance A->B plus B->A (Euclidean, not squared)."""
    a, b = _as_points(a), _as_points(b)
    d = pairwise_distances(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def occupancy_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ResolutionMismatch(f"{a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def sample_bone_points(skel: Skeleton, spacing: float) -> np.ndarray:
    """Every joint once, plus evenly spaced interior points on each bone.

    A bone of length L gets ``ceil(L / spacing) - 1`` interior points, so
    neighbouring samples are at most ``spacing`` apart.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = [skel.joints]
    for p, c in bone_list(skel):
        a, b = skel.joints[p], skel.joints[c]
        length = float(np.linalg.norm(b - a))
        n_seg = max(1, math.ceil(length / spacing - 1e-9))
        if n_seg > 1:
            t = np.arange(1, n_seg)[:, None] / n_seg
            pts.append(a + t * (b - a))
    return np.concatenate(pts, axis=0)


def voxel_centers(occ: np.ndarray) -> np.ndarray:
    v = occ.shape[0]
    return (np.argwhere(occ) + 0.5) / v - 0.5


# 3x3x3 neighbourhood, flat index (dx+1)*9 + (dy+1)*3 + (dz+1); the centre is 13
_OFFSETS = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
_CENTER = 13
_N26 = [k for k in range(27) if k != _CENTER]
_N18 = [k for k in _N26 if sum(map(abs, _OFFSETS[k])) <= 2]
_FACES = [k for k in _N26 if sum(map(abs, _OFFSETS[k])) == 1]


def _adjacent(a: int, b: int, six: bool) -> bool:
    d = [abs(x - y) for x, y in zip(_OFFSETS[a], _OFFSETS[b])]
    return sum(d) == 1 if six else max(d) == 1


_ADJ26 = {k: [m for m in _N26 if m != k and _adjacent(k, m, False)] for k in _N26}
_ADJ6 = {k: [m for m in _N18 if m != k and _adjacent(k, m, True)] for k in _N18}


def _components(nodes: set[int], adj: dict[int, list[int]]) -> list[set[int]]:
    seen: set[int] = set()
    comps = []
    for start in sorted(nodes):
        if start in seen:
            continue
        comp, stack = {start}, [start]
        while stack:
            for m in adj[stack.pop()]:
                if m in nodes and m not in comp:
                    comp.add(m)
                    stack.append(m)
        seen |= comp
        comps.append(comp)
    return comps


@lru_cache(maxsize=None)
def is_simple(neighbourhood: int) -> bool:
    """Whether deleting the centre voxel preserves topology (26-foreground, 6-background).

    ``neighbourhood`` is a 27-bit mask of the 3x3x3 block. Simple means exactly one
    26-component of foreground among the 26 neighbours and exactly one 6-component
    of background within the 18-neighbourhood that touches a face neighbour.
    """
    fg = {k for k in _N26 if neighbourhood >> k & 1}
    if not fg or len(_components(fg, _ADJ26)) != 1:
        return False
    bg = {k for k in _N18 if not neighbourhood >> k & 1}
    touching = [c for c in _components(bg, _ADJ6) if c & set(_FACES)]
    return len(touching) == 1


def _neighbourhood(grid: np.ndarray, x: int, y: int, z: int) -> int:
    block = grid[x - 1 : x + 2, y - 1 : y + 2, z - 1 : z + 2].reshape(-1)
    return int(np.dot(block.astype(np.int64), 1 << np.arange(27, dtype=np.int64)))


_DIRECTIONS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def thin(occ: np.ndarray) -> np.ndarray:
    """Topology-preserving 3D thinning towards a curve skeleton (26-connected foreground).

    Each pass peels the six face directions in turn. In direction ``d`` a voxel
    is removed when its ``+d`` neighbour is background, its ``-d`` neighbour is
    foreground (so a one-voxel-thick sheet is never eaten from its edge), it
    has more than one foreground neighbour (curve end points stay) and it is
    simple. Candidates are collected per direction and re-tested one by one in
    C order, so the result is deterministic. Passes repeat until stable.
    """
    occ = np.asarray(occ, dtype=bool)
    if not occ.any():
        raise EmptyOccupancy("nothing to thin")
    grid = np.pad(occ, 1)
    changed = True
    while changed:
        changed = False
        for dx, dy, dz in _DIRECTIONS:
            ahead = np.roll(grid, (-dx, -dy, -dz), axis=(0, 1, 2))
            behind = np.roll(grid, (dx, dy, dz), axis=(0, 1, 2))
            for x, y, z in np.argwhere(grid & ~ahead & behind):
                if not grid[x - dx, y - dy, z - dz]:
                    continue
                nb = _neighbourhood(grid, x, y, z)
                if bin(nb).count("1") <= 2:
                    continue  # curve end point
                if is_simple(nb):
                    grid[x, y, z] = False
                    changed = True
    return grid[1:-1, 1:-1, 1:-1]


def extract_skeleton_points(occ: np.ndarray) -> np.ndarray:
    """Centres of the voxels surviving :func:`thin`, in normalized coordinates."""
    return voxel_centers(thin(occ))


def rerigging_score(gen: np.ndarray, cond: Skeleton, spacing: float | None = None) -> float:
    """Chamfer between the thinned generated occupancy and the conditioning bones.

    ``spacing`` defaults to one voxel width.
    """
    gen = np.asarray(gen, dtype=bool)
    if spacing is None:
        spacing = 1.0 / gen.shape[0]
    return chamfer(extract_skeleton_points(gen), sample_bone_points(cond, spacing))
