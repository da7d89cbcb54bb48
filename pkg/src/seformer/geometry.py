"""Point-cloud geometry kernels.

Voxelization, grid downsampling, farthest-point sampling, ball query, and
the lattice virtual-point interpolation that produces attention keys.  All
functions are pure given their inputs (plus an explicit seed where
sampling exists), so they are safe to call concurrently on shared
read-only clouds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, weighted_gather
from .exceptions import ContractError, NumericError, ShapeError

IDW_EPS = 1e-8


def check_coords(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"coordinates must be (N, 3), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise NumericError("coordinates contain non-finite values")
    return coords


def check_features(feats, n: int) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != n:
        raise ShapeError(f"features must be ({n}, C), got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise NumericError("features contain non-finite values")
    return feats


@dataclass
class PointCloud:
    """N point coordinates (meters) plus N feature rows of width C."""

    coords: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        self.coords = check_coords(self.coords)
        self.feats = check_features(self.feats, self.coords.shape[0])

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.feats.shape[1]

    def translated(self, vec) -> "PointCloud":
        return PointCloud(self.coords + np.asarray(vec, dtype=np.float64), self.feats)


# ---------------------------------------------------------------------------
# grid offsets

def _build_offsets(corners_only: bool) -> np.ndarray:
    offs = [(i, j, k)
            for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
            if not corners_only or (abs(i) == 1 and abs(j) == 1 and abs(k) == 1)]
    return np.array(offs, dtype=np.int64)


OFFSETS_27 = _build_offsets(corners_only=False)
OFFSETS_8 = _build_offsets(corners_only=True)
N_GRID_SLOTS = 27
FALLBACK_SLOT = 27  # value-pool slot for keys without a grid offset


@dataclass(frozen=True)
class GridOffset:
    """One lattice displacement, each component in {-1, 0, +1}."""

    i: int
    j: int
    k: int

    def __post_init__(self):
        for v in (self.i, self.j, self.k):
            if v not in (-1, 0, 1):
                raise ContractError(f"grid offset component {v} outside {{-1,0,1}}")

    @property
    def flat(self) -> int:
        return (self.i + 1) * 9 + (self.j + 1) * 3 + (self.k + 1)

    @staticmethod
    def from_flat(flat: int) -> "GridOffset":
        if not 0 <= flat < 27:
            raise ContractError(f"flat grid index {flat} outside [0, 27)")
        return GridOffset(flat // 9 - 1, (flat // 3) % 3 - 1, flat % 3 - 1)

    def as_array(self) -> np.ndarray:
        return np.array([self.i, self.j, self.k], dtype=np.int64)


def flat_slots(offsets: np.ndarray) -> np.ndarray:
    """Flat pool slots for an (S, 3) array of lattice offsets."""
    return ((offsets[:, 0] + 1) * 9 + (offsets[:, 1] + 1) * 3 + (offsets[:, 2] + 1))


def grid_layout(n_cells: int) -> np.ndarray:
    if n_cells == 27:
        return OFFSETS_27
    if n_cells == 8:
        return OFFSETS_8
    raise ContractError(f"grid layout must have 27 or 8 cells, got {n_cells}")


# ---------------------------------------------------------------------------
# voxel grids

@dataclass
class VoxelGrid:
    """Sparse voxel grid: occupied integer cells with aggregated features.

    ``feats`` is a plain array for raw grids and an autodiff tensor once a
    learned projection has been applied.
    """

    origin: np.ndarray
    step: np.ndarray
    indices: np.ndarray           # (M, 3) int64
    counts: np.ndarray            # (M,) int64
    feats: np.ndarray | Tensor    # (M, W)
    range_lo: np.ndarray
    range_hi: np.ndarray
    dropped: int = 0
    index_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index_of:
            self.index_of = {tuple(ix): row for row, ix in enumerate(self.indices)}

    @property
    def n_cells(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.feats.shape[1]

    def cell_centers(self) -> np.ndarray:
        return self.origin + (self.indices + 0.5) * self.step

    def feature_array(self) -> np.ndarray:
        return self.feats.data if isinstance(self.feats, Tensor) else self.feats


def voxelize(pc: PointCloud, origin, step, range_lo, range_hi) -> VoxelGrid:
    """Assign points to cells of size ``step``; cell feature = member mean.

    Out-of-range points are dropped and counted.  An empty result is legal.
    """
    origin = np.asarray(origin, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    range_lo = np.asarray(range_lo, dtype=np.float64)
    range_hi = np.asarray(range_hi, dtype=np.float64)
    if np.any(step <= 0.0):
        raise ContractError(f"voxel step must be positive, got {step}")
    if np.any(range_hi <= range_lo):
        raise ContractError("voxel range is degenerate")

    inside = np.all((pc.coords >= range_lo) & (pc.coords < range_hi), axis=1)
    dropped = int(pc.n - inside.sum())
    coords = pc.coords[inside]
    feats = pc.feats[inside]
    if coords.shape[0] == 0:
        return VoxelGrid(origin, step, np.zeros((0, 3), dtype=np.int64),
                         np.zeros(0, dtype=np.int64),
                         np.zeros((0, pc.width)), range_lo, range_hi, dropped)

    cells = np.floor((coords - origin) / step).astype(np.int64)
    uniq, inverse, counts = np.unique(cells, axis=0, return_inverse=True,
                                      return_counts=True)
    summed = np.zeros((uniq.shape[0], pc.width))
    np.add.at(summed, inverse, feats)
    mean = summed / counts[:, None]
    return VoxelGrid(origin, step, uniq, counts.astype(np.int64), mean,
                     range_lo, range_hi, dropped)


def merge_plan(indices: np.ndarray, counts: np.ndarray):
    """2x2x2 parent cells and count-weighted child gather columns.

    Returns (parent_indices, parent_counts, idx, w) with idx/w shaped
    (P, 8), zero-padded for parents with fewer than eight children.
    """
    parents = np.floor_divide(indices, 2)
    uniq, inverse = np.unique(parents, axis=0, return_inverse=True)
    n_parents = uniq.shape[0]
    pcounts = np.zeros(n_parents, dtype=np.int64)
    np.add.at(pcounts, inverse, counts)

    order = np.argsort(inverse, kind="stable")
    sp = inverse[order]
    starts = np.searchsorted(sp, np.arange(n_parents))
    cols = np.arange(order.size) - starts[sp]
    idx = np.zeros((n_parents, 8), dtype=np.intp)
    w = np.zeros((n_parents, 8))
    idx[sp, cols] = order
    w[sp, cols] = counts[order] / pcounts[sp]
    return uniq, pcounts, idx, w


def downsample_grid(vg: VoxelGrid, factor: int = 2, transform=None) -> VoxelGrid:
    """Merge 2x2x2 child cells by point-count-weighted mean.

    ``transform`` (a tensor-valued callable), when given, maps the merged
    features to the next stage's channel width.
    """
    if factor != 2:
        raise ContractError(f"downsample factor must be 2, got {factor}")
    if vg.n_cells == 0:
        feats = vg.feats
        if transform is not None:
            feats = transform(feats)
        return VoxelGrid(vg.origin, vg.step * 2, vg.indices.copy(), vg.counts.copy(),
                         feats, vg.range_lo, vg.range_hi)

    uniq, counts, idx, w = merge_plan(vg.indices, vg.counts)
    if isinstance(vg.feats, Tensor):
        merged = weighted_gather(vg.feats, idx, w)
    else:
        merged = np.einsum("pj,pjc->pc", w, vg.feats[idx])
    if transform is not None:
        merged = transform(merged)
    return VoxelGrid(vg.origin, vg.step * 2, uniq, counts, merged,
                     vg.range_lo, vg.range_hi)


# ---------------------------------------------------------------------------
# sampling

def farthest_point_sample(pc: PointCloud | np.ndarray, k: int, seed: int,
                          start: int | None = None) -> np.ndarray:
    """Greedy farthest-point sampling; deterministic given seed (or start)."""
    coords = pc.coords if isinstance(pc, PointCloud) else check_coords(pc)
    n = coords.shape[0]
    if k < 1 or k > n:
        raise ContractError(f"farthest_point_sample: k={k} outside [1, {n}]")
    if start is None:
        start = int(np.random.default_rng(seed).integers(0, n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    min_d = np.linalg.norm(coords - coords[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d))  # first occurrence wins ties
        chosen[i] = nxt
        min_d = np.minimum(min_d, np.linalg.norm(coords - coords[nxt], axis=1))
    return chosen


def ball_query(pc: PointCloud, center, radius: float, max_k: int,
               seed: int) -> np.ndarray:
    """Indices of points within ``radius`` of ``center``.

    Candidates are ordered by (distance, index); when more than ``max_k``
    qualify the kept subset is a seeded uniform choice, returned in
    ascending-distance order.
    """
    if radius <= 0.0:
        raise ContractError(f"ball_query radius must be positive, got {radius}")
    if max_k < 1:
        raise ContractError(f"ball_query max_k must be >= 1, got {max_k}")
    center = np.asarray(center, dtype=np.float64)
    d = np.linalg.norm(pc.coords - center, axis=1)
    cand = np.flatnonzero(d <= radius)
    cand = cand[np.lexsort((cand, d[cand]))]
    if cand.size > max_k:
        keep = np.random.default_rng(seed).choice(cand, size=max_k, replace=False)
        keep = keep[np.lexsort((keep, d[keep]))]
        return keep.astype(np.int64)
    return cand.astype(np.int64)


# ---------------------------------------------------------------------------
# interpolation plans and virtual keys

def _plan_row(dist_row: np.ndarray, radius: float, k: int):
    """Exact (distance, index)-ordered selection for one target."""
    inside = np.flatnonzero(dist_row <= radius)
    if inside.size == 0:
        return None
    return inside[np.lexsort((inside, dist_row[inside]))][:k]


def interpolation_plan(src_coords: np.ndarray, targets: np.ndarray, radius: float,
                       k: int):
    """Nearest-source inverse-distance weights for each target position.

    Returns ``(idx, w, valid, counts)`` with idx/w of shape (T, k).  Rows
    with no source inside ``radius`` are invalid with zero weights.  Raw
    distances use weights 1/(d + 1e-8), normalized to sum to one.
    Selection order is (distance, index); the vectorized path falls back to
    an exact per-row scan when ties straddle its candidate window.
    """
    t = targets.shape[0]
    m = src_coords.shape[0]
    idx = np.zeros((t, k), dtype=np.intp)
    w = np.zeros((t, k))
    valid = np.zeros(t, dtype=bool)
    counts = np.zeros(t, dtype=np.int64)
    if m == 0 or t == 0:
        return idx, w, valid, counts

    d2 = ((targets[:, None, :] - src_coords[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(d2)
    masked = np.where(dist <= radius, dist, np.inf)

    window = min(m, k + 8)
    if window < m:
        part = np.argpartition(masked, window - 1, axis=1)[:, :window]
    else:
        part = np.broadcast_to(np.arange(m), (t, m)).copy()
    part = np.sort(part, axis=1)  # index order, so stable sort breaks ties by index
    cand_d = np.take_along_axis(masked, part, axis=1)
    order = np.argsort(cand_d, axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(part, order, axis=1)
    sel_d = np.take_along_axis(cand_d, order, axis=1)
    if sel.shape[1] < k:  # fewer sources than requested neighbors
        pad = k - sel.shape[1]
        sel = np.pad(sel, ((0, 0), (0, pad)))
        sel_d = np.pad(sel_d, ((0, 0), (0, pad)), constant_values=np.inf)

    finite = np.isfinite(sel_d)
    counts[:] = finite.sum(axis=1)
    valid[:] = counts > 0

    if window < m:
        # a tie at the window boundary could hide a lower-index equal-distance
        # source outside the window; redo those rows exactly
        kth = sel_d[:, min(k, window) - 1]
        boundary = np.take_along_axis(
            cand_d, np.argsort(cand_d, axis=1, kind="stable"), axis=1)[:, window - 1]
        suspect = np.flatnonzero(np.isfinite(kth) & (kth == boundary))
        for row in suspect:
            exact = _plan_row(dist[row], radius, k)
            sel[row, :] = 0
            sel_d[row, :] = np.inf
            if exact is not None:
                sel[row, :exact.size] = exact
                sel_d[row, :exact.size] = dist[row][exact]
            finite[row] = np.isfinite(sel_d[row])
            counts[row] = finite[row].sum()
            valid[row] = counts[row] > 0

    raw = np.where(finite, 1.0 / (sel_d + IDW_EPS), 0.0)
    denom = raw.sum(axis=1, keepdims=True)
    np.divide(raw, denom, out=w, where=denom > 0.0)
    idx[:] = np.where(finite, sel, 0)
    return idx, w, valid, counts


class GatherPlan:
    """Sparse operator form of an interpolation plan (K targets, M sources)."""

    def __init__(self, idx: np.ndarray, w: np.ndarray, n_sources: int):
        from scipy import sparse
        k, j = idx.shape
        rows = np.repeat(np.arange(k), j)
        self.idx = idx
        self.w = w
        self.mat = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())),
                                     shape=(k, n_sources))
        self.mat_t = self.mat.T.tocsr()


@dataclass
class VirtualKeySet:
    """Lattice-arranged virtual key points around one query position."""

    query: np.ndarray         # (3,)
    d: float                  # grid distance (meters)
    offsets: np.ndarray       # (S, 3) int64 lattice offsets
    positions: np.ndarray     # (S, 3), query + d * offset exactly
    features: np.ndarray      # (S, C); zero rows where invalid
    valid: np.ndarray         # (S,) bool
    counts: np.ndarray        # (S,) contributor counts

    @property
    def n_entries(self) -> int:
        return self.offsets.shape[0]

    @property
    def slots(self) -> np.ndarray:
        return flat_slots(self.offsets)

    def displacements(self) -> np.ndarray:
        return self.positions - self.query

    def entries(self):
        for s in range(self.n_entries):
            yield (GridOffset(*self.offsets[s]), self.positions[s],
                   self.features[s], bool(self.valid[s]), int(self.counts[s]))


def generate_virtual_keys(pc: PointCloud, query, d: float, k_interp: int,
                          layout: int = 27) -> VirtualKeySet:
    """Interpolate features onto the lattice of virtual points around a query.

    Each virtual point sits exactly at ``query + d * (i, j, k)`` and takes
    the inverse-distance-weighted mean of its ``k_interp`` nearest source
    points within ``d``; with no source in range it is invalid and carries
    the zero feature.  An empty cloud yields an all-invalid set.
    """
    if d <= 0.0:
        raise ContractError(f"grid distance must be positive, got {d}")
    if k_interp < 1:
        raise ContractError(f"k_interp must be >= 1, got {k_interp}")
    query = np.asarray(query, dtype=np.float64)
    offsets = grid_layout(layout)
    positions = query + d * offsets
    idx, w, valid, counts = interpolation_plan(pc.coords, positions, d, k_interp)
    feats = np.zeros((offsets.shape[0], pc.width))
    if pc.n > 0:
        feats = np.einsum("sj,sjc->sc", w, pc.feats[idx])
        feats[~valid] = 0.0
    return VirtualKeySet(query, float(d), offsets, positions, feats, valid, counts)


def multi_radii_keysets(pc: PointCloud, query, radii, k_interp: int,
                        layout: int = 27) -> list[VirtualKeySet]:
    """One independent VirtualKeySet per grid distance."""
    radii = list(radii)
    if not radii:
        raise ContractError("multi_radii_keysets requires at least one radius")
    if any(r <= 0.0 for r in radii) or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ContractError(f"radii must be strictly increasing and positive: {radii}")
    return [generate_virtual_keys(pc, query, r, k_interp, layout) for r in radii]


def trilinear_plan(vg: VoxelGrid, positions: np.ndarray):
    """Corner indices and weights for trilinear sampling at cell centers.

    Unoccupied corners get zero weight, so the sampled value degrades
    toward zero in empty space.
    """
    positions = np.asarray(positions, dtype=np.float64)
    t = positions.shape[0]
    idx = np.zeros((t, 8), dtype=np.intp)
    w = np.zeros((t, 8))
    if vg.n_cells == 0:
        return idx, w
    u = (positions - vg.origin) / vg.step - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    corner = 0
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                weight = (np.where(di, frac[:, 0], 1.0 - frac[:, 0])
                          * np.where(dj, frac[:, 1], 1.0 - frac[:, 1])
                          * np.where(dk, frac[:, 2], 1.0 - frac[:, 2]))
                cells = base + np.array([di, dj, dk])
                for row in range(t):
                    hit = vg.index_of.get(tuple(cells[row]))
                    if hit is not None:
                        idx[row, corner] = hit
                        w[row, corner] = weight[row]
                corner += 1
    return idx, w
