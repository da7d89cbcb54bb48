"""Two-stage toy detector: multi-scale point embeddings and a box-refining head.

Stage structure per scale: ``m`` parallel blocks of stacked attention units
(one search radius per block, doubled block to block) whose outputs are
fused by a single vanilla unit; scales are chained in the default
topology.  The head splits each proposal into G^3 cubic sub-regions
(empty ones included, carrying a learned token) and refines the box from
the resulting object-level embedding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionKeys, Linear, make_unit
from .autodiff import Tensor
from .boxes import Box, bin_center, heading_bin, iou3d, points_in_box, wrap_angle, \
    wrap_axis_angle
from .config import SCALE_WIDTHS, ExperimentConfig
from .exceptions import ContractError, ShapeError
from .geometry import (
    FALLBACK_SLOT,
    GatherPlan,
    PointCloud,
    VoxelGrid,
    ball_query,
    downsample_grid,
    farthest_point_sample,
    flat_slots,
    grid_layout,
    interpolation_plan,
    merge_plan,
    trilinear_plan,
    voxelize,
)

log = logging.getLogger("seformer")


class PlanCache(dict):
    """Memoized geometry plans (weight-independent, reusable across steps)."""

    def get_or_build(self, key, builder):
        if key not in self:
            self[key] = builder()
        return self[key]


@dataclass
class Proposal:
    """First-stage box hypothesis."""

    center: np.ndarray
    size: np.ndarray
    yaw: float
    objectness: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        if np.any(self.size <= 0.0):
            raise ContractError(f"proposal size must be positive: {self.size}")
        self.yaw = wrap_angle(float(self.yaw))
        self.objectness = float(min(max(self.objectness, 0.0), 1.0))

    def box(self) -> Box:
        return Box(self.center.copy(), self.size.copy(), self.yaw)


@dataclass
class MultiScaleFeatures:
    """Voxel features at 1x/2x/4x/8x resolution (widths 16/32/64/64)."""

    grids: dict[int, VoxelGrid]
    enabled: tuple

    def grid(self, scale: int) -> VoxelGrid:
        return self.grids[scale]


@dataclass
class PointEmbedding:
    positions: np.ndarray   # (Q, 3)
    emb: Tensor             # (Q, C)
    stage: str = "init"

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class SubRegionGrid:
    """G^3 cubic sub-regions of one proposal, empty cells included."""

    proposal: Proposal
    g: int
    centers: np.ndarray        # (G^3, 3) world coordinates
    lattice: np.ndarray        # (G^3, 3) offsets from the grid center, cell units
    features: Tensor           # (G^3, C)
    empty: np.ndarray          # (G^3,) bool
    slots: np.ndarray          # (G^3,) value-pool slots

    def __post_init__(self):
        if self.centers.shape[0] != self.g ** 3:
            raise ContractError(
                f"sub-region grid needs {self.g ** 3} entries, "
                f"got {self.centers.shape[0]}")


@dataclass
class RoiOutput:
    proposals: list
    residuals: Tensor        # (P, 7): dcenter(3), dlogsize(3), dyaw(1)
    conf_logits: Tensor      # (P,)
    heading_logits: Tensor   # (P, B)
    object_embedding: Tensor  # (P, C)


# ---------------------------------------------------------------------------
# sub-region lattice geometry

def subregion_lattice(g: int):
    """Lattice offsets (cell units from the grid center) and pool slots.

    Entries are ordered by pool slot (then lexicographically), so the
    value-pool product runs over a few contiguous same-slot blocks.
    """
    idx = np.array([(i, j, k) for i in range(g) for j in range(g) for k in range(g)],
                   dtype=np.float64)
    lattice = idx - (g - 1) / 2.0
    slots = flat_slots(np.sign(lattice).astype(np.int64))
    order = np.argsort(slots, kind="stable")
    return lattice[order], slots[order]


def subregion_centers(proposal: Proposal, g: int) -> np.ndarray:
    """World centers of the exact regular partition of the rotated box."""
    lattice, _ = subregion_lattice(g)
    local = lattice / g * proposal.size
    c, s = math.cos(proposal.yaw), math.sin(proposal.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1]
    world[:, 1] = s * local[:, 0] + c * local[:, 1]
    world[:, 2] = local[:, 2]
    return world + proposal.center


def split_subregions(proposal: Proposal, embedding: PointEmbedding, g: int,
                     radius: float, k: int = 3) -> SubRegionGrid:
    """Interpolate each sub-region center from nearby point embeddings.

    Cells with no embedding point within ``radius`` are flagged empty and
    carry the zero feature (units substitute their learned token).
    """
    if g < 1:
        raise ContractError(f"G must be >= 1, got {g}")
    centers = subregion_centers(proposal, g)
    lattice, slots = subregion_lattice(g)
    idx, w, valid, _ = interpolation_plan(embedding.positions, centers, radius, k)
    feats = ad.weighted_gather(embedding.emb, idx, w)  # invalid rows gather zeros
    return SubRegionGrid(proposal, g, centers, lattice, feats, ~valid, slots)


# ---------------------------------------------------------------------------
# proposals

def generate_proposals(scene, mode: str, seed: int, n_per_box: int = 1,
                       center_jitter: float = 0.1, yaw_jitter_deg: float = 15.0,
                       size_jitter: float = 0.1, direction_ambiguous: bool = False,
                       anchor_size=(4.0, 2.0, 1.6), anchor_stride: float = 2.0,
                       min_points: int = 5) -> list[Proposal]:
    """First-stage proposals, either jittered truth or sliding anchors.

    ``oracle_jitter`` perturbs each ground-truth box (center by a fraction
    of its size per axis, yaw in degrees, size multiplicatively); with
    ``direction_ambiguous`` the yaw is collapsed to (-pi/2, pi/2], modeling
    a first stage that cannot tell front from back.  ``grid`` slides fixed
    anchors and keeps those containing at least ``min_points`` points.
    """
    if mode == "oracle_jitter":
        rng = np.random.default_rng(seed)
        out = []
        for box in scene.boxes:
            for _ in range(n_per_box):
                center = box.center + rng.uniform(-center_jitter, center_jitter,
                                                  size=3) * box.size
                yaw = box.yaw + math.radians(
                    rng.uniform(-yaw_jitter_deg, yaw_jitter_deg))
                size = box.size * (1.0 + rng.uniform(-size_jitter, size_jitter,
                                                     size=3))
                if direction_ambiguous:
                    yaw = wrap_axis_angle(yaw)
                out.append(Proposal(center, size, yaw, objectness=1.0))
        return out
    if mode == "grid":
        coords = scene.cloud.coords
        half = float(np.abs(coords[:, :2]).max()) + anchor_stride if len(coords) \
            else anchor_stride
        ticks = np.arange(-half, half + 1e-9, anchor_stride)
        out = []
        size = np.asarray(anchor_size, dtype=np.float64)
        for x in ticks:
            for y in ticks:
                cand = Proposal(np.array([x, y, size[2] / 2.0]), size.copy(), 0.0)
                npts = int(points_in_box(cand.box(), coords).sum())
                if npts >= min_points:
                    cand.objectness = min(1.0, npts / 50.0)
                    out.append(cand)
        return out
    raise ContractError(f"unknown proposal mode {mode!r}")


# ---------------------------------------------------------------------------
# refinement targets and decoding

N_RESIDUALS = 7


def encode_targets(proposal: Proposal, gt: Box, n_bins: int):
    """Residual regression targets plus the relative heading bin."""
    c, s = math.cos(-proposal.yaw), math.sin(-proposal.yaw)
    d = gt.center - proposal.center
    local = np.array([c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]])
    t = np.empty(N_RESIDUALS)
    t[:3] = local
    t[3:6] = np.log(gt.size / proposal.size)
    t[6] = wrap_axis_angle(gt.yaw - proposal.yaw)
    hbin = heading_bin(gt.yaw - proposal.yaw, n_bins)
    return t, hbin


def decode_box(proposal: Proposal, residual: np.ndarray) -> Box:
    c, s = math.cos(proposal.yaw), math.sin(proposal.yaw)
    local = residual[:3]
    world = np.array([c * local[0] - s * local[1],
                      s * local[0] + c * local[1], local[2]])
    size = proposal.size * np.exp(np.clip(residual[3:6], -2.0, 2.0))
    return Box(proposal.center + world, size, proposal.yaw + residual[6])


def decode_heading(proposal: Proposal, residual: np.ndarray,
                   heading_logits: np.ndarray, n_bins: int) -> float:
    """Final heading: axis-refined yaw plus the predicted relative bin."""
    axis = proposal.yaw + residual[6]
    return wrap_angle(axis + bin_center(int(np.argmax(heading_logits)), n_bins))


# ---------------------------------------------------------------------------
# the network

class Backbone:
    """Voxel pyramid with learned per-stage projections (widths 16/32/64/64)."""

    def __init__(self, cfg: ExperimentConfig, raw_width: int):
        seed = cfg.seed
        self.proj1 = Linear(seed, "backbone.s1", raw_width, SCALE_WIDTHS[1])
        self.down = {
            s: Linear(seed, f"backbone.s{s}", SCALE_WIDTHS[s - 1], SCALE_WIDTHS[s])
            for s in (2, 3, 4)
        }

    def forward(self, raw: VoxelGrid, cache: PlanCache | None = None) \
            -> MultiScaleFeatures:
        cache = cache if cache is not None else PlanCache()
        feats1 = ad.tanh(self.proj1(Tensor(raw.feats)))
        g1 = VoxelGrid(raw.origin, raw.step, raw.indices, raw.counts, feats1,
                       raw.range_lo, raw.range_hi, raw.dropped, raw.index_of)
        grids = {1: g1}
        for s in (2, 3, 4):
            prev = grids[s - 1]

            def build(prev=prev):
                uniq, counts, idx, w = merge_plan(prev.indices, prev.counts)
                lut = {tuple(ix): row for row, ix in enumerate(uniq)}
                return uniq, counts, GatherPlan(idx, w, prev.n_cells), lut

            uniq, counts, plan, lut = cache.get_or_build(("merge", s), build)
            merged = ad.plan_gather(prev.feats, plan)
            feats_s = ad.tanh(self.down[s](merged))
            grids[s] = VoxelGrid(prev.origin, prev.step * 2, uniq, counts, feats_s,
                                 prev.range_lo, prev.range_hi, index_of=lut)
        return MultiScaleFeatures(grids, enabled=tuple())

    def named_parameters(self) -> dict:
        out = dict(self.proj1.named_parameters("backbone.s1"))
        for s, lin in self.down.items():
            out.update(lin.named_parameters(f"backbone.s{s}"))
        return out


class SSMStage:
    """One scale's worth of parallel blocks plus the fusion unit."""

    def __init__(self, cfg: ExperimentConfig, scale: int):
        c = cfg.embed_dim
        self.scale = scale
        self.radii = cfg.block_radii(scale)
        self.key_proj = Linear(cfg.seed, f"ssm.s{scale}.key_proj",
                               SCALE_WIDTHS[scale], c)
        self.blocks = [
            [make_unit(cfg.variant_ssm, c, heads=cfg.heads, pe_hidden=cfg.pe_hidden,
                       seed=cfg.seed, name=f"ssm.s{scale}.b{b}.l{layer}",
                       empty_policy=cfg.empty_policy)
             for layer in range(cfg.layers)]
            for b in range(cfg.m)
        ]
        self.fusion = make_unit("vanilla", c, heads=cfg.heads,
                                pe_hidden=cfg.pe_hidden, seed=cfg.seed,
                                name=f"ssm.s{scale}.fuse",
                                empty_policy=cfg.empty_policy)

    def named_parameters(self) -> dict:
        out = self.key_proj.named_parameters(f"ssm.s{self.scale}.key_proj")
        for b, block in enumerate(self.blocks):
            for layer, unit in enumerate(block):
                out.update(unit.named_parameters(f"ssm.s{self.scale}.b{b}.l{layer}."))
        out.update(self.fusion.named_parameters(f"ssm.s{self.scale}.fuse."))
        return out


def _fusion_keys(block_outs: list[Tensor]) -> AttentionKeys:
    """Block outputs become the keys of the fusion unit (zero displacement)."""
    nq, c = block_outs[0].shape
    m = len(block_outs)
    feats = ad.reshape(ad.concat_lastdim(block_outs), (nq, m, c))
    return AttentionKeys(feats, np.zeros((nq, m, 3)), np.ones((nq, m), dtype=bool),
                         np.full(m, FALLBACK_SLOT),
                         shared_displacements=np.zeros((m, 3)))


class DetectionModel:
    """Backbone + spatial structure stages + sub-region refinement head."""

    RAW_WIDTH = 2  # per-point input features: occupancy constant, height

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        c = cfg.embed_dim
        self.backbone = Backbone(cfg, self.RAW_WIDTH)
        self.init_proj = Linear(cfg.seed, "init", SCALE_WIDTHS[1], c)
        self.stages = {s: SSMStage(cfg, s) for s in cfg.scales}
        self.parallel_fusion = None
        if cfg.topology == "fully_parallel":
            self.parallel_fusion = make_unit(
                "vanilla", c, heads=cfg.heads, pe_hidden=cfg.pe_hidden,
                seed=cfg.seed, name="ssm.fuse", empty_policy=cfg.empty_policy)
        self.head_units = [
            make_unit(cfg.variant_head, c, heads=cfg.heads, pe_hidden=cfg.pe_hidden,
                      seed=cfg.seed, name=f"head.l{layer}",
                      empty_policy=cfg.empty_policy)
            for layer in range(cfg.head_layers)
        ]
        self.box_head = Linear(cfg.seed, "head.box", c, N_RESIDUALS)
        self.conf_head = Linear(cfg.seed, "head.conf", c, 1)
        self.heading_head = Linear(cfg.seed, "head.heading", c, cfg.heading_bins)

    # -- parameters ----------------------------------------------------------
    def named_parameters(self) -> dict:
        out = {}
        out.update(self.backbone.named_parameters())
        out.update(self.init_proj.named_parameters("init"))
        for stage in self.stages.values():
            out.update(stage.named_parameters())
        if self.parallel_fusion is not None:
            out.update(self.parallel_fusion.named_parameters("ssm.fuse."))
        for layer, unit in enumerate(self.head_units):
            out.update(unit.named_parameters(f"head.l{layer}."))
        out.update(self.box_head.named_parameters("head.box"))
        out.update(self.conf_head.named_parameters("head.conf"))
        out.update(self.heading_head.named_parameters("head.heading"))
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    # -- geometry -------------------------------------------------------------
    def voxel_pyramid(self, cloud: PointCloud, cache: PlanCache | None = None) \
            -> MultiScaleFeatures:
        cache = cache if cache is not None else PlanCache()
        extent = self.cfg.scene_extent / 2.0 + 1.0

        def build_raw():
            return voxelize(cloud, origin=(-extent, -extent, -1.0),
                            step=self.cfg.voxel_step,
                            range_lo=(-extent, -extent, -1.0),
                            range_hi=(extent, extent, 4.0))

        raw = cache.get_or_build("voxel_raw", build_raw)
        feats = self.backbone.forward(raw, cache)
        return MultiScaleFeatures(feats.grids, enabled=tuple(self.cfg.scales))

    def select_queries(self, cloud: PointCloud, cache: PlanCache | None = None,
                       seed: int | None = None) -> np.ndarray:
        cache = cache if cache is not None else PlanCache()
        seed = self.cfg.seed if seed is None else seed

        def build():
            k = min(self.cfg.queries, cloud.n)
            if k < 1:
                return np.zeros((0, 3))
            idx = farthest_point_sample(cloud, k, seed=seed)
            return cloud.coords[idx]

        return cache.get_or_build("queries", build)

    # -- embedding stages ------------------------------------------------------
    def init_embedding(self, features: MultiScaleFeatures, queries: np.ndarray,
                       cache: PlanCache | None = None) -> PointEmbedding:
        """E_init: learned projection of each query's trilinear F1 sample."""
        if queries.shape[0] < 1:
            raise ContractError("init_embedding requires at least one query")
        cache = cache if cache is not None else PlanCache()
        g1 = features.grid(1)

        def build():
            idx, w = trilinear_plan(g1, queries)
            return GatherPlan(idx, w, g1.n_cells)

        plan = cache.get_or_build("trilinear", build)
        sample = ad.plan_gather(g1.feats, plan)
        return PointEmbedding(queries, self.init_proj(sample), stage="init")

    def _block_keys(self, emb: PointEmbedding, grid: VoxelGrid, radius: float,
                    stage: SSMStage, cache: PlanCache, tag) -> AttentionKeys:
        cfg = self.cfg
        q = emb.positions
        nq = q.shape[0]
        if cfg.sampling == "grid":
            offsets = grid_layout(cfg.grid_cells)
            ns = offsets.shape[0]

            def build():
                targets = (q[:, None, :] + radius * offsets[None, :, :]).reshape(-1, 3)
                idx, w, valid, _ = interpolation_plan(
                    grid.cell_centers(), targets, radius, cfg.k_interp)
                disp = np.broadcast_to(radius * offsets, (nq, ns, 3)).copy()
                return (GatherPlan(idx, w, grid.n_cells), valid.reshape(nq, ns),
                        disp, flat_slots(offsets), radius * offsets)
        else:
            ns = cfg.ball_max_k

            def build():
                idx = np.zeros((nq, ns), dtype=np.intp)
                w = np.zeros((nq, ns))
                valid = np.zeros((nq, ns), dtype=bool)
                disp = np.zeros((nq, ns, 3))
                centers = grid.cell_centers()
                src = PointCloud(centers, np.zeros((centers.shape[0], 1))) \
                    if centers.shape[0] else None
                for row in range(nq):
                    if src is None:
                        break
                    found = ball_query(src, q[row], radius, ns,
                                       seed=cfg.seed + row)
                    idx[row, :found.size] = found
                    valid[row, :found.size] = True
                    disp[row, :found.size] = centers[found] - q[row]
                return (GatherPlan(idx.reshape(-1, 1),
                                   np.where(valid, 1.0, 0.0).reshape(-1, 1),
                                   grid.n_cells),
                        valid, disp, np.full(ns, FALLBACK_SLOT), None)

        plan, valid, disp, slots, shared = cache.get_or_build(tag, build)
        gathered = ad.plan_gather(grid.feats, plan)
        keys = ad.reshape(stage.key_proj(gathered), (nq, valid.shape[1],
                                                     cfg.embed_dim))
        return AttentionKeys(keys, disp, valid, slots, shared_displacements=shared)

    def _run_block(self, emb: PointEmbedding, keys: AttentionKeys,
                   block) -> Tensor:
        out = emb.emb
        for unit in block:
            out = unit.forward_batch(out, keys)
        return out

    def ssm_stage(self, emb: PointEmbedding, features, scale: int,
                  cache: PlanCache | None = None) -> PointEmbedding:
        """One scale: m parallel blocks then fusion by a vanilla unit.

        ``features`` is the MultiScaleFeatures bundle or that scale's
        VoxelGrid.  A disabled scale is an identity pass-through (logged).
        """
        if scale not in self.cfg.scales:
            log.warning("ssm_stage: scale %d disabled; passing through", scale)
            return emb
        cache = cache if cache is not None else PlanCache()
        stage = self.stages[scale]
        grid = features.grid(scale) if isinstance(features, MultiScaleFeatures) \
            else features
        outs = []
        for b, block in enumerate(stage.blocks):
            keys = self._block_keys(emb, grid, stage.radii[b], stage, cache,
                                    ("keys", scale, b))
            outs.append(self._run_block(emb, keys, block))
        fused = stage.fusion.forward_batch(emb.emb, _fusion_keys(outs))
        return PointEmbedding(emb.positions, fused, stage=f"after-s{scale}")

    def run_ssm(self, features: MultiScaleFeatures, queries: np.ndarray,
                cache: PlanCache | None = None) -> PointEmbedding:
        """Fold the enabled scales into the final point embedding."""
        cfg = self.cfg
        cache = cache if cache is not None else PlanCache()
        emb = self.init_embedding(features, queries, cache)
        if cfg.topology == "half_parallel_half_chained":
            for s in cfg.scales:
                emb = self.ssm_stage(emb, features, s, cache)
        elif cfg.topology == "fully_chained":
            for s in cfg.scales:
                stage = self.stages[s]
                grid = features.grid(s)
                for b, block in enumerate(stage.blocks):
                    keys = self._block_keys(emb, grid, stage.radii[b], stage,
                                            cache, ("keys_chained", s, b))
                    emb = PointEmbedding(emb.positions,
                                         self._run_block(emb, keys, block),
                                         stage=f"after-s{s}b{b}")
        else:  # fully_parallel
            outs = []
            for s in cfg.scales:
                stage = self.stages[s]
                grid = features.grid(s)
                for b, block in enumerate(stage.blocks):
                    keys = self._block_keys(emb, grid, stage.radii[b], stage,
                                            cache, ("keys_parallel", s, b))
                    outs.append(self._run_block(emb, keys, block))
            fused = self.parallel_fusion.forward_batch(emb.emb, _fusion_keys(outs))
            emb = PointEmbedding(emb.positions, fused, stage="fused")
        return PointEmbedding(emb.positions, emb.emb, stage="final")

    # -- head -------------------------------------------------------------------
    def roi_forward(self, embedding: PointEmbedding, proposals: list[Proposal],
                    cache: PlanCache | None = None) -> RoiOutput:
        """Refine a batch of proposals from their sub-region grids."""
        if not proposals:
            raise ContractError("roi_forward requires at least one proposal")
        cfg = self.cfg
        cache = cache if cache is not None else PlanCache()
        g = cfg.G
        lattice, slots = subregion_lattice(g)
        ns = g ** 3
        np_prop = len(proposals)

        def build():
            idx = np.zeros((np_prop * ns, cfg.k_interp), dtype=np.intp)
            w = np.zeros((np_prop * ns, cfg.k_interp))
            valid = np.zeros((np_prop, ns), dtype=bool)
            cidx = np.zeros((np_prop, cfg.k_interp), dtype=np.intp)
            cw = np.zeros((np_prop, cfg.k_interp))
            for p, prop in enumerate(proposals):
                radius = cfg.subregion_radius(prop.size)
                centers = subregion_centers(prop, g)
                i_, w_, v_, _ = interpolation_plan(embedding.positions, centers,
                                                   radius, cfg.k_interp)
                idx[p * ns:(p + 1) * ns] = i_
                w[p * ns:(p + 1) * ns] = w_
                valid[p] = v_
                ci, cwgt, cv, _ = interpolation_plan(
                    embedding.positions, prop.center[None, :], radius, cfg.k_interp)
                cidx[p] = ci[0]
                cw[p] = cwgt[0] if cv[0] else 0.0
            n_src = embedding.positions.shape[0]
            return (GatherPlan(idx, w, n_src), valid,
                    GatherPlan(cidx, cw, n_src))

        cell_plan, valid, center_plan = cache.get_or_build(("roi", np_prop), build)
        feats = ad.reshape(ad.plan_gather(embedding.emb, cell_plan),
                           (np_prop, ns, cfg.embed_dim))
        disp = np.broadcast_to(lattice, (np_prop, ns, 3)).copy()
        keys = AttentionKeys(feats, disp, valid, slots,
                             shared_displacements=lattice)
        q = ad.plan_gather(embedding.emb, center_plan)
        for unit in self.head_units:
            q = unit.forward_batch(q, keys)
        residuals = self.box_head(q)
        conf = ad.reshape(self.conf_head(q), (np_prop,))
        heading = self.heading_head(q)
        return RoiOutput(list(proposals), residuals, conf, heading, q)

    # -- full scene -------------------------------------------------------------
    def forward_scene(self, cloud: PointCloud, proposals: list[Proposal],
                      cache: PlanCache | None = None,
                      query_seed: int | None = None) -> RoiOutput:
        cache = cache if cache is not None else PlanCache()
        features = self.voxel_pyramid(cloud, cache)
        queries = self.select_queries(cloud, cache, seed=query_seed)
        embedding = self.run_ssm(features, queries, cache)
        return self.roi_forward(embedding, proposals, cache)


def roi_head_forward(model: DetectionModel, grid: SubRegionGrid,
                     center_feat) -> RoiOutput:
    """Head forward over one pre-built sub-region grid (single proposal)."""
    if grid.centers.shape[0] != grid.g ** 3:
        raise ContractError("sub-region grid is incomplete")
    keys = AttentionKeys(ad.reshape(grid.features,
                                    (1, grid.g ** 3, model.cfg.embed_dim)),
                         grid.lattice[None], (~grid.empty)[None], grid.slots,
                         shared_displacements=grid.lattice)
    q = center_feat if isinstance(center_feat, Tensor) else Tensor(center_feat)
    q = ad.reshape(q, (1, model.cfg.embed_dim))
    for unit in model.head_units:
        q = unit.forward_batch(q, keys)
    residuals = model.box_head(q)
    conf = ad.reshape(model.conf_head(q), (1,))
    heading = model.heading_head(q)
    return RoiOutput([grid.proposal], residuals, conf, heading, q)


# ---------------------------------------------------------------------------
# loss

@dataclass
class SceneTargets:
    """Per-proposal regression/classification targets for one scene."""

    residuals: np.ndarray      # (P, 7)
    heading_bins: np.ndarray   # (P,)
    conf: np.ndarray           # (P,) clipped IoU against best ground truth
    matched: np.ndarray        # (P,) bool, IoU >= threshold


def match_targets(proposals: list[Proposal], gt_boxes: list[Box],
                  match_iou: float, n_bins: int) -> SceneTargets:
    n = len(proposals)
    residuals = np.zeros((n, N_RESIDUALS))
    bins = np.zeros(n, dtype=np.int64)
    conf = np.zeros(n)
    matched = np.zeros(n, dtype=bool)
    for i, prop in enumerate(proposals):
        best, best_iou = None, 0.0
        for gt in gt_boxes:
            v = iou3d(prop.box(), gt)
            if v > best_iou:
                best, best_iou = gt, v
        conf[i] = min(max(best_iou, 0.0), 1.0)
        if best is not None and best_iou >= match_iou:
            matched[i] = True
            residuals[i], bins[i] = encode_targets(prop, best, n_bins)
    return SceneTargets(residuals, bins, conf, matched)


def detection_loss(output: RoiOutput, targets: SceneTargets,
                   w_box: float = 1.0, w_conf: float = 1.0,
                   w_heading: float = 1.0) -> Tensor:
    """Huber box loss + confidence BCE (+ heading cross-entropy), averaged.

    Unmatched proposals contribute only the confidence term.
    """
    n = len(output.proposals)
    if targets.conf.shape != (n,):
        raise ShapeError("targets do not match the proposal batch")
    terms = []
    conf_loss = ad.bce_with_logits(output.conf_logits, targets.conf)
    terms.append(ad.scale(conf_loss, w_conf / n))
    rows = np.flatnonzero(targets.matched)
    if rows.size:
        res = ad.take_rows(output.residuals, rows)
        box_loss = ad.smooth_l1(res, targets.residuals[rows])
        terms.append(ad.scale(box_loss, w_box / rows.size))
        if w_heading > 0.0:
            hl = ad.take_rows(output.heading_logits, rows)
            head_loss = ad.cross_entropy_logits(hl, targets.heading_bins[rows])
            terms.append(ad.scale(head_loss, w_heading / rows.size))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
