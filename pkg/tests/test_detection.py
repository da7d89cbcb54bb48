"""Detection network: embeddings, SSM topologies, ROI head, proposals, loss."""

import math

import numpy as np
import pytest

from seformer import autodiff as ad
from seformer.autodiff import Tensor, grad_check
from seformer.boxes import Box, heading_bin, iou3d, wrap_angle
from seformer.config import ExperimentConfig
from seformer.detection import (
    DetectionModel,
    PlanCache,
    Proposal,
    decode_box,
    decode_heading,
    detection_loss,
    encode_targets,
    generate_proposals,
    match_targets,
    roi_head_forward,
    split_subregions,
    subregion_centers,
    subregion_lattice,
)
from seformer.exceptions import ContractError
from seformer.geometry import PointCloud
from seformer.scenes import SceneSpec, generate_scene


def small_cfg(**kw):
    base = dict(train_scenes=4, eval_scenes=2, epochs=1, queries=24,
                scene_base_points=90, embed_dim=8, pe_hidden=8, seeds=[0])
    base.update(kw)
    return ExperimentConfig(**base).validate()


def scene_and_model(seed=0, **kw):
    cfg = small_cfg(**kw)
    scene = generate_scene(SceneSpec(base_points=90), seed=seed)
    return cfg, scene, DetectionModel(cfg)


class TestInitEmbedding:
    def test_empty_region_gives_bias_only(self):
        cfg, scene, model = scene_and_model()
        feats = model.voxel_pyramid(scene.cloud)
        far_query = np.array([[5.5, 5.5, 3.5]])
        emb = model.init_embedding(feats, far_query)
        # trilinear sample is zero there, so the embedding equals the bias
        np.testing.assert_allclose(emb.emb.data[0], model.init_proj.b.data,
                                   atol=1e-12)

    def test_occupied_cell_center_matches_cell_feature(self):
        cfg, scene, model = scene_and_model()
        feats = model.voxel_pyramid(scene.cloud)
        g1 = feats.grid(1)
        center = g1.cell_centers()[3][None, :]
        emb = model.init_embedding(feats, center)
        expected = g1.feats.data[3] @ model.init_proj.w.data + model.init_proj.b.data
        np.testing.assert_allclose(emb.emb.data[0], expected, atol=1e-10)

    def test_requires_a_query(self):
        cfg, scene, model = scene_and_model()
        feats = model.voxel_pyramid(scene.cloud)
        with pytest.raises(ContractError):
            model.init_embedding(feats, np.zeros((0, 3)))


class TestSSM:
    def test_stage_reduces_to_single_unit_forward(self):
        # m=1, one layer, fusion frozen to pass-through
        cfg, scene, model = scene_and_model(m=1, layers=1, heads=1)
        cache = PlanCache()
        feats = model.voxel_pyramid(scene.cloud, cache)
        queries = model.select_queries(scene.cloud, cache, seed=scene.seed)
        emb = model.init_embedding(feats, queries, cache)

        stage = model.stages[1]
        fusion = stage.fusion
        fusion.out_proj.data = np.eye(cfg.embed_dim)
        for wv in fusion.w_vs:
            wv.data = np.eye(fusion.head_width)
        fusion.residual = False
        fusion.normalize = False
        fusion.pe_enabled = False

        out = model.ssm_stage(emb, feats, 1, cache)
        keys = model._block_keys(emb, feats.grid(1), stage.radii[0], stage,
                                 PlanCache(), "probe")
        direct = stage.blocks[0][0].forward_batch(emb.emb, keys)
        np.testing.assert_allclose(out.emb.data, direct.data, atol=1e-12)

    def test_disabled_scale_passthrough(self, caplog):
        cfg, scene, model = scene_and_model(scales=[1, 3])
        cache = PlanCache()
        feats = model.voxel_pyramid(scene.cloud, cache)
        queries = model.select_queries(scene.cloud, cache, seed=scene.seed)
        emb = model.init_embedding(feats, queries, cache)
        with caplog.at_level("WARNING", logger="seformer"):
            out = model.ssm_stage(emb, feats, 4, cache)
        assert out is emb
        assert any("disabled" in rec.message for rec in caplog.records)

    def test_full_stage_matches_hand_wired_composition(self):
        cfg, scene, model = scene_and_model(m=2, layers=2, heads=2, queries=3)
        cache = PlanCache()
        feats = model.voxel_pyramid(scene.cloud, cache)
        queries = model.select_queries(scene.cloud, cache, seed=scene.seed)
        emb = model.init_embedding(feats, queries, cache)
        out = model.ssm_stage(emb, feats, 1, cache)

        from seformer.detection import _fusion_keys
        stage = model.stages[1]
        block_outs = []
        for b, block in enumerate(stage.blocks):
            keys = model._block_keys(emb, feats.grid(1), stage.radii[b], stage,
                                     cache, ("keys", 1, b))
            cur = emb.emb
            for unit in block:
                cur = unit.forward_batch(cur, keys)
            block_outs.append(cur)
        fused = stage.fusion.forward_batch(emb.emb, _fusion_keys(block_outs))
        np.testing.assert_allclose(out.emb.data, fused.data, atol=1e-10)

    @pytest.mark.parametrize("topology", ["fully_parallel", "fully_chained",
                                          "half_parallel_half_chained"])
    def test_topologies_run_and_differ(self, topology):
        cfg, scene, model = scene_and_model(topology=topology)
        cache = PlanCache()
        feats = model.voxel_pyramid(scene.cloud, cache)
        queries = model.select_queries(scene.cloud, cache, seed=scene.seed)
        out = model.run_ssm(feats, queries, cache)
        assert out.emb.shape == (queries.shape[0], cfg.embed_dim)
        assert out.stage == "final"

    def test_topology_swap_changes_output(self):
        outs = {}
        for topology in ("fully_parallel", "fully_chained",
                         "half_parallel_half_chained"):
            cfg, scene, model = scene_and_model(topology=topology)
            cache = PlanCache()
            feats = model.voxel_pyramid(scene.cloud, cache)
            queries = model.select_queries(scene.cloud, cache, seed=scene.seed)
            outs[topology] = model.run_ssm(feats, queries, cache).emb.data
        a, b, c = outs.values()
        assert np.linalg.norm(a - b) > 0
        assert np.linalg.norm(b - c) > 0
        assert np.linalg.norm(a - c) > 0

    def test_single_scale_topologies_coincide_with_m1(self):
        outs = {}
        for topology in ("fully_chained", "half_parallel_half_chained",
                         "fully_parallel"):
            cfg, scene, model = scene_and_model(topology=topology, scales=[1], m=1)
            # freeze every fusion to identity pass-through of its single key
            fusions = [model.stages[1].fusion]
            if model.parallel_fusion is not None:
                fusions.append(model.parallel_fusion)
            for fusion in fusions:
                fusion.out_proj.data = np.eye(cfg.embed_dim)
                for wv in fusion.w_vs:
                    wv.data = np.eye(fusion.head_width)
                fusion.residual = False
                fusion.normalize = False
                fusion.pe_enabled = False
            cache = PlanCache()
            feats = model.voxel_pyramid(scene.cloud, cache)
            queries = model.select_queries(scene.cloud, cache, seed=scene.seed)
            outs[topology] = model.run_ssm(feats, queries, cache).emb.data
        vals = list(outs.values())
        np.testing.assert_allclose(vals[0], vals[1], atol=1e-12)
        np.testing.assert_allclose(vals[0], vals[2], atol=1e-12)


class TestProposals:
    def scene(self, seed=0):
        return generate_scene(SceneSpec(), seed=seed)

    def test_zero_jitter_equals_ground_truth(self):
        scene = self.scene()
        props = generate_proposals(scene, "oracle_jitter", seed=0,
                                   center_jitter=0.0, yaw_jitter_deg=0.0,
                                   size_jitter=0.0)
        assert len(props) == len(scene.boxes)
        for p, gt in zip(props, scene.boxes):
            np.testing.assert_array_equal(p.center, gt.center)
            np.testing.assert_array_equal(p.size, gt.size)
            assert p.yaw == gt.yaw

    def test_deterministic_per_seed(self):
        scene = self.scene()
        a = generate_proposals(scene, "oracle_jitter", seed=5)
        b = generate_proposals(scene, "oracle_jitter", seed=5)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.center, pb.center)
            assert pa.yaw == pb.yaw

    def test_jittered_iou_above_03_on_95_percent(self):
        hits = total = 0
        k = 8
        for seed in range(60):
            scene = self.scene(seed)
            props = generate_proposals(scene, "oracle_jitter", seed=seed,
                                       n_per_box=k)
            for i, p in enumerate(props):
                gt = scene.boxes[i // k]
                total += 1
                if iou3d(p.box(), gt) > 0.3:
                    hits += 1
        assert total >= 1000
        assert hits / total >= 0.95

    def test_direction_ambiguous_collapses_yaw(self):
        scene = self.scene()
        props = generate_proposals(scene, "oracle_jitter", seed=1,
                                   direction_ambiguous=True)
        for p in props:
            assert -math.pi / 2 < p.yaw <= math.pi / 2

    def test_grid_mode_filters_by_point_count(self):
        scene = self.scene()
        props = generate_proposals(scene, "grid", seed=0, min_points=5)
        assert props, "grid anchors should cover the objects"
        from seformer.boxes import points_in_box
        for p in props:
            assert points_in_box(p.box(), scene.cloud.coords).sum() >= 5

    def test_unknown_mode_rejected(self):
        with pytest.raises(ContractError):
            generate_proposals(self.scene(), "magic", seed=0)


class TestSubRegions:
    def embedding(self, cfg, scene, model):
        cache = PlanCache()
        feats = model.voxel_pyramid(scene.cloud, cache)
        queries = model.select_queries(scene.cloud, cache, seed=scene.seed)
        return model.run_ssm(feats, queries, cache)

    def test_g1_single_center(self):
        prop = Proposal(np.array([1.0, 2.0, 0.5]), np.array([4.0, 2.0, 1.5]), 0.3)
        centers = subregion_centers(prop, 1)
        np.testing.assert_allclose(centers, prop.center[None, :], atol=1e-15)

    def test_g2_axis_aligned_unit_box(self):
        prop = Proposal(np.zeros(3), np.ones(3), 0.0)
        centers = subregion_centers(prop, 2)
        expected = {(-0.25, -0.25, -0.25), (-0.25, -0.25, 0.25),
                    (-0.25, 0.25, -0.25), (-0.25, 0.25, 0.25),
                    (0.25, -0.25, -0.25), (0.25, -0.25, 0.25),
                    (0.25, 0.25, -0.25), (0.25, 0.25, 0.25)}
        got = {tuple(np.round(c, 12)) for c in centers}
        assert got == expected

    def test_matches_brute_force_interpolation(self):
        cfg, scene, model = scene_and_model()
        emb = self.embedding(cfg, scene, model)
        prop = Proposal(scene.boxes[0].center, scene.boxes[0].size,
                        scene.boxes[0].yaw)
        radius = cfg.subregion_radius(prop.size)
        grid = split_subregions(prop, emb, 3, radius, k=3)
        from seformer.geometry import IDW_EPS
        for cell in range(27):
            target = grid.centers[cell]
            dists = np.linalg.norm(emb.positions - target, axis=1)
            near = sorted((d, i) for d, i in zip(dists, range(len(dists)))
                          if d <= radius)[:3]
            if not near:
                assert grid.empty[cell]
                continue
            ws = np.array([1.0 / (d + IDW_EPS) for d, _ in near])
            ws /= ws.sum()
            expected = sum(w * emb.emb.data[i] for w, (_, i) in zip(ws, near))
            np.testing.assert_allclose(grid.features.data[cell], expected,
                                       rtol=0, atol=1e-12)

    def test_lattice_slots_are_octants(self):
        lattice, slots = subregion_lattice(6)
        assert lattice.shape == (216, 3)
        assert len(np.unique(slots)) == 8  # even G: sign is never zero
        # slot-sorted entries: slots grouped in runs
        assert np.all(np.diff(slots) >= 0)

    def test_rotation_invariance_of_features_and_flags(self):
        cfg, scene, model = scene_and_model()
        emb = self.embedding(cfg, scene, model)
        prop = Proposal(scene.boxes[0].center.copy(), scene.boxes[0].size.copy(),
                        scene.boxes[0].yaw)
        radius = cfg.subregion_radius(prop.size)
        base = split_subregions(prop, emb, 4, radius, k=3)

        angle = 0.731
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        rotated_positions = emb.positions @ rot.T
        from seformer.detection import PointEmbedding
        emb_rot = PointEmbedding(rotated_positions, emb.emb, stage=emb.stage)
        prop_rot = Proposal(rot @ prop.center, prop.size.copy(), prop.yaw + angle)
        rotated = split_subregions(prop_rot, emb_rot, 4, radius, k=3)

        assert np.array_equal(base.empty, rotated.empty)
        np.testing.assert_allclose(base.features.data, rotated.features.data,
                                   rtol=0, atol=1e-9)


class TestRoiHead:
    def test_all_empty_grid_is_finite_and_deterministic(self):
        cfg, scene, model = scene_and_model()
        prop = Proposal(np.array([5.0, 5.0, 2.0]), np.ones(3), 0.0)
        from seformer.detection import PointEmbedding
        emb = PointEmbedding(np.full((1, 3), 50.0),
                             Tensor(np.zeros((1, cfg.embed_dim))), "final")
        grid = split_subregions(prop, emb, cfg.G, 0.3, k=3)
        assert grid.empty.all()
        out1 = roi_head_forward(model, grid, np.zeros(cfg.embed_dim))
        out2 = roi_head_forward(model, grid, np.zeros(cfg.embed_dim))
        assert np.all(np.isfinite(out1.residuals.data))
        assert np.array_equal(out1.residuals.data, out2.residuals.data)

    def test_swapping_nonempty_cells_changes_object_embedding(self):
        cfg, scene, model = scene_and_model()
        rng = np.random.default_rng(3)
        g = 4
        prop = Proposal(np.zeros(3), np.array([4.0, 2.0, 1.6]), 0.0)
        lattice, slots = subregion_lattice(g)
        feats = rng.normal(size=(g ** 3, cfg.embed_dim))
        empty = np.zeros(g ** 3, dtype=bool)
        from seformer.detection import SubRegionGrid
        base_grid = SubRegionGrid(prop, g, subregion_centers(prop, g), lattice,
                                  Tensor(feats), empty, slots)
        # pick two cells in different octants
        i, j = 0, g ** 3 - 1
        assert slots[i] != slots[j]
        swapped = feats.copy()
        swapped[[i, j]] = swapped[[j, i]]
        swap_grid = SubRegionGrid(prop, g, subregion_centers(prop, g), lattice,
                                  Tensor(swapped), empty, slots)
        q = rng.normal(size=cfg.embed_dim)
        a = roi_head_forward(model, base_grid, q).object_embedding.data
        b = roi_head_forward(model, swap_grid, q).object_embedding.data
        assert np.linalg.norm(a - b) > 1e-9

    def test_empty_mask_policy_changes_confidence(self):
        scores = {}
        for policy in ("embed", "mask"):
            cfg, scene, model = scene_and_model(empty_policy=policy)
            cache = PlanCache()
            props = generate_proposals(scene, "oracle_jitter", seed=scene.seed)
            out = model.forward_scene(scene.cloud, props, cache,
                                      query_seed=scene.seed)
            scores[policy] = out.conf_logits.data.copy()
        assert np.linalg.norm(scores["embed"] - scores["mask"]) > 1e-9

    def test_incomplete_grid_rejected(self):
        cfg, scene, model = scene_and_model()
        prop = Proposal(np.zeros(3), np.ones(3), 0.0)
        lattice, slots = subregion_lattice(2)
        from seformer.detection import SubRegionGrid
        with pytest.raises(ContractError):
            SubRegionGrid(prop, 3, subregion_centers(prop, 2), lattice,
                          Tensor(np.zeros((8, cfg.embed_dim))),
                          np.zeros(8, dtype=bool), slots)


class TestTargetsAndLoss:
    def test_perfect_prediction_zero_residual_loss(self):
        gt = Box(np.array([1.0, 2.0, 0.75]), np.array([4.0, 2.0, 1.5]), 0.4)
        prop = Proposal(gt.center.copy(), gt.size.copy(), gt.yaw)
        t, hbin = encode_targets(prop, gt, 8)
        np.testing.assert_allclose(t, np.zeros(7), atol=1e-12)
        assert hbin == 0

    def test_encode_decode_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            gt = Box(rng.uniform(-3, 3, 3) + [0, 0, 3],
                     rng.uniform(1.0, 4.0, 3), rng.uniform(-math.pi, math.pi))
            prop = Proposal(gt.center + rng.uniform(-0.3, 0.3, 3),
                            gt.size * rng.uniform(0.9, 1.1, 3),
                            gt.yaw + rng.uniform(-0.2, 0.2))
            t, hbin = encode_targets(prop, gt, 8)
            refined = decode_box(prop, t)
            np.testing.assert_allclose(refined.center, gt.center, atol=1e-9)
            np.testing.assert_allclose(refined.size, gt.size, atol=1e-9)
            # axis recovered; heading direction carried by the bin
            assert iou3d(refined, gt) > 0.999
            heading = decode_heading(prop, t, np.eye(8)[hbin], 8)
            assert heading_bin(heading) == heading_bin(gt.yaw)

    def test_confidence_bce_ln2(self):
        prop = Proposal(np.zeros(3), np.ones(3), 0.0)
        from seformer.detection import RoiOutput, SceneTargets
        out = RoiOutput([prop], Tensor(np.zeros((1, 7))), Tensor(np.zeros(1)),
                        Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 4))))
        targets = SceneTargets(np.zeros((1, 7)), np.zeros(1, dtype=np.int64),
                               np.array([0.5]), np.zeros(1, dtype=bool))
        loss = detection_loss(out, targets, w_box=1.0, w_conf=1.0, w_heading=0.0)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_no_matches_confidence_only(self):
        prop = Proposal(np.zeros(3), np.ones(3), 0.0)
        from seformer.detection import RoiOutput, SceneTargets
        rng = np.random.default_rng(5)
        out = RoiOutput([prop], Tensor(rng.normal(size=(1, 7))),
                        Tensor(rng.normal(size=1)),
                        Tensor(rng.normal(size=(1, 8))),
                        Tensor(rng.normal(size=(1, 4))))
        targets = SceneTargets(np.zeros((1, 7)), np.zeros(1, dtype=np.int64),
                               np.array([0.1]), np.zeros(1, dtype=bool))
        with_all = detection_loss(out, targets, 5.0, 1.0, 5.0).item()
        conf_only = detection_loss(out, targets, 0.0, 1.0, 0.0).item()
        assert with_all == pytest.approx(conf_only)

    def test_gradcheck_through_full_loss(self):
        cfg, scene, model = scene_and_model(queries=16)
        props = generate_proposals(scene, "oracle_jitter", seed=scene.seed)[:1]
        targets = match_targets(props, scene.boxes, cfg.match_iou, 8)
        cache = PlanCache()
        p = model.box_head.w
        saved = p.data.copy()

        def loss_fn(t):
            model.box_head.w = t
            try:
                out = model.forward_scene(scene.cloud, props, cache,
                                          query_seed=scene.seed)
                return detection_loss(out, targets, cfg.w_box, cfg.w_conf,
                                      cfg.w_heading)
            finally:
                model.box_head.w = p

        err = grad_check(loss_fn, Tensor(saved), eps=1e-5)
        assert err < 1e-4


class TestGradientReachesPools:
    def test_nonempty_offsets_receive_gradient(self):
        cfg, scene, model = scene_and_model(variant_ssm="seformer",
                                            variant_head="seformer")
        cache = PlanCache()
        props = generate_proposals(scene, "oracle_jitter", seed=scene.seed)
        targets = match_targets(props, scene.boxes, cfg.match_iou, 8)
        out = model.forward_scene(scene.cloud, props, cache,
                                  query_seed=scene.seed)
        loss = detection_loss(out, targets, cfg.w_box, cfg.w_conf, cfg.w_heading)
        for p in model.named_parameters().values():
            p.zero_grad()
        ad.backward(loss)

        keys = model._block_keys(
            model.init_embedding(model.voxel_pyramid(scene.cloud, cache),
                                 model.select_queries(scene.cloud, cache,
                                                      seed=scene.seed), cache),
            model.voxel_pyramid(scene.cloud, cache).grid(1),
            model.stages[1].radii[0], model.stages[1], cache, ("keys", 1, 0))
        live_slots = set(np.asarray(keys.slots)[keys.valid.any(axis=0)].tolist())
        pool = model.stages[1].blocks[0][0].pools[0]
        for slot in live_slots:
            grad = pool.mats[slot].grad
            assert grad is not None and np.abs(grad).max() > 0.0, slot