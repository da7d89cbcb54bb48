"""Scikit-learn style front end for the toy detector.

``SEFormerDetector`` exposes fit/predict/score plus ``get_params`` and
``set_params`` so the pipeline composes with model selection tooling.
Scenes play the role of samples: ``fit`` takes a list of SceneSample (or
generates its own synthetic training set when given ``None``), ``predict``
returns per-scene detection lists, and ``score`` is mean AP at IoU 0.7.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import ExperimentConfig
from .detection import DetectionModel
from .harness import SceneBundle, build_bundle, evaluate_model, predict_scene, train
from .metrics import SceneTruth, average_precision
from .scenes import SceneSample


def check_scenes(scenes) -> list[SceneSample]:
    """Validate a scene list (the estimator's input-validation helper)."""
    if not isinstance(scenes, (list, tuple)) or len(scenes) == 0:
        raise ValueError("expected a non-empty list of SceneSample")
    for i, s in enumerate(scenes):
        if not isinstance(s, SceneSample):
            raise TypeError(f"scenes[{i}] is {type(s).__name__}, not SceneSample")
        if s.cloud.n < 1:
            raise ValueError(f"scenes[{i}] has an empty point cloud")
    return list(scenes)


class SEFormerDetector(BaseEstimator):
    """Two-stage 3D box refiner with structure-embedding attention.

    Parameters mirror :class:`ExperimentConfig` fields; unknown keyword
    arguments are rejected by ``set_params`` as usual for estimators.
    """

    def __init__(self, variant_ssm: str = "seformer", variant_head: str = "seformer",
                 m: int = 2, heads: int = 2, layers: int = 2, head_layers: int = 2,
                 scales: tuple = (1, 3, 4), topology: str = "half_parallel_half_chained",
                 empty_policy: str = "embed", sampling: str = "grid",
                 grid_cells: int = 27, embed_dim: int = 16, pe_hidden: int = 16,
                 G: int = 6, queries: int = 64, lr: float = 3e-3, epochs: int = 4,
                 w_box: float = 1.0, w_conf: float = 1.0, w_heading: float = 1.0,
                 train_scenes: int = 400, eval_scenes: int = 100, seed: int = 0):
        self.variant_ssm = variant_ssm
        self.variant_head = variant_head
        self.m = m
        self.heads = heads
        self.layers = layers
        self.head_layers = head_layers
        self.scales = scales
        self.topology = topology
        self.empty_policy = empty_policy
        self.sampling = sampling
        self.grid_cells = grid_cells
        self.embed_dim = embed_dim
        self.pe_hidden = pe_hidden
        self.G = G
        self.queries = queries
        self.lr = lr
        self.epochs = epochs
        self.w_box = w_box
        self.w_conf = w_conf
        self.w_heading = w_heading
        self.train_scenes = train_scenes
        self.eval_scenes = eval_scenes
        self.seed = seed

    def _config(self) -> ExperimentConfig:
        return ExperimentConfig(
            variant_ssm=self.variant_ssm, variant_head=self.variant_head,
            m=self.m, heads=self.heads, layers=self.layers,
            head_layers=self.head_layers, scales=list(self.scales),
            topology=self.topology, empty_policy=self.empty_policy,
            sampling=self.sampling, grid_cells=self.grid_cells,
            embed_dim=self.embed_dim, pe_hidden=self.pe_hidden, G=self.G,
            queries=self.queries, lr=self.lr, epochs=self.epochs,
            w_box=self.w_box, w_conf=self.w_conf, w_heading=self.w_heading,
            train_scenes=self.train_scenes, eval_scenes=self.eval_scenes,
            seed=self.seed).validate()

    def fit(self, X=None, y=None):
        """Train on the given scenes (or a generated synthetic dataset)."""
        cfg = self._config()
        if X is None:
            self.model_, self.report_ = train(cfg)
        else:
            scenes = check_scenes(X)
            from . import autodiff as ad
            from .detection import detection_loss
            from .optim import Adam
            bundles = [build_bundle(s, cfg) for s in scenes]
            model = DetectionModel(cfg)
            opt = Adam(model.named_parameters(), lr=cfg.lr,
                       betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
            order_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 0xD1CE]))
            for _ in range(cfg.epochs):
                for i in order_rng.permutation(len(bundles)):
                    b = bundles[i]
                    out = model.forward_scene(b.scene.cloud, b.proposals, b.cache,
                                              query_seed=b.scene.seed)
                    loss = detection_loss(out, b.targets, cfg.w_box, cfg.w_conf,
                                          cfg.w_heading)
                    opt.zero_grad()
                    ad.backward(loss)
                    opt.step()
            self.model_ = model
            self.report_ = None
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("SEFormerDetector is not fitted; call fit first")

    def predict(self, X):
        """Per-scene detection lists for the given scenes."""
        self._check_fitted()
        scenes = check_scenes(X)
        cfg = self.model_.cfg
        out = []
        for scene_id, scene in enumerate(scenes):
            bundle = build_bundle(scene, cfg)
            out.append(predict_scene(self.model_, bundle, scene_id))
        return out

    def score(self, X, y=None) -> float:
        """Mean AP at IoU 0.7 over the given scenes."""
        self._check_fitted()
        scenes = check_scenes(X)
        dets = []
        truths = {}
        for scene_id, (scene, scene_dets) in enumerate(zip(scenes, self.predict(X))):
            truths[scene_id] = SceneTruth(scene_id, scene.boxes, scene.tier)
            dets.extend(scene_dets)
        return average_precision(dets, truths, 0.7)
