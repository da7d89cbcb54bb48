"""Training, evaluation and the ablation driver.

A scene bundle packages one scene with its proposals, regression targets
and a geometry plan cache; plans are weight-independent, so bundles are
reused across epochs (and, via the shared dataset cache, across runs whose
geometry agrees).  Ablations auto-adjust the embedding and
position-encoder widths of every compared configuration so parameter
counts match the base configuration within five percent.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import apply_params, load_params, save_params
from .config import ExperimentConfig
from .detection import (
    DetectionModel,
    PlanCache,
    SceneTargets,
    decode_box,
    decode_heading,
    detection_loss,
    generate_proposals,
    match_targets,
)
from .exceptions import ConfigError, NumericError, TrainingAbort
from .boxes import greedy_nms
from .metrics import Detection, MetricsReport, SceneTruth, compute_metrics, emit_report
from .optim import Adam
from .scenes import SceneSample, make_dataset, scene_spec_from_config

log = logging.getLogger("seformer")

WORKERS_ENV = "SEFORMER_WORKERS"
EVAL_SEED_OFFSET = 100_000

ABLATION_AXES = ("variant", "m", "h", "layers", "scales", "topology",
                 "sampling", "empty_policy")
VARIANT_LABELS = {"T/T": ("vanilla", "vanilla"), "S/T": ("seformer", "vanilla"),
                  "S/S": ("seformer", "seformer"), "T/S": ("vanilla", "seformer")}


@dataclass
class SceneBundle:
    scene: SceneSample
    proposals: list
    targets: SceneTargets
    cache: PlanCache


def build_bundle(scene: SceneSample, cfg: ExperimentConfig) -> SceneBundle:
    proposals = generate_proposals(
        scene, "oracle_jitter", seed=scene.seed,
        n_per_box=cfg.proposals_per_box,
        center_jitter=cfg.proposal_center_jitter,
        yaw_jitter_deg=cfg.proposal_yaw_jitter_deg,
        size_jitter=cfg.proposal_size_jitter,
        direction_ambiguous=cfg.direction_ambiguous)
    targets = match_targets(proposals, scene.boxes, cfg.match_iou, cfg.heading_bins)
    return SceneBundle(scene, proposals, targets, PlanCache())


def geometry_hash(cfg: ExperimentConfig) -> str:
    """Key for bundle sharing: everything that shapes plans and targets."""
    fields = (cfg.sampling, cfg.grid_cells, cfg.k_interp, cfg.ball_max_k,
              tuple(cfg.scales), tuple(cfg.radii), cfg.m, cfg.G, cfg.r_sub_factor,
              cfg.queries, tuple(cfg.voxel_step), cfg.scene_extent,
              cfg.scene_boxes_min, cfg.scene_boxes_max, cfg.scene_base_points,
              cfg.scene_clutter, cfg.data_seed, cfg.train_scenes, cfg.eval_scenes,
              cfg.proposals_per_box, cfg.direction_ambiguous,
              cfg.proposal_center_jitter, cfg.proposal_yaw_jitter_deg,
              cfg.proposal_size_jitter, cfg.match_iou, cfg.heading_bins)
    return repr(fields)


def build_datasets(cfg: ExperimentConfig, shared: dict | None = None):
    """Train/eval bundles, memoized in ``shared`` by geometry hash."""
    key = geometry_hash(cfg)
    if shared is not None and key in shared:
        return shared[key]
    spec = scene_spec_from_config(cfg)
    train_scenes = make_dataset(spec, cfg.train_scenes, cfg.data_seed)
    eval_scenes = make_dataset(spec, cfg.eval_scenes,
                               cfg.data_seed + EVAL_SEED_OFFSET)
    bundles = ([build_bundle(s, cfg) for s in train_scenes],
               [build_bundle(s, cfg) for s in eval_scenes])
    if shared is not None:
        shared[key] = bundles
    return bundles


# ---------------------------------------------------------------------------
# prediction and evaluation

def predict_scene(model: DetectionModel, bundle: SceneBundle,
                  scene_id: int) -> list[Detection]:
    cfg = model.cfg
    with ad.no_grad():
        out = model.forward_scene(bundle.scene.cloud, bundle.proposals,
                                  bundle.cache, query_seed=bundle.scene.seed)
    res = out.residuals.data
    conf = 1.0 / (1.0 + np.exp(-out.conf_logits.data))
    heading = out.heading_logits.data
    dets = []
    for i, prop in enumerate(bundle.proposals):
        box = decode_box(prop, res[i])
        yaw = decode_heading(prop, res[i], heading[i], cfg.heading_bins)
        dets.append(Detection(scene_id, box, float(conf[i]), yaw))
    if cfg.nms_iou < 1.0 and len(dets) > 1:
        kept = greedy_nms([d.box for d in dets],
                          np.array([d.confidence for d in dets]), cfg.nms_iou)
        dets = [dets[i] for i in kept]
    return dets


def evaluate_model(model: DetectionModel, bundles: list[SceneBundle]) -> dict:
    """Metric dictionary over a bundle list (deterministic scene ids)."""
    dets: list[Detection] = []
    truths: dict[int, SceneTruth] = {}
    for scene_id, bundle in enumerate(bundles):
        truths[scene_id] = SceneTruth(scene_id, bundle.scene.boxes,
                                      bundle.scene.tier)
        dets.extend(predict_scene(model, bundle, scene_id))
    return compute_metrics(dets, truths, model.cfg.heading_bins)


def evaluate(checkpoint_path, config_path=None, shared: dict | None = None) \
        -> MetricsReport:
    """Standalone evaluation of a saved checkpoint on its held-out split."""
    checkpoint_path = Path(checkpoint_path)
    if config_path is None:
        config_path = checkpoint_path.with_suffix(".config.txt")
    cfg = ExperimentConfig.load(config_path)
    model = DetectionModel(cfg)
    apply_params(model.named_parameters(), load_params(checkpoint_path))
    _, eval_bundles = build_datasets(cfg, shared)
    if not eval_bundles:
        raise ConfigError("evaluation dataset is empty")
    report = MetricsReport(label="eval", config_hash=cfg.config_hash())
    report.add_seed(cfg.seed, evaluate_model(model, eval_bundles))
    return report


# ---------------------------------------------------------------------------
# training

def train(cfg: ExperimentConfig, out_dir=None, shared: dict | None = None):
    """Train one configuration; returns (model, MetricsReport).

    Deterministic given the config (including its seed).  A non-finite
    loss aborts with a diagnostic dump of the offending scene.
    """
    cfg.validate()
    t0 = time.perf_counter()
    train_bundles, eval_bundles = build_datasets(cfg, shared)
    model = DetectionModel(cfg)
    params = model.named_parameters()
    opt = Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
               eps=cfg.adam_eps)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1CE]))

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(train_bundles))
        total = 0.0
        for step, scene_idx in enumerate(order):
            bundle = train_bundles[scene_idx]
            try:
                out = model.forward_scene(bundle.scene.cloud, bundle.proposals,
                                          bundle.cache,
                                          query_seed=bundle.scene.seed)
                loss = detection_loss(out, bundle.targets, cfg.w_box, cfg.w_conf,
                                      cfg.w_heading)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss value {value}")
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                total += value
            except NumericError as exc:
                dump = {
                    "epoch": epoch,
                    "step": int(step),
                    "scene_seed": int(bundle.scene.seed),
                    "tier": bundle.scene.tier,
                    "error": str(exc),
                }
                dump_path = Path(out_dir or ".") / "numeric_abort.json"
                dump_path.parent.mkdir(parents=True, exist_ok=True)
                dump_path.write_text(json.dumps(dump, indent=2))
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"diagnostics in {dump_path}") from exc
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, cfg.epochs,
                 total / max(len(train_bundles), 1))

    report = MetricsReport(label=f"{cfg.variant_ssm[0].upper()}/"
                                 f"{cfg.variant_head[0].upper()}",
                           config_hash=cfg.config_hash())
    report.add_seed(cfg.seed, evaluate_model(model, eval_bundles))
    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / f"checkpoint_seed{cfg.seed}.npz"
        save_params(params, ckpt)
        cfg.save(out_dir / f"checkpoint_seed{cfg.seed}.config.txt")
        (out_dir / f"report_seed{cfg.seed}.json").write_text(report.to_json())
    return model, report


# ---------------------------------------------------------------------------
# parameter-count fairness

def _count_params(cfg: ExperimentConfig) -> int:
    return DetectionModel(cfg).parameter_count()


def match_parameter_budget(cfg: ExperimentConfig, target: int,
                           tolerance: float = 0.05) -> ExperimentConfig:
    """Adjust embed_dim (coarse) and pe_hidden (fine) to hit ``target``.

    Raises ConfigError when no width combination lands within tolerance.
    """
    h = cfg.heads
    best = None
    width = max(h, (cfg.embed_dim // h) * h)
    candidates = []
    c = width
    while c >= h and len(candidates) < 12:
        candidates.append(c)
        c -= h
    c = width + h
    while len(candidates) < 24:
        candidates.append(c)
        c += h
    for c in candidates:
        base = cfg.replace(embed_dim=c)
        n0 = _count_params(base)
        slope = _count_params(cfg.replace(embed_dim=c,
                                          pe_hidden=cfg.pe_hidden + 1)) - n0
        if slope <= 0:
            continue
        hidden = cfg.pe_hidden + round((target - n0) / slope)
        hidden = max(2, min(hidden, 4096))
        tuned = cfg.replace(embed_dim=c, pe_hidden=hidden)
        count = _count_params(tuned)
        err = abs(count - target) / target
        if best is None or err < best[0]:
            best = (err, tuned, count)
        if err <= tolerance / 4:
            break
    if best is None or best[0] > tolerance:
        raise ConfigError(
            f"cannot match parameter budget {target} within {tolerance:.0%}; "
            f"closest was {best[2] if best else 'n/a'}")
    return best[1]


# ---------------------------------------------------------------------------
# ablation driver

def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "variant":
        if isinstance(value, str):
            if value not in VARIANT_LABELS:
                raise ConfigError(f"variant must be one of {list(VARIANT_LABELS)}")
            ssm, head = VARIANT_LABELS[value]
        else:
            ssm, head = value
        return cfg.replace(variant_ssm=ssm, variant_head=head)
    if axis == "m":
        return cfg.replace(m=int(value))
    if axis == "h":
        return cfg.replace(heads=int(value))
    if axis == "layers":
        return cfg.replace(layers=int(value), head_layers=int(value))
    if axis == "scales":
        return cfg.replace(scales=list(value))
    if axis == "topology":
        return cfg.replace(topology=str(value))
    if axis == "sampling":
        return cfg.replace(sampling=str(value))
    if axis == "empty_policy":
        return cfg.replace(empty_policy=str(value))
    raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: "
                      + ", ".join(ABLATION_AXES))


def _axis_label(axis: str, value) -> str:
    if axis == "scales":
        return "scales=" + "+".join(str(s) for s in value)
    return f"{axis}={value}"


def _run_cell(args):
    cfg_text, seed = args
    cfg = ExperimentConfig.from_text(cfg_text).replace(seed=seed)
    _, report = train(cfg)
    return report.rows[seed]


def ablate(axis: str, values, base_cfg: ExperimentConfig,
           workers: int | None = None, shared: dict | None = None,
           match_budget: bool = True) -> list[MetricsReport]:
    """One train+eval per (value, seed); one labeled report per value.

    Parameter budgets of all compared configurations are matched to the
    base configuration within five percent before any training starts.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: "
                          + ", ".join(ABLATION_AXES))
    base_cfg.validate()
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    shared = shared if shared is not None else {}

    target = _count_params(base_cfg)
    cell_cfgs = []
    for value in values:
        cfg_v = apply_axis(base_cfg, axis, value)
        if match_budget:
            cfg_v = match_parameter_budget(cfg_v, target)
            count = _count_params(cfg_v)
            if abs(count - target) / target > 0.05:
                raise ConfigError("parameter budget mismatch after adjustment")
        cell_cfgs.append((value, cfg_v))
        log.info("ablate %s: params=%d (target %d) embed_dim=%d pe_hidden=%d",
                 _axis_label(axis, value), _count_params(cfg_v), target,
                 cfg_v.embed_dim, cfg_v.pe_hidden)

    reports = []
    if workers > 1:
        jobs = [(cfg_v.to_text(), seed)
                for _, cfg_v in cell_cfgs for seed in base_cfg.seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
        it = iter(rows)
        for value, cfg_v in cell_cfgs:
            report = MetricsReport(label=_axis_label(axis, value),
                                   config_hash=cfg_v.config_hash())
            for seed in base_cfg.seeds:
                report.rows[seed] = next(it)
            reports.append(report)
    else:
        for value, cfg_v in cell_cfgs:
            report = MetricsReport(label=_axis_label(axis, value),
                                   config_hash=cfg_v.config_hash())
            t0 = time.perf_counter()
            for seed in base_cfg.seeds:
                _, run_report = train(cfg_v.replace(seed=seed), shared=shared)
                report.rows[seed] = run_report.rows[seed]
            report.wall_clock = time.perf_counter() - t0
            reports.append(report)
    return reports
