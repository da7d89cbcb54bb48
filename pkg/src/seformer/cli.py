"""Command-line interface.

Subcommands: ``train``, ``eval``, ``ablate``, ``gradcheck``, ``gen-data``.
Exit codes: 0 success, 2 configuration error, 3 numeric abort.  The
``SEFORMER_WORKERS`` environment variable sets the ablation worker count.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .exceptions import ConfigError, ContractError, NumericError, TrainingAbort

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_config(path, seed) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg.validate()


def _parse_values(axis: str, raw: str):
    out = []
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if axis in ("m", "h", "layers"):
            out.append(int(chunk))
        elif axis == "scales":
            out.append([int(c) for c in chunk.split("+")])
        else:
            out.append(chunk)
    return out


def cmd_train(args) -> int:
    from .harness import train
    cfg = _load_config(args.config, args.seed)
    out_dir = Path(args.out)
    _, report = train(cfg, out_dir=out_dir)
    from .metrics import emit_report
    emit_report([report], args.format, out_dir)
    print(report.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate
    from .metrics import emit_report
    report = evaluate(args.checkpoint, args.config)
    out_dir = Path(args.out)
    emit_report([report], args.format, out_dir)
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness import ablate
    from .metrics import emit_report
    cfg = _load_config(args.config, args.seed)
    values = _parse_values(args.axis, args.values)
    reports = ablate(args.axis, values, cfg)
    out_dir = Path(args.out)
    emit_report(reports, args.format, out_dir)
    header = f"{'cell':>24} | {'heading_acc':>16} | {'ap70':>16}"
    print(header)
    print("-" * len(header))
    for r in reports:
        print(f"{r.label:>24} | {r.mean('heading_acc'):.4f} +- "
              f"{r.std('heading_acc'):.4f} | {r.mean('ap70'):.4f} +- "
              f"{r.std('ap70'):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Finite-difference verification of the differentiable stack."""
    from . import autodiff as ad
    from .attention import SEFormerUnit, VanillaUnit
    from .autodiff import Tensor, grad_check
    from .geometry import PointCloud, generate_virtual_keys

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    worst = 0.0
    for kind in ("seformer", "vanilla"):
        c = 8
        unit = (SEFormerUnit if kind == "seformer" else VanillaUnit)(
            c, heads=2, seed=int(rng.integers(1 << 30)))
        pc = PointCloud(rng.uniform(-1, 1, size=(12, 3)), rng.normal(size=(12, c)))
        ks = generate_virtual_keys(pc, rng.uniform(-0.3, 0.3, size=3), 0.6, 3)
        err = grad_check(lambda t: ad.tsum(ad.square(unit.forward(t, ks))),
                         Tensor(rng.normal(size=c)), eps=1e-5)
        print(f"gradcheck {kind}: max rel err {err:.3e}")
        worst = max(worst, err)
    if worst >= 1e-4:
        raise NumericError(f"gradient check failed: {worst:.3e} >= 1e-4")
    print("gradcheck passed")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from . import pointio
    from .scenes import make_dataset, scene_spec_from_config
    cfg = _load_config(args.config, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = make_dataset(scene_spec_from_config(cfg), cfg.train_scenes,
                          cfg.data_seed)
    for i, scene in enumerate(scenes):
        stem = out_dir / f"scene_{i:05d}"
        pointio.save_binary(scene.cloud, stem.with_suffix(".sfpc"))
        labels = {
            "seed": scene.seed,
            "tier": scene.tier,
            "boxes": [{"center": b.center.tolist(), "size": b.size.tolist(),
                       "yaw": b.yaw} for b in scene.boxes],
            "box_points": scene.box_points.tolist(),
        }
        stem.with_suffix(".json").write_text(json.dumps(labels, indent=2))
    print(f"wrote {len(scenes)} scenes to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seformer",
        description="Structure-embedding attention detection experiments")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None,
                       help="plain-text config file (key = value lines)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default="runs")
        p.add_argument("--format", choices=("csv", "json", "plot"), default="csv")

    p_train = sub.add_parser("train", help="train one configuration")
    common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="sweep one configuration axis")
    common(p_ablate)
    p_ablate.add_argument("--axis", type=str, required=True)
    p_ablate.add_argument("--values", type=str, required=True,
                          help="comma-separated values; scales use 1+3+4 form")
    p_ablate.set_defaults(fn=cmd_ablate)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p_grad)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_gen = sub.add_parser("gen-data", help="write synthetic scenes to disk")
    common(p_gen)
    p_gen.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingAbort) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
