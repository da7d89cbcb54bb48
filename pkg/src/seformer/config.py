"""Experiment configuration: defaults, plain-text round trip, hashing.

The config file is plain text, one ``key = value`` pair per line with
``#`` comments; values are JSON literals.  Recognized keys are the field
names of :class:`ExperimentConfig` (``scales``, ``m``, ``radii``,
``layers``, ``heads``, ``G``, ``topology``, ``empty_policy``, ...).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

from .exceptions import ConfigError

TOPOLOGIES = ("fully_parallel", "fully_chained", "half_parallel_half_chained")
VARIANTS = ("vanilla", "seformer")
SCALE_WIDTHS = {1: 16, 2: 32, 3: 64, 4: 64}


def _default_radii():
    # initial search radius per feature scale; blocks double it per step
    return [0.4, 0.8, 1.2, 2.4]


@dataclass
class ExperimentConfig:
    # model variants per stage
    variant_ssm: str = "seformer"
    variant_head: str = "seformer"

    # network/topology
    scales: list = field(default_factory=lambda: [1, 3, 4])
    m: int = 2
    radii: list = field(default_factory=_default_radii)
    layers: int = 2
    head_layers: int = 2
    heads: int = 2
    G: int = 6
    topology: str = "half_parallel_half_chained"
    empty_policy: str = "embed"
    sampling: str = "grid"
    grid_cells: int = 27
    k_interp: int = 3
    ball_max_k: int = 27
    embed_dim: int = 16
    pe_hidden: int = 16
    r_sub_factor: float = 0.5
    queries: int = 64
    heading_bins: int = 8

    # voxelization (meters)
    voxel_step: list = field(default_factory=lambda: [0.1, 0.1, 0.2])

    # optimization
    lr: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 4
    w_box: float = 2.0
    w_conf: float = 1.0
    w_heading: float = 1.0

    # data
    train_scenes: int = 400
    eval_scenes: int = 100
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    scene_extent: float = 12.0
    scene_boxes_min: int = 2
    scene_boxes_max: int = 3
    scene_base_points: int = 150
    scene_clutter: int = 40
    data_seed: int = 1000

    # proposals and matching
    proposals_per_box: int = 2
    direction_ambiguous: bool = True
    proposal_center_jitter: float = 0.1
    proposal_yaw_jitter_deg: float = 15.0
    proposal_size_jitter: float = 0.1
    match_iou: float = 0.5
    nms_iou: float = 1.0  # 1.0 disables suppression (oracle proposals rarely overlap)

    def validate(self) -> "ExperimentConfig":
        if self.variant_ssm not in VARIANTS or self.variant_head not in VARIANTS:
            raise ConfigError(f"variants must be in {VARIANTS}")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}")
        if self.empty_policy not in ("embed", "mask"):
            raise ConfigError("empty_policy must be 'embed' or 'mask'")
        if self.sampling not in ("grid", "ball_query"):
            raise ConfigError("sampling must be 'grid' or 'ball_query'")
        if self.grid_cells not in (27, 8):
            raise ConfigError("grid_cells must be 27 or 8")
        if not self.scales or any(s not in SCALE_WIDTHS for s in self.scales):
            raise ConfigError(f"scales must be a non-empty subset of 1..4")
        if sorted(self.scales) != list(self.scales):
            raise ConfigError("scales must be listed in increasing order")
        if self.m < 1 or self.layers < 1 or self.head_layers < 1:
            raise ConfigError("m, layers and head_layers must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if self.G < 1:
            raise ConfigError("G must be >= 1")
        if len(self.radii) != 4 or any(r <= 0 for r in self.radii):
            raise ConfigError("radii needs one positive initial radius per scale 1..4")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        return self

    def block_radii(self, scale: int) -> list:
        """Radii of the m parallel blocks at one scale (doubled per block)."""
        base = self.radii[scale - 1]
        return [base * (2.0 ** b) for b in range(self.m)]

    def subregion_radius(self, box_size) -> float:
        """Interpolation radius for sub-region cells: factor x cell diagonal."""
        cell = [s / self.G for s in box_size]
        return self.r_sub_factor * math.sqrt(sum(c * c for c in cell))

    def replace(self, **kwargs) -> "ExperimentConfig":
        data = asdict(self)
        data.update(kwargs)
        return ExperimentConfig(**data).validate()

    # -- serialization -----------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {json.dumps(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ExperimentConfig":
        known = {f.name for f in fields(ExperimentConfig)}
        data = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key '{key}'")
            try:
                data[key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}")
        return ExperimentConfig(**data).validate()

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]
