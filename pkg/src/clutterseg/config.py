"""Pipeline configuration.

All tunables live in one flat dataclass so a JSON file can override any of
them by name. Defaults reproduce the published implementation details.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # geometry
    voxel_size_m: float = 0.005
    min_occupancy: int = 3
    alpha: float = 0.5
    beta: float = 1.0
    tau_merge: float = 0.01
    k_nn: int = 16

    # hierarchy / grouping
    tau_contain: float = 0.95
    tau_spat: float = 0.5
    tau_sem: float = 0.65
    eps: float = 1e-8
    visibility_tol_m: float = 0.02
    substitution: bool = True
    vote_min_score: float = 0.5

    # scene update
    tau_iou: float = 0.75
    coarse_chamfer: float = 50.0
    coarse_photo: float = 0.5
    coarse_reg_z: float = 10.0
    fine_chamfer: float = 10.0
    fine_photo: float = 2.0
    fine_reg_z: float = 1.0
    coarse_iters: int = 200
    fine_iters: int = 100
    coarse_step: float = 0.01
    fine_step: float = 0.005
    fd_step: float = 1e-4
    reg_z_unit_m: float = 0.001
    momentum: float = 0.9
    patience: int = 25                  # stop a stage after this many iterations without progress
    init_centroid_align: bool = True
    init_yaw_scan_deg: float = 45.0
    match_cosine_weight: float = 0.5

    # evaluation
    eval_voxel_m: float = 0.01
    ap_interpolation: str = "101"

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        _check_keys(overrides)
        return replace(self, **overrides)


_UNIT = ("tau_contain", "tau_spat", "tau_sem", "match_cosine_weight")
_NONNEG = ("init_yaw_scan_deg", "alpha", "beta", "vote_min_score", "coarse_chamfer", "coarse_photo", "coarse_reg_z",
           "fine_chamfer", "fine_photo", "fine_reg_z", "visibility_tol_m")
_POSITIVE = ("voxel_size_m", "tau_merge", "eps", "coarse_step", "fine_step", "fd_step", "reg_z_unit_m",
             "eval_voxel_m")


def _fail(name, value, why):
    raise ConfigError(f"out of range: {name}={value!r} ({why})")


def validate(cfg: PipelineConfig) -> None:
    for name in _UNIT:
        v = getattr(cfg, name)
        if not (0.0 <= v <= 1.0):
            _fail(name, v, "must lie in [0, 1]")
    for name in _NONNEG:
        v = getattr(cfg, name)
        if not (v >= 0.0 and math.isfinite(v)):
            _fail(name, v, "must be >= 0")
    for name in _POSITIVE:
        v = getattr(cfg, name)
        if not (v > 0.0 and math.isfinite(v)):
            _fail(name, v, "must be > 0")
    if not (0.0 < cfg.tau_iou < 1.0):
        _fail("tau_iou", cfg.tau_iou, "must lie in (0, 1)")
    if int(cfg.patience) != cfg.patience or cfg.patience < 1:
        _fail("patience", cfg.patience, "integer >= 1")
    if not (0.0 <= cfg.momentum < 1.0):
        _fail("momentum", cfg.momentum, "must lie in [0, 1)")
    if int(cfg.min_occupancy) != cfg.min_occupancy or cfg.min_occupancy < 1:
        _fail("min_occupancy", cfg.min_occupancy, "integer >= 1")
    if int(cfg.k_nn) != cfg.k_nn or cfg.k_nn < 3:
        _fail("k_nn", cfg.k_nn, "integer >= 3")
    for name in ("coarse_iters", "fine_iters"):
        v = getattr(cfg, name)
        if int(v) != v or v < 0:
            _fail(name, v, "integer >= 0")
    if cfg.ap_interpolation not in ("101", "all"):
        _fail("ap_interpolation", cfg.ap_interpolation, "'101' or 'all'")


def _check_keys(data: dict) -> None:
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load a JSON config file; ``None`` or a missing file yields defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        return PipelineConfig()
    data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    _check_keys(data)
    return PipelineConfig(**data)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse a ``key=value`` command-line override into a typed pair."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    _check_keys({key: None})
    default = getattr(PipelineConfig(), key)
    if isinstance(default, bool):
        value: Any = raw.strip().lower() in ("1", "true", "yes", "on")
    elif isinstance(default, int):
        value = int(raw)
    elif isinstance(default, float):
        value = float(raw)
    else:
        value = raw.strip()
    return key, value
