"""Configuration persistence and validation for the fluid twin pipeline."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np

from fluid_twin.config import (
    CONFIG_FILE_NAME,
    DEFAULT_BATCH,
    DEFAULT_BOUNDARY_LAYER,
    DEFAULT_CAMERA,
    DEFAULT_FILL,
    DEFAULT_FRAME_DT,
    DEFAULT_GRID,
    DEFAULT_LOGGING,
    DEFAULT_LOSS,
    DEFAULT_MAINSTREAM,
    DEFAULT_NORMALIZATION,
    DEFAULT_OPTIMIZER,
    DEFAULT_PLANES,
    DEFAULT_PRUNE,
    DEFAULT_PROJECTION,
    DEFAULT_SEED,
    DEFAULT_SIM,
    DEFAULT_SIMULATE,
    DEFAULT_STEP,
)
from fluid_twin.diff_opt import LossWeights, OptimizerConfig, ParamNormalization
from fluid_twin.errors import ConfigError, GridError, InputParseError, MissingInputError
from fluid_twin.fluid_step import PARAM_NAMES, SimParams, StepConfig
from fluid_twin.grid_core import PlaneSpec
from fluid_twin.surface_recon import BoundaryLayer, CameraModel, MainstreamSpec

logger = logging.getLogger(__name__)

DEFAULT_SECTIONS: Dict[str, Any] = {
    "grid": DEFAULT_GRID,
    "planes": DEFAULT_PLANES,
    "mainstream": DEFAULT_MAINSTREAM,
    "boundary_layer": DEFAULT_BOUNDARY_LAYER,
    "prune": DEFAULT_PRUNE,
    "fill": DEFAULT_FILL,
    "batch": DEFAULT_BATCH,
    "projection": DEFAULT_PROJECTION,
    "step": DEFAULT_STEP,
    "sim": DEFAULT_SIM,
    "normalization": DEFAULT_NORMALIZATION,
    "loss": DEFAULT_LOSS,
    "optimizer": DEFAULT_OPTIMIZER,
    "camera": DEFAULT_CAMERA,
    "frame_dt": DEFAULT_FRAME_DT,
    "seed": DEFAULT_SEED,
    "simulate": DEFAULT_SIMULATE,
    "logging": DEFAULT_LOGGING,
}

# Sections whose keys are open-ended mappings rather than fixed fields.
_OPEN_KEYS = {"loss.mask_weights", "simulate.edits", "normalization"}
_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
_MEDIA = ("liquid", "gas")


def _merge(base: Dict[str, Any], update: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in merged and path not in _OPEN_KEYS:
            raise ConfigError(where, "unknown key")
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _positive(value: Any, path: str, integer: bool = False) -> Any:
    try:
        number = int(value) if integer else float(value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected a number, got {value!r}") from None
    if integer and number != value:
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if not number > 0 or (not integer and not math.isfinite(number)):
        raise ConfigError(path, "must be > 0")
    return number


def _vector(value: Any, size: int, path: str) -> list:
    try:
        array = np.asarray(value, dtype=np.float64).reshape(-1)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected {size} numbers") from None
    if array.size != size or not np.all(np.isfinite(array)):
        raise ConfigError(path, f"expected {size} finite numbers")
    return array.tolist()


@dataclass
class PipelineConfig:
    """A validated configuration document with typed accessors."""

    data: Dict[str, Any]

    def section(self, name: str) -> Dict[str, Any]:
        return self.data[name]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def frame_dt(self) -> float:
        return float(self.data["frame_dt"])

    def inlet_plane(self) -> Optional[PlaneSpec]:
        text = self.data["planes"]["inlet"]
        return PlaneSpec.parse(text) if text else None

    def outlet_plane(self) -> Optional[PlaneSpec]:
        text = self.data["planes"]["outlet"]
        return PlaneSpec.parse(text) if text else None

    def sim_params(self) -> SimParams:
        return SimParams.from_dict(self.data["sim"])

    def step_config(self, kernel: Any = None) -> StepConfig:
        values = {k: v for k, v in self.data["step"].items() if k != "kernel_file"}
        return StepConfig(**values, kernel=kernel)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.data["loss"])

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.data["optimizer"])

    def normalization(self) -> ParamNormalization:
        return ParamNormalization(self.data["normalization"], frozen=self.data["optimizer"]["frozen"])

    def camera_model(self) -> CameraModel:
        return CameraModel(**self.data["camera"])

    def mainstream_spec(self) -> MainstreamSpec:
        ms = self.data["mainstream"]
        return MainstreamSpec(direction=ms["direction"], radius=ms["radius_px"], sigma=ms["sigma_px"], auto=ms["auto"])

    def boundary_layer(self) -> BoundaryLayer:
        bl = self.data["boundary_layer"]
        if bl["delta"] is not None:
            return BoundaryLayer(delta=float(bl["delta"]))
        return BoundaryLayer.for_medium(
            bl["medium"], float(self.data["grid"]["dx"]), bl["delta_cells_liquid"], bl["delta_cells_gas"]
        )

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.data)


class ConfigService:
    """Read, validate and write the pipeline's JSON configuration."""

    def __init__(self, path: Optional[str] = None):
        self.path = path or CONFIG_FILE_NAME

    # ------------------------------------------------------------------
    # Public API
    # ------------------------------------------------------------------
    def load(self, path: Optional[str] = None, overrides: Iterable[str] = ()) -> PipelineConfig:
        """Defaults, deep-merged with the file (if any) and ``section.key=value`` overrides."""

        data = self.reference()
        if path is not None:
            data = _merge(data, self._read_config(path))
        data = self._apply_overrides(data, overrides)
        config = PipelineConfig(self._normalize(data))
        logger.debug("[Config] loaded %s", path or "defaults")
        return config

    def save(self, config: PipelineConfig, path: Optional[str] = None) -> None:
        self._write_config(self._build_payload(config), path or self.path)

    @staticmethod
    def reference() -> Dict[str, Any]:
        return copy.deepcopy(DEFAULT_SECTIONS)

    # ------------------------------------------------------------------
    # Internal helpers
    # ------------------------------------------------------------------
    def _read_config(self, path: str) -> Dict[str, Any]:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                text = handle.read()
        except FileNotFoundError:
            raise MissingInputError(path, "config") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputParseError(path, exc.pos, exc.msg) from None
        if not isinstance(data, dict):
            raise InputParseError(path, 0, "top level must be an object")
        return data

    def _write_config(self, payload: Dict[str, Any], path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=4, sort_keys=True)
        logger.info("[Config] saved %s", path)

    def _build_payload(self, config: PipelineConfig) -> Dict[str, Any]:
        return config.to_dict()

    def _apply_overrides(self, data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
        for item in overrides:
            key, sep, raw = str(item).partition("=")
            if not sep or not key.strip():
                raise ConfigError(str(item), "override must look like section.key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            update: Any = value
            for part in reversed(key.strip().split(".")):
                update = {part: update}
            data = _merge(data, update)
        return data

    def _normalize(self, data: Dict[str, Any]) -> Dict[str, Any]:
        data["grid"] = self._normalize_grid(data["grid"])
        data["planes"] = self._normalize_planes(data["planes"])
        data["mainstream"] = self._normalize_mainstream(data["mainstream"])
        data["boundary_layer"] = self._normalize_boundary_layer(data["boundary_layer"])
        data["prune"] = self._normalize_prune(data["prune"])
        data["fill"] = self._normalize_fill(data["fill"])
        data["batch"] = self._normalize_batch(data["batch"])
        data["projection"] = self._normalize_projection(data["projection"])
        data["camera"] = self._normalize_camera(data["camera"])
        data["frame_dt"] = _positive(data["frame_dt"], "frame_dt")
        if not isinstance(data["seed"], int) or isinstance(data["seed"], bool) or data["seed"] < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        data["simulate"] = self._normalize_simulate(data["simulate"], data["sim"])
        data["logging"] = self._normalize_logging(data["logging"])

        # Downstream types carry their own field-path validation.
        SimParams.from_dict(data["sim"])
        self._normalize_step(data["step"])
        LossWeights(**data["loss"])
        OptimizerConfig(**data["optimizer"])
        ParamNormalization(data["normalization"], frozen=data["optimizer"]["frozen"])
        return data

    def _normalize_grid(self, grid: Dict[str, Any]) -> Dict[str, Any]:
        dims = grid["dims"]
        if not isinstance(dims, (list, tuple)) or len(dims) != 3:
            raise ConfigError("grid.dims", "expected three integers")
        grid["dims"] = [_positive(n, f"grid.dims[{i}]", integer=True) for i, n in enumerate(dims)]
        grid["dx"] = _positive(grid["dx"], "grid.dx")
        grid["origin"] = _vector(grid["origin"], 3, "grid.origin")
        return grid

    def _normalize_planes(self, planes: Dict[str, Any]) -> Dict[str, Any]:
        parsed = {}
        for name in ("inlet", "outlet"):
            text = planes[name]
            if text is None:
                continue
            try:
                parsed[name] = PlaneSpec.parse(text)
            except GridError as exc:
                raise ConfigError(f"planes.{name}", str(exc)) from None
            planes[name] = parsed[name].label()
        if len(parsed) == 2 and parsed["inlet"] == parsed["outlet"]:
            raise ConfigError("planes.outlet", "inlet and outlet cannot share a plane")
        return planes

    def _normalize_mainstream(self, ms: Dict[str, Any]) -> Dict[str, Any]:
        ms["direction"] = _vector(ms["direction"], 2, "mainstream.direction")
        if ms["direction"] == [0.0, 0.0]:
            raise ConfigError("mainstream.direction", "must be non-zero")
        ms["radius_px"] = _positive(ms["radius_px"], "mainstream.radius_px", integer=True)
        ms["sigma_px"] = _positive(ms["sigma_px"], "mainstream.sigma_px")
        ms["auto"] = bool(ms["auto"])
        return ms

    def _normalize_boundary_layer(self, bl: Dict[str, Any]) -> Dict[str, Any]:
        if bl["medium"] not in _MEDIA:
            raise ConfigError("boundary_layer.medium", f"must be one of {_MEDIA}")
        if bl["delta"] is not None:
            bl["delta"] = _positive(bl["delta"], "boundary_layer.delta")
        bl["delta_cells_liquid"] = _positive(bl["delta_cells_liquid"], "boundary_layer.delta_cells_liquid")
        bl["delta_cells_gas"] = _positive(bl["delta_cells_gas"], "boundary_layer.delta_cells_gas")
        return bl

    def _normalize_prune(self, prune: Dict[str, Any]) -> Dict[str, Any]:
        prune["opacity_min"] = _positive(prune["opacity_min"], "prune.opacity_min")
        if prune["opacity_min"] >= 1.0:
            raise ConfigError("prune.opacity_min", "must be < 1")
        prune["anisotropy_max"] = _positive(prune["anisotropy_max"], "prune.anisotropy_max")
        if prune["anisotropy_max"] < 1.0:
            raise ConfigError("prune.anisotropy_max", "must be >= 1")
        return prune

    def _normalize_fill(self, fill: Dict[str, Any]) -> Dict[str, Any]:
        fill["occupancy_threshold"] = _positive(fill["occupancy_threshold"], "fill.occupancy_threshold")
        if fill["occupancy_threshold"] > 1.0:
            raise ConfigError("fill.occupancy_threshold", "must be <= 1")
        return fill

    def _normalize_batch(self, batch: Dict[str, Any]) -> Dict[str, Any]:
        batch["n_min"] = _positive(batch["n_min"], "batch.n_min", integer=True)
        batch["n_max"] = _positive(batch["n_max"], "batch.n_max", integer=True)
        if batch["n_max"] < batch["n_min"]:
            raise ConfigError("batch.n_max", "must be >= batch.n_min")
        batch["c"] = _positive(batch["c"], "batch.c")
        batch["psnr_cap_db"] = _positive(batch["psnr_cap_db"], "batch.psnr_cap_db")
        return batch

    def _normalize_projection(self, proj: Dict[str, Any]) -> Dict[str, Any]:
        for key in ("constraint_2d_iters", "volumetric_iters"):
            proj[key] = _positive(proj[key], f"projection.{key}", integer=True)
        for key in ("constraint_2d_tol", "volumetric_tol"):
            proj[key] = _positive(proj[key], f"projection.{key}")
        if proj["volumetric_epsilon"] is not None:
            proj["volumetric_epsilon"] = _positive(proj["volumetric_epsilon"], "projection.volumetric_epsilon")
        return proj

    def _normalize_step(self, step_cfg: Dict[str, Any]) -> None:
        values = {k: v for k, v in step_cfg.items() if k != "kernel_file"}
        StepConfig(**values)
        if step_cfg["solver"] == "stencil_recurrent" and not step_cfg["kernel_file"]:
            logger.info("[Config] stencil_recurrent without kernel_file uses the analytic kernel")

    def _normalize_camera(self, camera: Dict[str, Any]) -> Dict[str, Any]:
        for key in ("projection", "world_to_camera"):
            matrix = np.asarray(_vector(camera[key], 16, f"camera.{key}")).reshape(4, 4)
            if abs(np.linalg.det(matrix)) < 1e-12:
                raise ConfigError(f"camera.{key}", "matrix must be invertible")
            camera[key] = matrix.tolist()
        camera["screen_scale"] = _vector(camera["screen_scale"], 2, "camera.screen_scale")
        if 0.0 in camera["screen_scale"]:
            raise ConfigError("camera.screen_scale", "must be non-zero")
        camera["screen_translation"] = _vector(camera["screen_translation"], 2, "camera.screen_translation")
        return camera

    def _normalize_simulate(self, sim_cfg: Dict[str, Any], sim: Dict[str, Any]) -> Dict[str, Any]:
        sim_cfg["particles_per_cell"] = _positive(sim_cfg["particles_per_cell"], "simulate.particles_per_cell", integer=True)
        edits = sim_cfg["edits"]
        if not isinstance(edits, dict):
            raise ConfigError("simulate.edits", "must be an object of parameter overrides")
        for name in edits:
            if name not in PARAM_NAMES:
                raise ConfigError(f"simulate.edits.{name}", "unknown parameter")
        SimParams.from_dict({**sim, **edits})
        sim_cfg["obstacles"] = self._normalize_obstacles(sim_cfg["obstacles"])
        return sim_cfg

    def _normalize_obstacles(self, obstacles: Sequence[Any]) -> list:
        cleaned = []
        for i, box in enumerate(obstacles or []):
            path = f"simulate.obstacles[{i}]"
            if not isinstance(box, dict) or set(box) != {"min", "max"}:
                raise ConfigError(path, "obstacle must be {'min': [x,y,z], 'max': [x,y,z]}")
            low = _vector(box["min"], 3, f"{path}.min")
            high = _vector(box["max"], 3, f"{path}.max")
            if any(h <= l for l, h in zip(low, high)):
                raise ConfigError(path, "max must exceed min on every axis")
            cleaned.append({"min": low, "max": high})
        return cleaned

    def _normalize_logging(self, cfg: Dict[str, Any]) -> Dict[str, Any]:
        level = str(cfg["level"]).upper()
        if level not in _LOG_LEVELS:
            raise ConfigError("logging.level", f"must be one of {_LOG_LEVELS}")
        cfg["level"] = level
        return cfg


__all__ = ["ConfigService", "DEFAULT_SECTIONS", "PipelineConfig"]
