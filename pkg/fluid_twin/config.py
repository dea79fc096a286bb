"""Application constants and default configuration sections."""

from typing import Any, Dict

APP_NAME = "FluidTwin"
APP_VERSION = "1.0.0"
CONFIG_FILE_NAME = "fluid_twin.json"

# Binary grid file header.
VGRD_MAGIC = b"VGRD"
VGRD_VERSION = 1

PARTICLES_PER_CELL = 8
SPEED_FLOOR = 1e-6
MAX_ROLLOUT_STEPS = 25

DEFAULT_GRID: Dict[str, Any] = {
    "dims": [32, 32, 32],
    "dx": 0.05,
    "origin": [0.0, 0.0, 0.0],
}

DEFAULT_PLANES: Dict[str, Any] = {
    "inlet": None,
    "outlet": None,
}

DEFAULT_MAINSTREAM: Dict[str, Any] = {
    "direction": [1.0, 0.0],
    "auto": False,
    "radius_px": 6,
    "sigma_px": 3.0,
}

DEFAULT_BOUNDARY_LAYER: Dict[str, Any] = {
    "medium": "liquid",
    "delta": None,
    "delta_cells_liquid": 4.0,
    "delta_cells_gas": 0.25,
}

DEFAULT_PRUNE: Dict[str, Any] = {
    "opacity_min": 0.1,
    "anisotropy_max": 10.0,
}

DEFAULT_FILL: Dict[str, Any] = {
    "occupancy_threshold": 0.3,
}

DEFAULT_BATCH: Dict[str, Any] = {
    "n_min": 2,
    "n_max": 16,
    "c": 1.0,
    "psnr_cap_db": 60.0,
}

DEFAULT_PROJECTION: Dict[str, Any] = {
    "constraint_2d_iters": 200,
    "constraint_2d_tol": 1e-6,
    "volumetric_iters": 500,
    "volumetric_tol": 1e-6,
    "volumetric_epsilon": None,
}

DEFAULT_STEP: Dict[str, Any] = {
    "pressure_iters": 100,
    "viscosity_scheme": "explicit",
    "convection_scheme": "semi_lagrangian",
    "solver": "jacobi",
    "inlet_omega": 0.5,
    "kernel_file": None,
}

DEFAULT_SIM: Dict[str, Any] = {
    "v_in": [0.5, 0.0, 0.0],
    "v_tilde_in": 0.01,
    "v_out": [0.5, 0.0, 0.0],
    "rho": 1000.0,
    "nu": 1e-6,
    "b": 0.2,
    "d": 0.1,
    "g": [0.0, -9.81, 0.0],
    "dt": 0.01,
}

DEFAULT_NORMALIZATION: Dict[str, Any] = {
    "v_in": {"activation": "identity", "scale": 1.0},
    "v_tilde_in": {"activation": "exp", "scale": 0.01},
    "v_out": {"activation": "identity", "scale": 1.0},
    "rho": {"activation": "exp", "scale": 1000.0},
    "nu": {"activation": "exp", "scale": 1e-6},
    "b": {"activation": "sigmoid_scaled", "scale": 1.0},
    "d": {"activation": "sigmoid_scaled", "scale": 1.0},
    "g": {"activation": "identity", "scale": 10.0},
    "dt": {"activation": "exp", "scale": 0.01},
}

DEFAULT_LOSS: Dict[str, Any] = {
    "alpha": 0.5,
    "beta": 0.5,
    "mask_weights": {
        "EMPTY": 0.0,
        "FLUID": 0.5,
        "SURFACE": 1.0,
        "SOLID": 0.0,
        "INLET": 0.5,
        "OUTLET": 0.5,
    },
}

DEFAULT_OPTIMIZER: Dict[str, Any] = {
    "iterations": 200,
    "lr": 1e-2,
    "lr_final_ratio": 1e-2,
    "beta1": 0.9,
    "beta2": 0.999,
    "rollout_steps": None,
    "rollout_constant": 0.5,
    "windows_per_iteration": 2,
    "frozen": [],
    "cfl": 1.0,
    "grad_mode": "recorded_jacobi",
    "stall_timeout_s": 120.0,
    "time_budget_s": 0.0,
}

DEFAULT_CAMERA: Dict[str, Any] = {
    "projection": [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
    "world_to_camera": [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
    "screen_scale": [1.0, 1.0],
    "screen_translation": [0.0, 0.0],
}

DEFAULT_SIMULATE: Dict[str, Any] = {
    "particles_per_cell": PARTICLES_PER_CELL,
    "edits": {},
    "obstacles": [],
}

DEFAULT_LOGGING: Dict[str, Any] = {
    "level": "INFO",
    "json_lines": None,
}

DEFAULT_FRAME_DT = 1.0 / 30.0
DEFAULT_SEED = 0
