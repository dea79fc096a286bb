"""Fluid twin: single-view fluid reconstruction and differentiable grid simulation."""

from fluid_twin.config import APP_NAME, APP_VERSION

__version__ = APP_VERSION

__all__ = [
    "APP_NAME",
    "APP_VERSION",
    "apic_transfer",
    "config",
    "config_service",
    "diff_opt",
    "errors",
    "fluid_step",
    "formats",
    "grid_core",
    "logging_setup",
    "optim",
    "pipeline",
    "pointcloud_prep",
    "pressure",
    "surface_recon",
    "watchdog",
]
