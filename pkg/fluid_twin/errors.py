"""Exception hierarchy shared by the fluid twin modules."""

from __future__ import annotations

from typing import Optional


class FluidTwinError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(FluidTwinError, ValueError):
    """Invalid configuration value, tagged with its dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class GridError(FluidTwinError, ValueError):
    """Grid geometry mismatch (dims, planes, kernel shape)."""


class ParticleBoundsError(FluidTwinError, ValueError):
    """A particle left the padded grid bounds."""


class PreconditionError(FluidTwinError, ValueError):
    """A command's inputs are well formed but too few or inconsistent to run it."""


class InputParseError(FluidTwinError):
    """A file could not be parsed; carries the file name and byte offset."""

    def __init__(self, file: str, offset: int, message: str):
        super().__init__(f"{file} @ byte {offset}: {message}")
        self.file = file
        self.offset = offset


class MissingInputError(FluidTwinError, FileNotFoundError):
    """A referenced input file does not exist."""

    def __init__(self, file: str, role: Optional[str] = None):
        label = f"{role} file" if role else "file"
        super().__init__(f"missing {label}: {file}")
        self.file = file
        self.role = role


class SimulationDiverged(FluidTwinError, FloatingPointError):
    """Non-finite values appeared during a rollout."""

    def __init__(self, step: int, message: str = "non-finite velocity"):
        super().__init__(f"step {step}: {message}")
        self.step = step


class TapeError(FluidTwinError, RuntimeError):
    """The gradient tape is incomplete or inconsistent."""


class CFLViolation(FluidTwinError, ValueError):
    """The time step exceeds the advective stability bound."""

    def __init__(self, courant: float, limit: float):
        super().__init__(f"CFL number {courant:.3f} exceeds {limit:.3f}")
        self.courant = courant
        self.limit = limit


__all__ = [
    "CFLViolation",
    "ConfigError",
    "FluidTwinError",
    "GridError",
    "InputParseError",
    "MissingInputError",
    "ParticleBoundsError",
    "PreconditionError",
    "SimulationDiverged",
    "TapeError",
]
