"""On-disk formats: VGRD grids, Gaussian PLY clouds, raw rasters, parameter and CSV documents."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fluid_twin.config import VGRD_MAGIC, VGRD_VERSION
from fluid_twin.errors import ConfigError, InputParseError, MissingInputError
from fluid_twin.fluid_step import PARAM_NAMES, VECTOR_PARAMS, SimParams
from fluid_twin.pointcloud_prep import GaussianCloud

logger = logging.getLogger(__name__)


def _require(path: str, role: Optional[str] = None) -> None:
    if not os.path.isfile(path):
        raise MissingInputError(path, role)


# ----------------------------------------------------------------------
# VGRD volumetric grids
# ----------------------------------------------------------------------
VGRD_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("dims", "<u4", (3,)),
        ("dx", "<f4"),
        ("origin", "<f4", (3,)),
        ("channels", "<u4"),
    ]
)


@dataclass
class VolumeGrid:
    """A multi-channel cell field as stored in a VGRD file; ``data`` is dims + (channels,)."""

    data: np.ndarray
    dx: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])


def write_vgrd(path: str, values: np.ndarray, dx: float, origin: Sequence[float] = (0.0, 0.0, 0.0)) -> None:
    """Write a (nx, ny, nz) or (nx, ny, nz, C) field as little-endian f32, x fastest, channel-major."""

    values = np.asarray(values)
    if values.ndim == 3:
        values = values[..., None]
    if values.ndim != 4:
        raise ValueError(f"VGRD data must be 3D or 4D, got shape {values.shape}")
    header = np.zeros((), dtype=VGRD_HEADER)
    header["magic"] = VGRD_MAGIC
    header["version"] = VGRD_VERSION
    header["dims"] = values.shape[:3]
    header["dx"] = dx
    header["origin"] = np.asarray(origin, dtype=np.float64).reshape(3)
    header["channels"] = values.shape[3]
    with open(path, "wb") as handle:
        handle.write(header.tobytes())
        for channel in range(values.shape[3]):
            handle.write(np.asarray(values[..., channel], dtype="<f4").tobytes(order="F"))


def read_vgrd(path: str) -> VolumeGrid:
    _require(path, "grid")
    with open(path, "rb") as handle:
        blob = handle.read()
    size = VGRD_HEADER.itemsize
    if len(blob) < size:
        raise InputParseError(path, len(blob), f"truncated header ({len(blob)} of {size} bytes)")
    header = np.frombuffer(blob, dtype=VGRD_HEADER, count=1)[0]
    if bytes(header["magic"]) != VGRD_MAGIC:
        raise InputParseError(path, 0, f"bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != VGRD_VERSION:
        raise InputParseError(path, 4, f"unsupported version {int(header['version'])}")
    dims = tuple(int(n) for n in header["dims"])
    channels = int(header["channels"])
    if min(dims) < 1 or channels < 1:
        raise InputParseError(path, 8, f"invalid dims {dims} / channels {channels}")
    if not float(header["dx"]) > 0.0:
        raise InputParseError(path, 20, f"dx must be positive, got {float(header['dx'])}")
    expected = size + 4 * channels * int(np.prod(dims))
    if len(blob) != expected:
        raise InputParseError(path, min(len(blob), expected), f"payload is {len(blob) - size} bytes, expected {expected - size}")
    flat = np.frombuffer(blob, dtype="<f4", offset=size)
    per = int(np.prod(dims))
    data = np.stack([flat[c * per:(c + 1) * per].reshape(dims, order="F") for c in range(channels)], axis=-1)
    return VolumeGrid(data=data, dx=float(header["dx"]), origin=np.asarray(header["origin"], dtype=np.float64))


# ----------------------------------------------------------------------
# PLY Gaussian clouds
# ----------------------------------------------------------------------
_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
    "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4",
}
_PLY_FORMATS = ("binary_little_endian", "ascii")
_CORE_PROPERTIES = (
    ["x", "y", "z", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


@dataclass
class PlyTable:
    """Raw vertex columns in file order."""

    columns: Dict[str, np.ndarray]
    types: Dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


def _parse_header(path: str, blob: bytes) -> Tuple[str, int, List[Tuple[str, str]], int]:
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise InputParseError(path, 0, "missing ply magic or end_header")
    stop = blob.index(b"\n", end) + 1
    fmt, count = "", -1
    props: List[Tuple[str, str]] = []
    offset = 0
    current = None
    for raw in blob[:stop].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        parts = line.split()
        if parts[:1] == ["format"]:
            fmt = parts[1] if len(parts) > 1 else ""
            if fmt not in _PLY_FORMATS:
                raise InputParseError(path, offset, f"unsupported PLY format {fmt!r}")
        elif parts[:1] == ["element"]:
            current = parts[1] if len(parts) > 1 else ""
            declared = parts[2] if len(parts) > 2 else ""
            if not declared.isdigit():
                raise InputParseError(path, offset, f"bad element count in {line!r}")
            if current == "vertex":
                count = int(declared)
            elif int(declared) != 0:
                raise InputParseError(path, offset, f"unsupported element {current!r}")
        elif parts[:1] == ["property"] and current == "vertex":
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise InputParseError(path, offset, f"unsupported property declaration {line!r}")
            props.append((parts[2], parts[1]))
        offset += len(raw) + 1
    if count < 0:
        raise InputParseError(path, 0, "no vertex element")
    return fmt, count, props, stop


def read_ply(path: str) -> PlyTable:
    _require(path, "point cloud")
    with open(path, "rb") as handle:
        blob = handle.read()
    fmt, count, props, start = _parse_header(path, blob)
    dtype = np.dtype([(name, "<" + _PLY_TYPES[kind]) for name, kind in props])
    if fmt == "binary_little_endian":
        needed = dtype.itemsize * count
        if len(blob) - start < needed:
            raise InputParseError(path, len(blob), f"vertex data truncated ({len(blob) - start} of {needed} bytes)")
        records = np.frombuffer(blob, dtype=dtype, count=count, offset=start) if count else np.zeros(0, dtype=dtype)
    else:
        lines = blob[start:].decode("ascii").split("\n")
        rows = [line.split() for line in lines if line.strip()][:count]
        if len(rows) != count or any(len(row) != len(props) for row in rows):
            raise InputParseError(path, start, f"expected {count} rows of {len(props)} values")
        records = np.zeros(count, dtype=dtype)
        for i, (name, _) in enumerate(props):
            records[name] = [row[i] for row in rows]
    columns = {name: np.array(records[name]) for name, _ in props}
    return PlyTable(columns=columns, types={name: kind for name, kind in props})


def write_ply(path: str, table: PlyTable, binary: bool = True) -> None:
    names = list(table.columns)
    kinds = {name: table.types.get(name, "float") for name in names}
    n = len(table)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {kinds[name]} {name}" for name in names]
    header.append("end_header")
    dtype = np.dtype([(name, "<" + _PLY_TYPES[kinds[name]]) for name in names])
    records = np.zeros(n, dtype=dtype)
    for name in names:
        records[name] = table.columns[name]
    with open(path, "wb") as handle:
        handle.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            handle.write(records.tobytes())
        else:
            for row in records:
                handle.write((" ".join(_ascii_value(row[name]) for name in names) + "\n").encode("ascii"))


def _ascii_value(value: Any) -> str:
    if np.issubdtype(type(value), np.integer):
        return str(int(value))
    return np.format_float_positional(value, unique=True, trim="-") if np.isfinite(value) else repr(float(value))


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-7, 1.0 - 1e-7)
    return np.log(p / (1.0 - p))


def cloud_to_table(cloud: GaussianCloud, extra: Optional[Mapping[str, np.ndarray]] = None) -> PlyTable:
    """Store opacity as a logit and scales as logs.

    Every column is written as a 32-bit ``float`` property, so a float64 cloud
    comes back from ``load_cloud`` rounded to single precision.
    """

    columns: Dict[str, np.ndarray] = {
        "x": cloud.positions[:, 0],
        "y": cloud.positions[:, 1],
        "z": cloud.positions[:, 2],
        "opacity": _logit(cloud.opacity),
    }
    log_scales = np.log(np.maximum(cloud.scales, 1e-12))
    for i in range(3):
        columns[f"scale_{i}"] = log_scales[:, i]
    for i in range(4):
        columns[f"rot_{i}"] = cloud.rotations[:, i]
    for i in range(cloud.features.shape[1]):
        columns[f"f_dc_{i}"] = cloud.features[:, i]
    for name, value in {**cloud.extra, **(extra or {})}.items():
        columns[name] = np.asarray(value, dtype=np.float64).reshape(len(cloud))
    return PlyTable(columns={k: np.asarray(v, dtype=np.float32) for k, v in columns.items()})


def table_to_cloud(table: PlyTable, path: str = "<memory>") -> GaussianCloud:
    missing = [name for name in _CORE_PROPERTIES if name not in table.columns]
    if missing:
        raise InputParseError(path, 0, f"missing vertex properties {missing}")
    col = {name: np.asarray(value, dtype=np.float64) for name, value in table.columns.items()}
    feature_names = sorted((n for n in col if n.startswith("f_dc_")), key=lambda n: int(n[5:]))
    n = len(table)
    known = set(_CORE_PROPERTIES) | set(feature_names)
    return GaussianCloud(
        positions=np.stack([col["x"], col["y"], col["z"]], axis=1),
        opacity=1.0 / (1.0 + np.exp(-col["opacity"])),
        scales=np.exp(np.stack([col[f"scale_{i}"] for i in range(3)], axis=1)),
        rotations=np.stack([col[f"rot_{i}"] for i in range(4)], axis=1),
        features=np.stack([col[name] for name in feature_names], axis=1) if feature_names else np.zeros((n, 0)),
        extra={name: value for name, value in col.items() if name not in known},
    )


def load_cloud(path: str) -> GaussianCloud:
    return table_to_cloud(read_ply(path), path)


def save_cloud(path: str, cloud: GaussianCloud, extra: Optional[Mapping[str, np.ndarray]] = None, binary: bool = True) -> None:
    write_ply(path, cloud_to_table(cloud, extra), binary=binary)


# ----------------------------------------------------------------------
# Rasters
# ----------------------------------------------------------------------
_RASTER_DTYPES = {"float32": "<f4", "uint8": "u1"}


def write_raster(path: str, values: np.ndarray, dtype: str = "float32") -> None:
    if dtype not in _RASTER_DTYPES:
        raise ValueError(f"raster dtype must be one of {tuple(_RASTER_DTYPES)}")
    values = np.asarray(values)
    channels = 1 if values.ndim == 2 else values.shape[2]
    with open(path, "wb") as handle:
        handle.write(np.ascontiguousarray(values, dtype=_RASTER_DTYPES[dtype]).tobytes())
    with open(path + ".hdr", "w", encoding="utf-8") as handle:
        handle.write(f"height {values.shape[0]}\nwidth {values.shape[1]}\nchannels {channels}\ndtype {dtype}\n")


def read_raster(path: str, role: Optional[str] = None) -> np.ndarray:
    """Raw little-endian raster with a ``.hdr`` sidecar; (H, W) for one channel, else (H, W, C)."""

    _require(path, role)
    sidecar = path + ".hdr"
    _require(sidecar, f"{role} header" if role else "raster header")
    meta: Dict[str, str] = {}
    offset = 0
    with open(sidecar, "r", encoding="utf-8") as handle:
        for line in handle:
            parts = line.split()
            if len(parts) == 2:
                meta[parts[0]] = parts[1]
            elif parts:
                raise InputParseError(sidecar, offset, f"cannot parse {line.strip()!r}")
            offset += len(line.encode("utf-8"))
    try:
        height, width, channels = int(meta["height"]), int(meta["width"]), int(meta.get("channels", 1))
        dtype = _RASTER_DTYPES[meta.get("dtype", "float32")]
    except (KeyError, ValueError) as exc:
        raise InputParseError(sidecar, 0, f"incomplete raster header ({exc})") from None
    with open(path, "rb") as handle:
        blob = handle.read()
    expected = height * width * channels * np.dtype(dtype).itemsize
    if len(blob) != expected:
        raise InputParseError(path, min(len(blob), expected), f"raster is {len(blob)} bytes, expected {expected}")
    values = np.frombuffer(blob, dtype=dtype).reshape(height, width, channels)
    return values[..., 0] if channels == 1 else values


# ----------------------------------------------------------------------
# Parameter document and CSV tables
# ----------------------------------------------------------------------
PARAM_UNITS = {
    "v_in": "m/s",
    "v_tilde_in": "m/s",
    "v_out": "m/s",
    "rho": "kg/m^3",
    "nu": "m^2/s",
    "b": "1",
    "d": "1",
    "g": "m/s^2",
    "dt": "s",
}


def write_params(path: str, params: SimParams, activations: Optional[Mapping[str, Tuple[str, float]]] = None) -> None:
    """``name = value  # unit, activation, scale`` per parameter."""

    lines = []
    for name in PARAM_NAMES:
        value = getattr(params, name)
        text = json.dumps([float(v) for v in value]) if name in VECTOR_PARAMS else repr(float(value))
        activation, scale = (activations or {}).get(name, ("identity", 1.0))
        lines.append(f"{name} = {text}  # {PARAM_UNITS[name]}, {activation}, {scale!r}")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def read_params(path: str) -> SimParams:
    _require(path, "parameter")
    values: Dict[str, Any] = {}
    offset = 0
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            body = line.split("#", 1)[0].strip()
            if body:
                name, sep, raw = body.partition("=")
                name = name.strip()
                if not sep or name not in PARAM_NAMES:
                    raise InputParseError(path, offset, f"cannot parse parameter line {line.strip()!r}")
                try:
                    values[name] = json.loads(raw.strip())
                except json.JSONDecodeError:
                    raise InputParseError(path, offset, f"bad value for {name}") from None
            offset += len(line.encode("utf-8"))
    try:
        return SimParams.from_dict(values)
    except ConfigError as exc:
        raise InputParseError(path, 0, str(exc)) from None


LOSS_COLUMNS = ("iteration", "loss", "best_loss", "rollout_steps")


def write_loss_csv(path: str, losses: Sequence[float], best: Sequence[float], rollout_steps: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for i, (loss, best_loss) in enumerate(zip(losses, best)):
            writer.writerow({"iteration": i, "loss": repr(loss), "best_loss": repr(best_loss), "rollout_steps": rollout_steps})


def write_rows_csv(path: str, fieldnames: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_rows_csv(path: str) -> List[Dict[str, str]]:
    _require(path, "table")
    with open(path, "r", newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


# ----------------------------------------------------------------------
# JSON manifests
# ----------------------------------------------------------------------
def write_json(path: str, payload: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=4, sort_keys=True)


def read_json(path: str, role: Optional[str] = None) -> Dict[str, Any]:
    _require(path, role)
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputParseError(path, exc.pos, exc.msg) from None


__all__ = [
    "LOSS_COLUMNS",
    "PARAM_UNITS",
    "PlyTable",
    "VGRD_HEADER",
    "VolumeGrid",
    "cloud_to_table",
    "load_cloud",
    "read_json",
    "read_params",
    "read_ply",
    "read_raster",
    "read_rows_csv",
    "read_vgrd",
    "save_cloud",
    "table_to_cloud",
    "write_json",
    "write_loss_csv",
    "write_params",
    "write_ply",
    "write_raster",
    "write_rows_csv",
    "write_vgrd",
]
