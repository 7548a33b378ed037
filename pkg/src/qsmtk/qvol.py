"""QVOL volume files, orientation manifests and PGM slice export.

A QVOL volume is two files side by side: ``name.qvol`` holds a JSON header
and ``name.raw`` holds the samples as little-endian float32, x fastest.
Six-channel tensor fields are stored channel-major in the order
``chi11, chi12, chi13, chi22, chi23, chi33``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Grid3

UNITS = ("ppm", "radians", "dimensionless")


class QvolError(ValueError):
    """Malformed or inconsistent QVOL header/data pair."""


@dataclass
class Volume:
    """A scalar ``(nx, ny, nz)`` or tensor ``(6, nx, ny, nz)`` volume on a grid."""

    data: np.ndarray
    grid: Grid3
    unit: str = "ppm"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 4 and data.shape[0] != 6 or data.ndim not in (3, 4):
            raise QvolError(f"volume data must be (nx,ny,nz) or (6,nx,ny,nz), got {data.shape}")
        if data.shape[-3:] != self.grid.dims:
            raise QvolError(f"data shape {data.shape} does not match grid {self.grid.dims}")
        if self.unit not in UNITS:
            raise QvolError(f"unknown unit {self.unit!r}")
        self.data = data

    @property
    def channels(self) -> int:
        return 6 if self.data.ndim == 4 else 1


def _data_path(path) -> Path:
    return Path(path).with_suffix(".raw")


def write_qvol(vol: Volume, path) -> None:
    """Write ``vol`` as ``path`` (JSON header) plus ``path`` with ``.raw`` suffix."""
    path = Path(path)
    if not np.all(np.isfinite(vol.data)):
        raise QvolError("refusing to write non-finite samples")
    header = {
        "dims": list(vol.grid.dims),
        "voxel_size_mm": list(vol.grid.voxel_size),
        "dtype": "f32",
        "order": "x-fastest",
        "channels": vol.channels,
        "unit": vol.unit,
        "data_file": _data_path(path).name,
    }
    # x-fastest == Fortran order over (x, y, z); channel stays the slowest axis
    data = np.asarray(vol.data, dtype="<f4")
    if vol.channels == 1:
        raw = data.tobytes(order="F")
    else:
        raw = b"".join(data[c].tobytes(order="F") for c in range(6))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2) + "\n")
    _data_path(path).write_bytes(raw)


def read_qvol(path) -> Volume:
    """Read a QVOL header/data pair; samples come back as float64."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no QVOL header at {path}")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise QvolError(f"{path}: header is not valid JSON ({exc})") from None
    for key in ("dims", "voxel_size_mm", "dtype", "channels"):
        if key not in header:
            raise QvolError(f"{path}: header lacks {key!r}")
    if header["dtype"] != "f32":
        raise QvolError(f"{path}: unknown dtype {header['dtype']!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise QvolError(f"{path}: unsupported order {header['order']!r}")
    channels = int(header["channels"])
    if channels not in (1, 6):
        raise QvolError(f"{path}: channels must be 1 or 6, got {channels}")
    grid = Grid3(tuple(header["dims"]), tuple(header["voxel_size_mm"]))

    data_path = path.parent / header.get("data_file", _data_path(path).name)
    if not data_path.exists():
        raise FileNotFoundError(f"no QVOL data file at {data_path}")
    raw = np.fromfile(data_path, dtype="<f4")
    expected = channels * grid.size
    if raw.size != expected or os.path.getsize(data_path) != 4 * expected:
        raise QvolError(
            f"{data_path}: holds {os.path.getsize(data_path) / 4:g} floats, "
            f"header implies {expected}"
        )
    if not np.all(np.isfinite(raw)):
        raise QvolError(f"{data_path}: contains NaN or Inf")
    data = raw.astype(np.float64).reshape((channels,) + grid.dims[::-1]).transpose(0, 3, 2, 1)
    data = np.ascontiguousarray(data if channels == 6 else data[0])
    return Volume(data, grid, header.get("unit", "ppm"))


# --------------------------------------------------------------------------
# orientation manifests


def read_manifest(path) -> list[dict]:
    """Parse an orientation manifest.

    Each entry is ``{"field_volume_path": ..., "H_sub": [3]}`` or
    ``{"field_volume_path": ..., "rotation_matrix": [9]}`` (row-major).
    Relative volume paths resolve against the manifest's directory. Returns
    dicts with ``path`` and exactly one of ``H_sub`` / ``R`` as arrays.
    """
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise QvolError(f"{path}: manifest must be a JSON list")
    out = []
    for i, entry in enumerate(entries):
        if "field_volume_path" not in entry:
            raise QvolError(f"{path}: entry {i} lacks field_volume_path")
        item = {"path": path.parent / entry["field_volume_path"]}
        if "rotation_matrix" in entry:
            R = np.asarray(entry["rotation_matrix"], dtype=float)
            if R.size != 9:
                raise QvolError(f"{path}: entry {i} rotation_matrix needs 9 values")
            item["R"] = R.reshape(3, 3)
        elif "H_sub" in entry:
            H = np.asarray(entry["H_sub"], dtype=float)
            if H.shape != (3,):
                raise QvolError(f"{path}: entry {i} H_sub needs 3 values")
            item["H_sub"] = H
        else:
            raise QvolError(f"{path}: entry {i} needs H_sub or rotation_matrix")
        out.append(item)
    return out


def write_manifest(entries: list[dict], path) -> None:
    """Write a manifest from dicts with ``field_volume_path`` and ``H_sub`` or ``rotation_matrix``."""
    clean = []
    for e in entries:
        item = {"field_volume_path": str(e["field_volume_path"])}
        if "rotation_matrix" in e:
            item["rotation_matrix"] = [float(v) for v in np.ravel(e["rotation_matrix"])]
        else:
            item["H_sub"] = [float(v) for v in e["H_sub"]]
        clean.append(item)
    Path(path).write_text(json.dumps(clean, indent=2) + "\n")


# --------------------------------------------------------------------------
# slice export


def window_to_uint8(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clip to ``[lo, hi]`` and map linearly to 0..255, rounding half up."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got ({lo}, {hi})")
    scaled = (np.clip(values, lo, hi) - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def export_slice(vol: np.ndarray, axis: int, index: int, window, path) -> np.ndarray:
    """Write one slice of a 3D volume as an 8-bit binary PGM (P5).

    Image columns run along the lower remaining axis and rows along the
    higher one, so an axial (``axis=2``) slice shows x horizontally and y
    vertically. Returns the pixel array ``(rows, cols)``.
    """
    vol = np.asarray(vol)
    if vol.ndim != 3 or axis not in (0, 1, 2):
        raise ValueError("export_slice needs a 3D volume and axis in {0, 1, 2}")
    if not 0 <= index < vol.shape[axis]:
        raise IndexError(f"slice index {index} outside [0, {vol.shape[axis]})")
    lo, hi = window
    pixels = window_to_uint8(np.take(vol, index, axis=axis), lo, hi).T
    rows, cols = pixels.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())
    return pixels


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM written by :func:`export_slice`."""
    blob = Path(path).read_bytes()
    # header is exactly three newline-terminated lines
    end = 0
    for _ in range(3):
        end = blob.index(b"\n", end) + 1
    magic, size, maxval = blob[:end].split(b"\n")[:3]
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    cols, rows = (int(v) for v in size.split())
    return np.frombuffer(blob[end:end + rows * cols], dtype=np.uint8).reshape(rows, cols)
