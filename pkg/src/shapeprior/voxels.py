"""Voxel grids, coordinate normalization, overlap/volume metrics and the
VOXL1 file format.

Linear voxel order is x-fastest everywhere: flat index ``i + Dx*(j + Dy*k)``,
which is ``ravel(order="F")`` of an array indexed ``[i, j, k]``.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensor import ContractError


class Group(enum.IntEnum):
    young = 0
    old_nonsarcopenic = 1
    sarcopenic = 2
    synthetic_normal = 3
    synthetic_anomalous = 4

    @property
    def is_anomalous(self) -> bool:
        return self in (Group.sarcopenic, Group.synthetic_anomalous)


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ContractError(f"dims must be three counts >= 1, got {dims}")
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise ContractError(f"spacing must be three positive values, got {spacing}")


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy grid. ``occupancy`` is a bool array indexed [i, j, k]."""

    occupancy: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    subject_id: str = ""
    group: Group = Group.synthetic_normal

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3:
            raise ContractError("occupancy must be a 3-D array")
        occ = np.array(occ, dtype=bool, copy=True)
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "group", Group(self.group))
        _check_geometry(occ.shape, self.spacing)

    @property
    def dims(self) -> tuple:
        return self.occupancy.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def flat(self) -> np.ndarray:
        return self.occupancy.ravel(order="F")

    @classmethod
    def from_flat(cls, values, dims, **kw) -> "VoxelGrid":
        values = np.asarray(values)
        if values.size != int(np.prod(dims)):
            raise ContractError("flat occupancy length does not match dims")
        return cls(values.reshape(tuple(dims), order="F").astype(bool), **kw)


@dataclass(frozen=True, eq=False)
class ProbGrid:
    """Per-voxel occupancy probabilities in [0, 1], indexed [i, j, k]."""

    probs: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        p = np.array(self.probs, copy=True)
        if p.ndim != 3:
            raise ContractError("probs must be a 3-D array")
        if p.dtype.kind != "f":
            p = p.astype(np.float64)
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise ContractError("probabilities must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        _check_geometry(p.shape, self.spacing)

    @property
    def dims(self) -> tuple:
        return self.probs.shape

    def flat(self) -> np.ndarray:
        return self.probs.ravel(order="F")

    @classmethod
    def from_flat(cls, values, dims, spacing=(1.0, 1.0, 1.0)) -> "ProbGrid":
        values = np.asarray(values)
        return cls(values.reshape(tuple(dims), order="F"), spacing)


def normalize_coords(dims, index) -> tuple:
    """Voxel-center coordinate in [-1, 1]^3: ``-1 + (2*i + 1)/D`` per axis.

    ``dims`` may be a tuple or anything with a ``dims`` attribute.
    """
    dims = getattr(dims, "dims", dims)
    out = []
    for i, d in zip(index, dims):
        if not 0 <= i < d:
            raise ContractError(f"index {tuple(index)} outside dims {tuple(dims)}")
        out.append(-1.0 + (2.0 * i + 1.0) / d)
    return tuple(out)


def grid_coords(dims, dtype=np.float64) -> np.ndarray:
    """All normalized voxel centers as an (M, 3) array in x-fastest order."""
    axes = [(-1.0 + (2.0 * np.arange(d) + 1.0) / d) for d in dims]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel(order="F") for g in (gx, gy, gz)], axis=1).astype(dtype)


def binarize(p: ProbGrid, threshold: float = 0.5, **kw) -> VoxelGrid:
    """Occupied iff probability is strictly greater than ``threshold``."""
    if not 0 < threshold < 1:
        raise ContractError("threshold must lie in (0, 1)")
    return VoxelGrid(p.probs > threshold, p.spacing, **kw)


def dice_score(a: VoxelGrid, b: VoxelGrid) -> float:
    if a.dims != b.dims:
        raise ContractError(f"dice_score dims differ: {a.dims} vs {b.dims}")
    na, nb = a.count, b.count
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.occupancy & b.occupancy))
    return 2.0 * inter / (na + nb)


def volume_cm3(g: VoxelGrid) -> float:
    sx, sy, sz = g.spacing
    return g.count * sx * sy * sz / 1000.0


class VolErr(NamedTuple):
    err_cm3: float
    err_pct: float  # nan when the ground-truth volume is zero


def vol_err(gt: VoxelGrid, pred: VoxelGrid) -> VolErr:
    v_gt, v_pred = volume_cm3(gt), volume_cm3(pred)
    diff = abs(v_gt - v_pred)
    pct = 100.0 * diff / v_gt if v_gt > 0 else math.nan
    return VolErr(diff, pct)


# -- VOXL1 ----------------------------------------------------------------------

VOXL_MAGIC = b"VOXL"
_HEADER = struct.Struct("<4sBB3I3fB")


def write_voxl(path, grid, subject_id=None, group=None) -> None:
    """Write a VoxelGrid (kind 0) or ProbGrid (kind 1, f32) to ``path``."""
    if isinstance(grid, VoxelGrid):
        kind, payload = 0, grid.flat().astype(np.uint8).tobytes()
        subject_id = grid.subject_id if subject_id is None else subject_id
        group = grid.group if group is None else group
    elif isinstance(grid, ProbGrid):
        kind, payload = 1, grid.flat().astype("<f4").tobytes()
    else:
        raise TypeError(f"cannot serialize {type(grid).__name__}")
    group = Group.synthetic_normal if group is None else Group(group)
    sid = (subject_id or "").encode("utf-8")
    header = _HEADER.pack(VOXL_MAGIC, 1, kind, *grid.dims, *grid.spacing, int(group))
    with open(path, "wb") as fh:
        fh.write(header + struct.pack("<I", len(sid)) + sid + payload)


def read_voxl(path):
    """Read a VOXL1 file. Returns a VoxelGrid, or ``(ProbGrid, subject_id, group)``
    for probability payloads."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise ValueError(f"{path}: truncated VOXL header")
    magic, version, kind, dx, dy, dz, sx, sy, sz, group = _HEADER.unpack_from(raw)
    if magic != VOXL_MAGIC or version != 1:
        raise ValueError(f"{path}: not a VOXL1 file")
    off = _HEADER.size
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    sid = raw[off:off + n].decode("utf-8")
    off += n
    dims, m = (dx, dy, dz), dx * dy * dz
    spacing = (float(sx), float(sy), float(sz))
    if kind == 0:
        data = np.frombuffer(raw, dtype=np.uint8, count=m, offset=off)
        if np.any(data > 1):
            raise ValueError(f"{path}: binary payload must be 0/1")
        return VoxelGrid.from_flat(data, dims, spacing=spacing, subject_id=sid, group=Group(group))
    if kind == 1:
        data = np.frombuffer(raw, dtype="<f4", count=m, offset=off).astype(np.float32)
        return ProbGrid.from_flat(data, dims, spacing), sid, Group(group)
    raise ValueError(f"{path}: unknown grid kind {kind}")
