"""Spatial splitting of feature cuboids into MIL bags, and cell-to-pixel geometry."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .feature_store import FeatureCuboid, Label


class BagLabel(enum.Enum):
    POSITIVE = 1
    NEGATIVE = 0

    @classmethod
    def from_video_label(cls, label: Label) -> "BagLabel":
        return cls.POSITIVE if label is Label.ANOMALOUS else cls.NEGATIVE


@dataclass
class Instance:
    cell_row: int
    cell_col: int
    data: np.ndarray  # (C, T, cell, cell)


@dataclass
class Bag:
    video_id: str
    segment_index: int
    label: BagLabel
    instances: list[Instance]


@dataclass(frozen=True)
class GridGeometry:
    frame_size: int = 224
    feature_spatial: int = 14
    cell_size: int = 2

    def __post_init__(self):
        if min(self.frame_size, self.feature_spatial, self.cell_size) <= 0:
            raise ValueError("geometry sizes must be positive")
        if self.frame_size % self.feature_spatial:
            raise ValueError(f"frame_size {self.frame_size} not divisible by feature_spatial {self.feature_spatial}")
        if self.feature_spatial % self.cell_size:
            raise ValueError(f"feature_spatial {self.feature_spatial} not divisible by cell_size {self.cell_size}")

    @property
    def grid_side(self) -> int:
        return self.feature_spatial // self.cell_size

    @property
    def region_side(self) -> int:
        return self.frame_size // self.feature_spatial * self.cell_size


def _check_divisible(dims, cell_size):
    if cell_size <= 0:
        raise ShapeError(f"cell_size must be positive, got {cell_size}")
    _, _, H, W = dims
    if H % cell_size:
        raise ShapeError(f"height H={H} is not divisible by cell_size={cell_size}")
    if W % cell_size:
        raise ShapeError(f"width W={W} is not divisible by cell_size={cell_size}")


def split_cuboid(cuboid: FeatureCuboid, cell_size: int = 2) -> list[Instance]:
    """Cut the spatial plane into ``cell_size`` squares, row-major. Channel and time axes are kept whole."""
    data = cuboid.data
    _check_divisible(data.shape, cell_size)
    gh, gw = data.shape[2] // cell_size, data.shape[3] // cell_size
    out = []
    for r in range(gh):
        for c in range(gw):
            block = data[:, :, r * cell_size:(r + 1) * cell_size, c * cell_size:(c + 1) * cell_size]
            out.append(Instance(r, c, block.copy()))
    return out


def make_bag(cuboid: FeatureCuboid, label: Label, cell_size: int = 2) -> Bag:
    return Bag(cuboid.video_id, cuboid.segment_index, BagLabel.from_video_label(label),
               split_cuboid(cuboid, cell_size))


def reassemble(instances, dims, cell_size: int, video_id: str = "", segment_index: int = 0) -> FeatureCuboid:
    """Inverse of :func:`split_cuboid`; placement follows each instance's cell tags, not list order."""
    dims = tuple(int(d) for d in dims)
    _check_divisible(dims, cell_size)
    C, T, H, W = dims
    gh, gw = H // cell_size, W // cell_size
    if len(instances) != gh * gw:
        raise ShapeError(f"expected {gh * gw} instances for dims {dims}, got {len(instances)}")
    out = None
    filled = np.zeros((gh, gw), dtype=bool)
    for inst in instances:
        r, c = inst.cell_row, inst.cell_col
        if not (0 <= r < gh and 0 <= c < gw):
            raise ShapeError(f"instance cell ({r}, {c}) outside the {gh}x{gw} grid")
        if filled[r, c]:
            raise ShapeError(f"two instances claim cell ({r}, {c})")
        if inst.data.shape != (C, T, cell_size, cell_size):
            raise ShapeError(f"instance ({r}, {c}) has shape {inst.data.shape}")
        if out is None:
            out = np.empty(dims, dtype=inst.data.dtype)
        filled[r, c] = True
        out[:, :, r * cell_size:(r + 1) * cell_size, c * cell_size:(c + 1) * cell_size] = inst.data
    return FeatureCuboid(video_id, segment_index, out)


def cell_to_pixel_region(cell_row: int, cell_col: int, geom: GridGeometry = GridGeometry()):
    """Half-open pixel box ``(x_min, y_min, x_max, y_max)`` covered by a grid cell."""
    n = geom.grid_side
    if not (0 <= cell_row < n and 0 <= cell_col < n):
        raise ValueError(f"cell ({cell_row}, {cell_col}) outside the {n}x{n} grid")
    side = geom.region_side
    return (cell_col * side, cell_row * side, (cell_col + 1) * side, (cell_row + 1) * side)


def index_to_cell(index: int, grid_side: int = 7) -> tuple[int, int]:
    return divmod(int(index), grid_side)
