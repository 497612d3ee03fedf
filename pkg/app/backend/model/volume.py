"""
Volume containers.

Intensity volumes are held as float32 and masks as uint8 so what is saved to a
``.pfda`` file is exactly what comes back.
"""

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

from utils.errors import InvariantError, ShapeError

Spacing = Tuple[float, float, float]


def _check_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise InvariantError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise InvariantError(f"spacing components must be finite and > 0, got {spacing}")
    return spacing


def _check_grid(data: np.ndarray) -> None:
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D grid, got shape {data.shape}")
    if min(data.shape) < 1:
        raise ShapeError(f"every axis needs at least one voxel, got shape {data.shape}")


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid (D, H, W) with (sz, sy, sx) spacing in mm."""

    data: np.ndarray
    spacing: Spacing = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        _check_grid(data)
        if not np.isfinite(data).all():
            raise InvariantError("volume intensities must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other) -> bool:
        return (
            type(other) is type(self)
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary {0, 1} grid aligned to a Volume."""

    data: np.ndarray
    spacing: Spacing = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        raw = np.asarray(self.data)
        _check_grid(raw)
        if raw.dtype != bool and not np.isin(raw, (0, 1)).all():
            raise InvariantError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", np.ascontiguousarray(raw, dtype=np.uint8))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def foreground(self) -> np.ndarray:
        return self.data.astype(bool)

    @property
    def voxel_count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def __eq__(self, other) -> bool:
        return (
            type(other) is type(self)
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


AnyVolume = Union[Volume, MaskVolume]


def check_aligned(v: AnyVolume, m: AnyVolume) -> None:
    if v.shape != m.shape:
        raise ShapeError(f"volume shape {v.shape} does not match mask shape {m.shape}")
    if not np.allclose(v.spacing, m.spacing, rtol=0, atol=1e-9):
        raise ShapeError(f"volume spacing {v.spacing} does not match mask spacing {m.spacing}")
