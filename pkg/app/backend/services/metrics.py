"""
Segmentation metrics in physical units.

Boundary voxels are foreground voxels with at least one background
6-neighbour (outside the grid counts as background). Surface distances are
Euclidean distances in mm between boundary voxel centres. HD, HD95 and ASD
pool both directed distance sets.
"""

import logging
import math
from typing import Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree

from model.models import CaseMetrics, MaskFeatures, OverlapMetrics
from model.volume import MaskVolume, Volume, check_aligned
from utils.errors import InvariantError, ShapeError, SurfaceUndefinedError

logger = logging.getLogger(__name__)

SIX_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def overlap_metrics(pred: MaskVolume, gt: MaskVolume) -> OverlapMetrics:
    """Dice, precision and recall from voxel confusion counts."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p, g = pred.foreground, gt.foreground
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    flags = []

    if tp + fp + fn == 0:
        dice = 1.0
    else:
        dice = 2.0 * tp / (2.0 * tp + fp + fn)
    if tp + fp == 0:
        precision = math.nan
        flags.append("precision_undefined")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = math.nan
        flags.append("recall_undefined")
    else:
        recall = tp / (tp + fn)
    return OverlapMetrics(dice=dice, precision=precision, recall=recall, flags=flags)


def boundary(mask: MaskVolume) -> np.ndarray:
    fg = mask.foreground
    return fg & ~ndimage.binary_erosion(fg, structure=SIX_CONNECTIVITY, border_value=0)


def boundary_points_mm(mask: MaskVolume) -> np.ndarray:
    """(n, 3) physical (z, y, x) coordinates of the boundary voxel centres."""
    return np.argwhere(boundary(mask)).astype(np.float64) * np.asarray(mask.spacing)


def surface_distances(a: MaskVolume, b: MaskVolume) -> Tuple[np.ndarray, np.ndarray]:
    """
    Directed surface distances a->b and b->a in mm.

    Raises:
        SurfaceUndefinedError: if either mask is empty
    """
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-9):
        raise ShapeError(f"mask spacings differ: {a.spacing} vs {b.spacing}")
    if a.voxel_count == 0 or b.voxel_count == 0:
        raise SurfaceUndefinedError("surface distances need two non-empty masks")
    points_a = boundary_points_mm(a)
    points_b = boundary_points_mm(b)
    a_to_b, _ = cKDTree(points_b).query(points_a, k=1)
    b_to_a, _ = cKDTree(points_a).query(points_b, k=1)
    return np.asarray(a_to_b, dtype=np.float64), np.asarray(b_to_a, dtype=np.float64)


def _pooled(a: MaskVolume, b: MaskVolume) -> np.ndarray:
    return np.concatenate(surface_distances(a, b))


def hd(a: MaskVolume, b: MaskVolume) -> float:
    return float(_pooled(a, b).max())


def hd95(a: MaskVolume, b: MaskVolume) -> float:
    return float(np.percentile(_pooled(a, b), 95))


def asd(a: MaskVolume, b: MaskVolume) -> float:
    return float(_pooled(a, b).mean())


def distance_metrics(a: MaskVolume, b: MaskVolume) -> Tuple[float, float, float]:
    """(HD, HD95, ASD) from a single distance computation."""
    pooled = _pooled(a, b)
    return float(pooled.max()), float(np.percentile(pooled, 95)), float(pooled.mean())


def case_metrics(case_id: str, pred: MaskVolume, gt: MaskVolume, site: str = "") -> CaseMetrics:
    """All six metrics for one case; undefined surface metrics become NaN with a flag."""
    overlap = overlap_metrics(pred, gt)
    flags = list(overlap.flags)
    try:
        hd_mm, hd95_mm, asd_mm = distance_metrics(pred, gt)
    except SurfaceUndefinedError:
        hd_mm = hd95_mm = asd_mm = math.nan
        flags.append("surface_undefined")
    return CaseMetrics(
        case_id=case_id,
        site=site,
        dice=overlap.dice,
        precision=overlap.precision,
        recall=overlap.recall,
        hd=hd_mm,
        hd95=hd95_mm,
        asd=asd_mm,
        flags=flags,
    )


def surface_map_points(pred: MaskVolume, gt: MaskVolume) -> pd.DataFrame:
    """Every predicted boundary voxel with its distance to the nearest GT boundary voxel."""
    pred_to_gt, _ = surface_distances(pred, gt)
    points = boundary_points_mm(pred)
    return pd.DataFrame(
        {
            "x_mm": points[:, 2],
            "y_mm": points[:, 1],
            "z_mm": points[:, 0],
            "distance_mm": pred_to_gt,
        }
    )


def exposed_face_area(mask: MaskVolume) -> float:
    """Sum of voxel faces between foreground and background (or grid edge), in mm^2."""
    fg = np.pad(mask.foreground, 1, mode="constant", constant_values=False).astype(np.int8)
    sz, sy, sx = mask.spacing
    face_area = (sy * sx, sz * sx, sz * sy)
    area = 0.0
    for axis in range(3):
        transitions = np.count_nonzero(np.diff(fg, axis=axis))
        area += transitions * face_area[axis]
    return area


def mask_features(v: Volume, m: MaskVolume) -> MaskFeatures:
    """Voxel volume, surface area, sphericity and energy of the masked region."""
    check_aligned(v, m)
    count = m.voxel_count
    if count == 0:
        raise InvariantError("mask features need a non-empty mask")
    voxel_volume = count * float(np.prod(m.spacing))
    surface_area = exposed_face_area(m)
    sphericity = (math.pi ** (1.0 / 3.0)) * (6.0 * voxel_volume) ** (2.0 / 3.0) / surface_area
    energy = float(np.sum(v.data[m.foreground].astype(np.float64) ** 2))
    return MaskFeatures(
        voxel_volume=voxel_volume,
        surface_area=surface_area,
        sphericity=sphericity,
        energy=energy,
    )
