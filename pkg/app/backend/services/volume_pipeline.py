"""
Volume pipeline: ROI cropping, cube standardization, the ``.pfda`` container,
and the synthetic two-site femur phantom used in place of clinical QCT.

Dataset layout on disk::

    <root>/manifest.csv                   case_id, site, split
    <root>/<site>/<case_id>/volume.pfda
    <root>/<site>/<case_id>/mask.pfda
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial.transform import Rotation

from model.models import CropBox, PhantomSpec, SiteParams
from model.volume import AnyVolume, MaskVolume, Volume, check_aligned
from utils.enum import Split, VolumeDtype
from utils.errors import BoundsError, ConfigurationError, InvariantError, VolumeFormatError

logger = logging.getLogger(__name__)

MAGIC = b"PFDA"
FORMAT_VERSION = 1
# magic, version u32, dtype u8, D/H/W u32, spacing f64 x3
HEADER = struct.Struct("<4sIB3I3d")

AXES = ("z", "y", "x")
MIN_PHANTOM_SIDE = 16

BACKGROUND_LEVEL = 40.0
TRABECULAR_LEVEL = 300.0
CORTICAL_LEVEL = 800.0
TEXTURE_STRENGTH = 0.3

MANIFEST_COLUMNS = ["case_id", "site", "split"]


def crop_roi(v: Volume, m: MaskVolume, box: CropBox) -> Tuple[Volume, MaskVolume]:
    """Copy the voxels of ``box`` out of an aligned volume/mask pair."""
    check_aligned(v, m)
    for axis, origin, size, extent in zip(AXES, box.origin, box.size, v.shape):
        if origin + size > extent:
            raise BoundsError(
                axis, f"origin {origin} + size {size} exceeds volume extent {extent}"
            )
    region = tuple(slice(o, o + s) for o, s in zip(box.origin, box.size))
    return (
        Volume(v.data[region].copy(), v.spacing),
        MaskVolume(m.data[region].copy(), m.spacing),
    )


def _fit_axis(data: np.ndarray, axis: int, side: int) -> np.ndarray:
    n = data.shape[axis]
    if n < side:
        before = (side - n) // 2
        pad = [(0, 0)] * data.ndim
        pad[axis] = (before, side - n - before)
        return np.pad(data, pad, mode="constant", constant_values=0)
    if n > side:
        start = (n - side) // 2
        index = [slice(None)] * data.ndim
        index[axis] = slice(start, start + side)
        return data[tuple(index)]
    return data


def standardize_cube(v: AnyVolume, side: int) -> AnyVolume:
    """
    Zero-pad or center-crop every axis to ``side`` voxels.

    An odd pad puts the extra zero voxel on the trailing side; an odd excess
    removes the extra voxel from the trailing side.
    """
    if side < 1:
        raise ConfigurationError(f"cube side must be >= 1, got {side}", field="side")
    data = v.data
    for axis in range(3):
        data = _fit_axis(data, axis, side)
    return type(v)(np.ascontiguousarray(data), v.spacing)


def save_volume(v: AnyVolume, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    code = VolumeDtype.UINT8 if isinstance(v, MaskVolume) else VolumeDtype.FLOAT32
    payload_dtype = "<u1" if code == VolumeDtype.UINT8 else "<f4"
    header = HEADER.pack(MAGIC, FORMAT_VERSION, int(code), *v.shape, *v.spacing)
    with open(path, "wb") as file:
        file.write(header)
        file.write(np.ascontiguousarray(v.data, dtype=payload_dtype).tobytes(order="C"))
    return path


def load_volume(path: Union[str, Path]) -> AnyVolume:
    """
    Read a ``.pfda`` file.

    Returns a Volume for float32 payloads and a MaskVolume for uint8 payloads.

    Raises:
        VolumeFormatError: bad magic/version/dtype code or payload length mismatch
        InvariantError: non-positive spacing, non-finite intensities, non-binary mask
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise VolumeFormatError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, code, d, h, w, sz, sy, sx = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    try:
        dtype_code = VolumeDtype(code)
    except ValueError as err:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}") from err
    if min(d, h, w) < 1:
        raise InvariantError(f"{path}: shape ({d}, {h}, {w}) has an empty axis")
    if not all(np.isfinite(s) and s > 0 for s in (sz, sy, sx)):
        raise InvariantError(f"{path}: spacing ({sz}, {sy}, {sx}) must be finite and > 0")

    payload_dtype = np.dtype("<u1" if dtype_code == VolumeDtype.UINT8 else "<f4")
    expected = d * h * w * payload_dtype.itemsize
    actual = len(blob) - HEADER.size
    if actual != expected:
        raise VolumeFormatError(
            f"{path}: payload length {actual} bytes does not match shape "
            f"({d}, {h}, {w}) which needs {expected} bytes"
        )
    data = np.frombuffer(blob, dtype=payload_dtype, offset=HEADER.size).reshape(d, h, w)
    if dtype_code == VolumeDtype.UINT8:
        return MaskVolume(data.copy(), (sz, sy, sx))
    return Volume(data.astype(np.float32), (sz, sy, sx))


def zscore_volume(v: Volume) -> Volume:
    data = v.data.astype(np.float64)
    std = data.std()
    centered = data - data.mean()
    return Volume(centered / std if std > 0 else centered, v.spacing)


def _phantom_mask(rng: np.random.Generator, side: int) -> np.ndarray:
    # Normalized coordinates in [-1, 1], voxel centers
    axis = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    z, y, x = np.meshgrid(axis, axis, axis, indexing="ij")
    points = np.stack([z, y, x], axis=-1)

    head_center = np.array(
        [rng.uniform(0.3, 0.4), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)]
    )
    semi_axes = rng.uniform(0.38, 0.48, size=3)
    # normalized Gaussian quaternion = uniformly random orientation
    head_pose = Rotation.from_quat(rng.standard_normal(4))
    local = head_pose.inv().apply((points - head_center).reshape(-1, 3)).reshape(points.shape)
    head = ((local / semi_axes) ** 2).sum(axis=-1) <= 1.0

    # Shaft runs from the head center towards -z, tilted by at most 15 degrees
    tilt = np.deg2rad(rng.uniform(0.0, 15.0))
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    shaft_dir = np.array(
        [-np.cos(tilt), np.sin(tilt) * np.sin(azimuth), np.sin(tilt) * np.cos(azimuth)]
    )
    shaft_radius = rng.uniform(0.17, 0.23)
    shaft_length = rng.uniform(1.0, 1.3)
    rel = points - head_center
    along = rel @ shaft_dir
    radial = np.linalg.norm(rel - along[..., None] * shaft_dir, axis=-1)
    shaft = (along >= 0.0) & (along <= shaft_length) & (radial <= shaft_radius)

    # Cap: flatten the head on the side facing away from the shaft
    cap_limit = 0.8 * semi_axes.min()
    head &= (rel @ -shaft_dir) <= cap_limit

    return head | shaft


def synth_phantom(seed: int, site: SiteParams, side: int) -> Tuple[Volume, MaskVolume]:
    """
    Generate a femur-like phantom and its mask.

    Geometry and texture depend only on ``seed``, so two sites given the same
    seed share the mask exactly; ``site`` changes intensities only.
    """
    if side < MIN_PHANTOM_SIDE:
        raise ConfigurationError(
            f"phantom side must be >= {MIN_PHANTOM_SIDE}, got {side}", field="side"
        )
    geometry_rng = np.random.default_rng([seed, 0])
    texture_rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])

    mask = _phantom_mask(geometry_rng, side)

    texture = ndimage.gaussian_filter(texture_rng.standard_normal((side,) * 3), sigma=1.5)
    texture /= texture.std() + 1e-12
    shell = mask & ~ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1))

    image = np.full((side,) * 3, BACKGROUND_LEVEL, dtype=np.float64)
    image[mask] = TRABECULAR_LEVEL * (1.0 + TEXTURE_STRENGTH * texture[mask])
    image[shell] = CORTICAL_LEVEL

    if site.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=site.blur_sigma)
    image = image * site.intensity_gain + site.intensity_offset
    if site.noise_sigma > 0:
        image = image + site.noise_sigma * noise_rng.standard_normal(image.shape)

    return Volume(image), MaskVolume(mask)


@dataclass
class CaseRecord:
    case_id: str
    site: str
    split: str
    volume: Volume
    mask: Optional[MaskVolume]


def case_dir(root: Union[str, Path], site: str, case_id: str) -> Path:
    return Path(root) / site / case_id


def generate_phantom_dataset(
    root: Union[str, Path],
    spec: PhantomSpec,
    site_names: Tuple[str, str] = ("source", "target"),
) -> pd.DataFrame:
    """
    Write a two-site phantom dataset in the standard layout.

    Case seeds differ between sites, so the two sites hold different anatomy
    as well as different intensity transforms.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    site_params: Dict[str, SiteParams] = {
        site_names[0]: spec.source_site,
        site_names[1]: spec.target_site,
    }
    rows = []
    for site_index, (site, params) in enumerate(site_params.items()):
        splits = [Split.TRAIN] * spec.n_train + [Split.VAL] * spec.n_val
        for i, split in enumerate(splits):
            case_id = f"case_{i:04d}"
            seed = spec.seed * 1_000_003 + site_index * 100_000 + i
            volume, mask = synth_phantom(seed, params, spec.side)
            target = case_dir(root, site, case_id)
            save_volume(volume, target / "volume.pfda")
            save_volume(mask, target / "mask.pfda")
            rows.append({"case_id": case_id, "site": site, "split": split.value})
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    manifest.to_csv(root / "manifest.csv", index=False)
    logger.info(
        f"✅ Generated phantom dataset at {root}: "
        f"{spec.n_train}+{spec.n_val} cases per site, side {spec.side}"
    )
    return manifest


def load_manifest(root: Union[str, Path]) -> pd.DataFrame:
    path = Path(root) / "manifest.csv"
    manifest = pd.read_csv(path, dtype=str)
    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise ConfigurationError(f"{path} lacks columns {missing}", field="data_root")
    return manifest


def load_case(root: Union[str, Path], site: str, case_id: str, split: str = "") -> CaseRecord:
    folder = case_dir(root, site, case_id)
    volume = load_volume(folder / "volume.pfda")
    mask_path = folder / "mask.pfda"
    mask = load_volume(mask_path) if mask_path.exists() else None
    if not isinstance(volume, Volume):
        raise InvariantError(f"{folder / 'volume.pfda'} holds a mask, expected an intensity volume")
    if mask is not None and not isinstance(mask, MaskVolume):
        raise InvariantError(f"{mask_path} holds an intensity volume, expected a mask")
    return CaseRecord(case_id=case_id, site=site, split=split, volume=volume, mask=mask)


def load_cases(root: Union[str, Path], site: str, split: str) -> List[CaseRecord]:
    manifest = load_manifest(root)
    selected = manifest[(manifest["site"] == site) & (manifest["split"] == split)]
    return [load_case(root, row.site, row.case_id, row.split) for row in selected.itertuples()]
