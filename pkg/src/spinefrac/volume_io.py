"""Volumes with physical-space metadata: NIfTI I/O, isotropic resampling and
intensity normalization.

Array axes follow a fixed convention (RAS-like):

* axis 0 (x): left-right, the normal of the sagittal plane
* axis 1 (y): posterior-anterior
* axis 2 (z): inferior-superior, the longitudinal (head-foot) axis
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np
from scipy import ndimage

SAGITTAL_AXIS = 0
LONGITUDINAL_AXIS = 2
AXIS_CONVENTION = ("left-right", "posterior-anterior", "inferior-superior")

CLASS_NAMES = ("background", "normal", "fracture")

# NIfTI "comment" extension code; carries exact float64 geometry
_GEOMETRY_ECODE = 6
_GEOMETRY_TAG = "spinefrac-geometry"


class VolumeFormatError(ValueError):
    """A volume file lacks required metadata or has an unexpected layout."""


class DegenerateInputError(ValueError):
    """Input for which the requested operation is undefined (e.g. zero variance)."""


@dataclass
class Volume:
    """A 3D scalar grid placed in physical space (mm).

    Voxel ``(i, j, k)`` sits at ``origin + (i, j, k) * spacing``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_convention: tuple[str, str, str] = field(default=AXIS_CONVENTION, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("spacing and origin need three components")
        if not all(s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def extent(self) -> np.ndarray:
        """Physical size (mm) covered by the voxel grid along each axis."""
        return np.asarray(self.shape) * np.asarray(self.spacing)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.origin)

    def world_to_index(self, point) -> np.ndarray:
        """Continuous voxel coordinates of a physical point."""
        return (np.asarray(point, float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def index_to_world(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, float) * np.asarray(self.spacing)

    def nearest_index(self, point) -> tuple[int, int, int]:
        return tuple(int(i) for i in np.floor(self.world_to_index(point) + 0.5))

    def contains_point(self, point) -> bool:
        """True when the voxel nearest to ``point`` lies inside the grid."""
        idx = self.nearest_index(point)
        return all(0 <= i < n for i, n in zip(idx, self.shape))

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical positions of the first and last voxel centers."""
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.shape) - 1) * np.asarray(self.spacing)
        return lo, hi


@dataclass(frozen=True)
class VolumeStats:
    mean: float
    std: float
    voxel_count: int


def volume_stats(vol: Volume) -> VolumeStats:
    data = vol.data.astype(np.float64, copy=False)
    return VolumeStats(float(data.mean()), float(data.std()), int(data.size))


def _affine(spacing, origin) -> np.ndarray:
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = origin
    return affine


def _geometry_extension(spacing, origin) -> nib.nifti1.Nifti1Extension:
    payload = {"tag": _GEOMETRY_TAG, "spacing": list(spacing), "origin": list(origin)}
    return nib.nifti1.Nifti1Extension(_GEOMETRY_ECODE, json.dumps(payload).encode())


def _read_geometry(img, path) -> tuple[tuple, tuple]:
    for ext in img.header.extensions:
        if ext.get_code() != _GEOMETRY_ECODE:
            continue
        try:
            payload = json.loads(ext.get_content().decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            continue
        if isinstance(payload, dict) and payload.get("tag") == _GEOMETRY_TAG:
            return tuple(payload["spacing"]), tuple(payload["origin"])
    # foreign file: fall back to the (float32) header fields, read unrepaired
    # because nibabel silently replaces zero spacing by 1
    with open(path, "rb") as fh:
        raw = type(img.header).from_fileobj(fh, check=False)
    zooms = tuple(float(z) for z in raw["pixdim"][1:4])
    if len(zooms) < 3 or not all(z > 0 for z in zooms):
        raise VolumeFormatError(f"missing or invalid voxel spacing in header: {zooms}")
    affine = img.affine
    if affine is None:
        raise VolumeFormatError("missing affine")
    return tuple(float(z) for z in zooms), tuple(float(o) for o in affine[:3, 3])


def _save_array(data: np.ndarray, spacing, origin, path) -> None:
    img = nib.Nifti1Image(data, _affine(spacing, origin))
    img.header.set_data_dtype(data.dtype)
    img.header.set_xyzt_units("mm")
    img.header.extensions.append(_geometry_extension(spacing, origin))
    nib.save(img, str(path))


def _load_array(path) -> tuple[np.ndarray, tuple, tuple]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        img = nib.load(str(path))
        geometry = _read_geometry(img, path)
        data = np.asarray(img.dataobj)
    except VolumeFormatError:
        raise
    except Exception as exc:  # nibabel raises a mix of types on corrupt input
        raise OSError(f"cannot read volume {path}: {exc}") from exc
    return data, *geometry


def save_volume(vol: Volume, path) -> None:
    """Write a volume as NIfTI; spacing and origin round-trip exactly."""
    _save_array(np.ascontiguousarray(vol.data), vol.spacing, vol.origin, path)


def load_volume(path) -> Volume:
    data, spacing, origin = _load_array(path)
    if data.ndim != 3:
        raise VolumeFormatError(f"{path}: expected a 3D volume, got shape {data.shape}")
    return Volume(data, spacing, origin)


def resampled_shape(shape, spacing, target: float) -> tuple[int, int, int]:
    """Grid dims after resampling: ``round(dim * spacing / target)`` per axis."""
    if target <= 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    return tuple(
        max(1, int(np.floor(n * s / target + 0.5))) for n, s in zip(shape, spacing)
    )


def resample_isotropic(vol: Volume, target: float = 1.0, mode: str = "trilinear") -> Volume:
    """Resample onto an isotropic grid anchored at the input origin.

    ``mode="nearest"`` must be used for label volumes. Samples falling outside
    the input grid are clamped to the edge voxel.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    out_shape = resampled_shape(vol.shape, vol.spacing, target)
    scale = [target / s for s in vol.spacing]
    if out_shape == vol.shape and all(s == 1.0 for s in scale):
        return Volume(vol.data.copy(), (float(target),) * 3, vol.origin)
    order = 1 if mode == "trilinear" else 0
    data = vol.data
    out_dtype = data.dtype if mode == "nearest" else np.result_type(data.dtype, np.float32)
    out = ndimage.affine_transform(
        data.astype(out_dtype, copy=False),
        np.diag(scale),
        offset=0.0,
        output_shape=out_shape,
        order=order,
        mode="nearest",
        prefilter=False,
    )
    return Volume(out, (float(target),) * 3, vol.origin)


def normalize(vol: Volume) -> Volume:
    """Zero mean, unit standard deviation over all voxels."""
    if vol.data.size < 2:
        raise DegenerateInputError("normalization needs at least two voxels")
    data = vol.data.astype(np.float64)
    mean = data.mean()
    std = data.std()
    if not std > 0:
        raise DegenerateInputError("cannot normalize a constant volume (std = 0)")
    return vol.with_data((data - mean) / std)


def preprocess(vol: Volume, target: float = 1.0) -> Volume:
    """Resample to ``target`` mm isotropic, then normalize."""
    return normalize(resample_isotropic(vol, target, "trilinear"))


def save_probability_map(probs: np.ndarray, spacing, origin, path) -> None:
    """Write a ``(X, Y, Z, 3)`` probability map, one channel per class in
    ``CLASS_NAMES`` order."""
    probs = np.ascontiguousarray(probs)
    if probs.ndim != 4 or probs.shape[-1] != len(CLASS_NAMES):
        raise ValueError(f"expected (X, Y, Z, {len(CLASS_NAMES)}) probabilities, got {probs.shape}")
    _save_array(probs, spacing, origin, path)


def load_probability_map(path) -> tuple[np.ndarray, tuple, tuple]:
    data, spacing, origin = _load_array(path)
    if data.ndim != 4 or data.shape[-1] != len(CLASS_NAMES):
        raise VolumeFormatError(f"{path}: not a {len(CLASS_NAMES)}-class probability map")
    return data, spacing, origin
