"""Volumetric data types, geometry helpers and NIfTI-1 file I/O.

Every image in the package is carried by a :class:`Volume` (real
intensities) or a :class:`BinaryMask` (boolean voxels).  Both hold a dense
3D array together with the voxel spacing in millimetres and a 4x4
voxel-to-world affine (RAS world).  Instances are immutable: the arrays are
flagged read-only on construction.

Only uncompressed single-file NIfTI-1 (``.nii``) is supported.  Files are
written with a float32 little-endian payload and an sform affine; reading
accepts the common integer and real datatypes and either byte order.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import enum
import json
import os
import struct
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy import ndimage

__all__ = [
    "CHANNELS",
    "Box",
    "BinaryMask",
    "CasePair",
    "DynamicSeries",
    "Geometry",
    "NiftiError",
    "Tracer",
    "Volume",
    "bbox_of_mask",
    "crop",
    "read_case",
    "read_series",
    "read_volume",
    "resample",
    "write_case",
    "write_series",
    "write_volume",
]

#: Fixed MRI channel order of a :class:`CasePair`.
CHANNELS = ("t1", "t1gd", "t2", "flair")


class NiftiError(ValueError):
    """Raised for malformed, unsupported or wrongly-dimensioned NIfTI files."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Geometry(NamedTuple):
    """Grid shape, voxel spacing (mm) and voxel-to-world affine."""

    shape: tuple
    spacing: tuple
    affine: np.ndarray

    @classmethod
    def of(cls, grid: "_Grid") -> "Geometry":
        return cls(grid.shape, grid.spacing, grid.affine)

    def matches(self, other: "Geometry", atol: float = 1e-6) -> bool:
        return (
            tuple(self.shape) == tuple(other.shape)
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.affine, other.affine, atol=atol)
        )


@dataclasses.dataclass(frozen=True, eq=False)
class _Grid:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = None

    _dtype = np.float64

    def __post_init__(self):
        data = np.array(self.data, dtype=self._dtype, copy=True)
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"empty grid {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.affine is None:
            affine = np.diag(spacing + (1.0,))
        else:
            affine = np.array(self.affine, dtype=np.float64, copy=True)
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise ValueError("affine must be a finite 4x4 matrix")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValueError("affine is singular")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _frozen(affine))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry.of(self)

    def with_data(self, data):
        """Copy of this grid with new voxel values and the same geometry."""
        return type(self)(data, self.spacing, self.affine)


@dataclasses.dataclass(frozen=True, eq=False)
class Volume(_Grid):
    """Dense 3D array of real, finite intensities with physical geometry."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite intensities")


@dataclasses.dataclass(frozen=True, eq=False)
class BinaryMask(_Grid):
    """Boolean voxel grid sharing a :class:`Volume`'s geometry."""

    _dtype = bool

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype != bool and not np.all((raw == 0) | (raw == 1)):
            raise ValueError("mask values must be 0 or 1")
        super().__post_init__()

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        return self.with_data(self.data & other.data)

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        return self.with_data(self.data | other.data)

    def __invert__(self) -> "BinaryMask":
        return self.with_data(~self.data)


@dataclasses.dataclass(frozen=True, eq=False)
class DynamicSeries:
    """Frames of a dynamic PET acquisition with mid-frame times in minutes."""

    frames: tuple
    frame_mid_times: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        times = tuple(float(t) for t in self.frame_mid_times)
        if not frames:
            raise ValueError("a dynamic series needs at least one frame")
        if len(times) != len(frames):
            raise ValueError("one mid-frame time per frame is required")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("frame times must be strictly increasing")
        g = frames[0].geometry
        if not all(f.geometry.matches(g) for f in frames[1:]):
            raise ValueError("all frames must share one geometry")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_mid_times", times)


class Tracer(str, enum.Enum):
    FMISO_like = "FMISO_like"
    FDG_like = "FDG_like"


#: Maximum MRI-to-PET acquisition gap accepted for each tracer, in days.
PAIRING_WINDOW_DAYS = {Tracer.FMISO_like: 30, Tracer.FDG_like: 90}


@dataclasses.dataclass(frozen=True, eq=False)
class CasePair:
    """One training sample: four MRI channels, the PET target and masks.

    ``mri`` is ordered as :data:`CHANNELS`.  The tumor mask may be empty
    (FDG-like cases without lesions).
    """

    mri: tuple
    pet: Volume
    brain_mask: BinaryMask
    tumor_mask: BinaryMask
    patient_id: str
    mri_date: _dt.date
    pet_date: _dt.date
    tracer: Tracer = Tracer.FMISO_like
    case_id: str = ""

    def __post_init__(self):
        mri = tuple(self.mri)
        if len(mri) != len(CHANNELS):
            raise ValueError(f"expected {len(CHANNELS)} MRI channels, got {len(mri)}")
        g = self.pet.geometry
        for m in mri + (self.brain_mask, self.tumor_mask):
            if not m.geometry.matches(g):
                raise ValueError("all members of a case must share one geometry")
        if np.any(self.tumor_mask.data & ~self.brain_mask.data):
            raise ValueError("tumor mask must lie inside the brain mask")
        object.__setattr__(self, "mri", mri)
        object.__setattr__(self, "tracer", Tracer(self.tracer))
        if not self.case_id:
            object.__setattr__(self, "case_id", self.patient_id)

    def channel(self, name: str) -> Volume:
        return self.mri[CHANNELS.index(name)]

    @property
    def date_gap_days(self) -> int:
        return abs((self.pet_date - self.mri_date).days)


# --------------------------------------------------------------------------
# NIfTI-1

_HDR = struct.Struct("<i10s18sihcb8h3fhhhh8ffffhcbffffii80s24shh6f4f4f4f16s4s")
assert _HDR.size == 348

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


def _header_bytes(shape: Sequence[int], spacing: Sequence[float], affine: np.ndarray) -> bytes:
    ndim = len(shape)
    dim = [ndim] + list(shape) + [1] * (7 - ndim)
    pixdim = [1.0] + list(spacing) + [1.0] * (7 - len(spacing))
    aff = np.asarray(affine, dtype=np.float64)
    fields = (
        348, b"", b"", 0, 0, b"r", 0,
        *dim,
        0.0, 0.0, 0.0, 0,
        16, 32, 0,
        *pixdim,
        352.0, 1.0, 0.0, 0, b"\x00", 2,
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *aff[0], *aff[1], *aff[2],
        b"", b"n+1\x00",
    )
    return _HDR.pack(*fields) + b"\x00\x00\x00\x00"


def _quaternion_affine(h: dict) -> np.ndarray:
    b, c, d = h["quatern"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if h["pixdim"][0] < 0 else 1.0
    zooms = np.array(h["pixdim"][1:4], dtype=np.float64)
    zooms[2] *= qfac
    out = np.eye(4)
    out[:3, :3] = rot * zooms
    out[:3, 3] = h["qoffset"]
    return out


def _parse_header(raw: bytes, path) -> tuple:
    if raw[:2] == b"\x1f\x8b":
        raise NiftiError(f"{path}: compressed NIfTI is not supported")
    if len(raw) < 348:
        raise NiftiError(f"{path}: file too short for a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise NiftiError(f"{path}: bad sizeof_hdr")
    vals = struct.Struct(endian + _HDR.format[1:]).unpack(raw[:348])
    if vals[-1][:3] != b"n+1":
        raise NiftiError(f"{path}: not a single-file NIfTI-1 (magic {vals[-1]!r})")
    h = {
        "endian": endian,
        "dim": vals[7:15],
        "datatype": vals[19],
        "pixdim": vals[22:30],
        "vox_offset": vals[30],
        "scl": vals[31:33],
        "qform_code": vals[44],
        "sform_code": vals[45],
        "quatern": vals[46:49],
        "qoffset": vals[49:52],
        "srow": np.array(vals[52:64], dtype=np.float64).reshape(3, 4),
    }
    ndim = h["dim"][0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(int(x) for x in h["dim"][1 : ndim + 1])
    if min(shape) < 1:
        raise NiftiError(f"{path}: invalid dimensions {shape}")
    if h["datatype"] not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {h['datatype']}")
    if h["sform_code"] > 0:
        affine = np.vstack([h["srow"], [0.0, 0.0, 0.0, 1.0]])
    elif h["qform_code"] > 0:
        affine = _quaternion_affine(h)
    else:
        affine = np.diag(list(h["pixdim"][1:4]) + [1.0])
    spacing = tuple(abs(float(p)) for p in h["pixdim"][1:4])
    return h, shape, spacing, affine


def _read_payload(path) -> tuple:
    raw = Path(path).read_bytes()
    h, shape, spacing, affine = _parse_header(raw, path)
    dtype = np.dtype(_DTYPES[h["datatype"]]).newbyteorder(h["endian"])
    offset = int(h["vox_offset"])
    n = int(np.prod(shape))
    if len(raw) < offset + n * dtype.itemsize:
        raise NiftiError(f"{path}: truncated payload")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).reshape(shape, order="F")
    data = data.astype(np.float64)
    slope, inter = h["scl"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope if slope != 0.0 else 1.0) + inter
    return data, spacing, affine


def _write_payload(path, data: np.ndarray, spacing, affine) -> None:
    payload = np.asarray(data, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as f:
        f.write(_header_bytes(data.shape, spacing, affine))
        f.write(payload)


def read_volume(path: Union[str, os.PathLike]) -> Volume:
    """Read a 3D NIfTI-1 file.

    A file whose fourth dimension holds more than one frame is rejected;
    load those with :func:`read_series`.
    """
    data, spacing, affine = _read_payload(path)
    if data.ndim > 3:
        if any(s > 1 for s in data.shape[3:]):
            raise NiftiError(f"{path}: 4D payload {data.shape}; use read_series")
        data = data.reshape(data.shape[:3])
    while data.ndim < 3:
        data = data[..., None]
    return Volume(data, spacing, affine)


def write_volume(v: Union[Volume, BinaryMask], path: Union[str, os.PathLike]) -> None:
    """Write a volume (or a mask, as 0/1 reals) to an uncompressed ``.nii``."""
    _write_payload(path, np.asarray(v.data, dtype=np.float64), v.spacing, v.affine)


def read_mask(path: Union[str, os.PathLike]) -> BinaryMask:
    v = read_volume(path)
    return BinaryMask(v.data > 0.5, v.spacing, v.affine)


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name[: -len(".nii")] + ".json" if p.name.endswith(".nii") else p.name + ".json")


def read_series(path: Union[str, os.PathLike]) -> DynamicSeries:
    """Read a 4D NIfTI-1 file plus its ``frame_mid_times_min`` JSON sidecar."""
    data, spacing, affine = _read_payload(path)
    if data.ndim != 4:
        raise NiftiError(f"{path}: expected a 4D payload, got {data.ndim}D")
    side = _sidecar(path)
    if not side.exists():
        raise NiftiError(f"{path}: missing frame-time sidecar {side.name}")
    times = json.loads(side.read_text())["frame_mid_times_min"]
    frames = tuple(Volume(data[..., i], spacing, affine) for i in range(data.shape[3]))
    return DynamicSeries(frames, times)


def write_series(s: DynamicSeries, path: Union[str, os.PathLike]) -> None:
    f0 = s.frames[0]
    data = np.stack([f.data for f in s.frames], axis=-1)
    _write_payload(path, data, f0.spacing, f0.affine)
    _sidecar(path).write_text(json.dumps({"frame_mid_times_min": list(s.frame_mid_times)}))


# --------------------------------------------------------------------------
# geometry ops


def resample(v: _Grid, target: Geometry, mode: str = "trilinear") -> _Grid:
    """Sample ``v`` at the voxel centres of ``target``.

    Target voxels are mapped to world coordinates with the target affine and
    back into ``v``'s voxel space.  Samples falling outside the support of
    ``v`` are 0 (False for masks).  Masks must use ``mode="nearest"``.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    is_mask = isinstance(v, BinaryMask)
    if is_mask and mode != "nearest":
        raise ValueError("masks must be resampled with mode='nearest'")
    shape = tuple(int(s) for s in target.shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"invalid target shape {target.shape}")
    t_aff = np.asarray(target.affine, dtype=np.float64)
    if abs(np.linalg.det(t_aff[:3, :3])) < 1e-12:
        raise ValueError("target affine is singular")
    vox2vox = np.linalg.inv(v.affine) @ t_aff
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1)
    coords = vox2vox[:3, :3] @ grid + vox2vox[:3, 3:4]
    n = np.array(v.shape, dtype=np.float64)[:, None]
    tol = 1e-9
    if mode == "nearest":
        inside = np.all((coords >= -0.5) & (coords < n - 0.5), axis=0)
        order = 0
        coords = np.round(coords)
    else:
        inside = np.all((coords >= -tol) & (coords <= n - 1 + tol), axis=0)
        order = 1
    src = np.asarray(v.data, dtype=np.float64)
    out = np.zeros(grid.shape[1])
    if inside.any():
        out[inside] = ndimage.map_coordinates(src, coords[:, inside], order=order, mode="nearest")
    out = out.reshape(shape)
    if is_mask:
        out = out > 0.5
    return type(v)(out, target.spacing, t_aff)


class Box(NamedTuple):
    """Axis-aligned voxel box with inclusive ``(lo, hi)`` ranges per axis."""

    lo: tuple
    hi: tuple

    @property
    def slices(self) -> tuple:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    @property
    def shape(self) -> tuple:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))


def bbox_of_mask(m: BinaryMask, margin_voxels: int = 0) -> Box:
    """Tightest box around the true voxels, grown by a margin and clipped."""
    if margin_voxels < 0:
        raise ValueError("margin must be non-negative")
    idx = np.nonzero(m.data)
    if idx[0].size == 0:
        raise ValueError("bounding box of an empty mask")
    lo = tuple(max(0, int(i.min()) - margin_voxels) for i in idx)
    hi = tuple(min(n - 1, int(i.max()) + margin_voxels) for i, n in zip(idx, m.shape))
    return Box(lo, hi)


def crop(v: _Grid, box: Box) -> _Grid:
    """Sub-grid inside ``box``; the affine is shifted so world positions hold."""
    for a, b, n in zip(box.lo, box.hi, v.shape):
        if not 0 <= a <= b < n:
            raise ValueError(f"box {box} is outside grid {v.shape}")
    shift = np.eye(4)
    shift[:3, 3] = box.lo
    return type(v)(v.data[box.slices], v.spacing, v.affine @ shift)


# --------------------------------------------------------------------------
# case directories

_CASE_FILES = CHANNELS + ("pet", "brain_mask", "tumor_mask")


def write_case(c: CasePair, directory: Union[str, os.PathLike]) -> Path:
    """Write ``{t1,t1gd,t2,flair,pet,brain_mask,tumor_mask}.nii`` + ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, vol in zip(CHANNELS, c.mri):
        write_volume(vol, d / f"{name}.nii")
    write_volume(c.pet, d / "pet.nii")
    write_volume(c.brain_mask, d / "brain_mask.nii")
    write_volume(c.tumor_mask, d / "tumor_mask.nii")
    meta = {
        "case_id": c.case_id,
        "patient_id": c.patient_id,
        "mri_date": c.mri_date.isoformat(),
        "pet_date": c.pet_date.isoformat(),
        "tracer": c.tracer.value,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def read_meta(directory: Union[str, os.PathLike]) -> dict:
    meta = json.loads((Path(directory) / "meta.json").read_text())
    meta["mri_date"] = _dt.date.fromisoformat(meta["mri_date"])
    meta["pet_date"] = _dt.date.fromisoformat(meta["pet_date"])
    return meta


def read_case(directory: Union[str, os.PathLike]) -> CasePair:
    d = Path(directory)
    meta = read_meta(d)
    mri = tuple(read_volume(d / f"{name}.nii") for name in CHANNELS)
    return CasePair(
        mri=mri,
        pet=read_volume(d / "pet.nii"),
        brain_mask=read_mask(d / "brain_mask.nii"),
        tumor_mask=read_mask(d / "tumor_mask.nii"),
        patient_id=meta["patient_id"],
        mri_date=meta["mri_date"],
        pet_date=meta["pet_date"],
        tracer=meta["tracer"],
        case_id=meta.get("case_id", ""),
    )
