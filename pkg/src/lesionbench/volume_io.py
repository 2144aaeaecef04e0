"""Volumetric containers, a NIfTI-1 reader/writer, and the case metadata table.

Arrays are indexed ``[i, j, k]`` with ``i`` along x.  On disk NIfTI stores x
fastest, which is numpy's Fortran order for that indexing.
"""
from __future__ import annotations

import csv
import gzip
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "Geometry",
    "VoxelGrid",
    "LabelMask",
    "CaseMeta",
    "NiftiError",
    "NiftiFormatError",
    "UnsupportedDatatypeError",
    "TruncatedFileError",
    "MetaTableError",
    "ShapeMismatchError",
    "read_nifti",
    "write_nifti",
    "read_nifti_array",
    "write_nifti_array",
    "read_meta_table",
    "write_meta_table",
]

SEXES = ("male", "female", "unknown")
META_COLUMNS = ("case_id", "sex", "age_years", "tsi_months", "cohort")


class NiftiError(ValueError):
    pass


class NiftiFormatError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


class MetaTableError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeMismatchError(ValueError):
    def __init__(self, message, case_id=None):
        self.case_id = case_id
        if case_id is not None:
            message = f"{case_id}: {message}"
        super().__init__(message)


def _frozen(a: np.ndarray) -> np.ndarray:
    view = a.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class Geometry:
    """Voxel lattice description: dims, spacing in mm and the voxel->world affine."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("dims and spacing must have three components")
        if min(dims) < 1:
            raise ValueError(f"dims must be >= 1, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if self.affine is None:
            affine = np.diag([*spacing, 1.0])
        else:
            affine = np.array(self.affine, dtype=np.float64)
            if affine.shape != (4, 4):
                raise ValueError("affine must be 4x4")
            norms = np.linalg.norm(affine[:3, :3], axis=0)
            if not np.allclose(norms, spacing, rtol=0, atol=1e-4):
                raise ValueError(
                    f"affine column norms {norms.tolist()} disagree with spacing {spacing}"
                )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _frozen(affine))

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def same_lattice(self, other: "Geometry") -> bool:
        return self.dims == other.dims and np.allclose(
            self.spacing, other.spacing, rtol=0, atol=1e-6
        )

    def __eq__(self, other):
        if not isinstance(other, Geometry):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.affine, other.affine)
        )

    def __repr__(self):
        return f"Geometry(dims={self.dims}, spacing={self.spacing})"


def _as_geometry(shape, spacing, affine) -> Geometry:
    return Geometry(tuple(shape), tuple(spacing), affine)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Scalar field on a voxel lattice."""

    data: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"grid data must be 3D, got shape {data.shape}")
        if data.shape != self.geometry.dims:
            raise ValueError(
                f"data shape {data.shape} does not match dims {self.geometry.dims}"
            )
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), affine=None) -> "VoxelGrid":
        data = np.asarray(data)
        return cls(data, _as_geometry(data.shape, spacing, affine))

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def affine(self):
        return self.geometry.affine


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Integer label volume, 0 is background.

    ``label_set`` defaults to the labels present; when given, every voxel
    must take a value from it.
    """

    labels: np.ndarray
    geometry: Geometry
    label_set: frozenset = field(default=None)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.dtype == bool:
            labels = labels.astype(np.uint8)
        if labels.ndim != 3 or labels.shape != self.geometry.dims:
            raise ValueError(
                f"label shape {labels.shape} does not match dims {self.geometry.dims}"
            )
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError(f"labels must be integer typed, got {labels.dtype}")
        present = frozenset(int(v) for v in np.unique(labels))
        if present and min(present) < 0:
            raise ValueError("labels must be non-negative")
        if self.label_set is None:
            object.__setattr__(self, "label_set", present)
        else:
            declared = frozenset(int(v) for v in self.label_set)
            if not present <= declared:
                raise ValueError(f"labels {sorted(present - declared)} not in label set")
            object.__setattr__(self, "label_set", declared)
        object.__setattr__(self, "labels", _frozen(labels))

    @classmethod
    def from_array(cls, labels, spacing=(1.0, 1.0, 1.0), affine=None, label_set=None):
        labels = np.asarray(labels)
        return cls(labels, _as_geometry(labels.shape, spacing, affine), label_set)

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def affine(self):
        return self.geometry.affine

    def foreground(self) -> np.ndarray:
        """Binary lesion mask; any nonzero label counts as foreground."""
        return self.labels != 0


# ---------------------------------------------------------------------------
# NIfTI-1

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    fields = []
    for f in _HEADER_FIELDS:
        code = f[1]
        if code[0] in "if":
            code = byteorder + code
        fields.append((f[0], code, *f[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == 348
    return dt


# datatype code -> numpy kind; float64 is accepted in addition to the three
# challenge types so float results can be stored losslessly.
_DATATYPES = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}
_DTYPE_CODES = {np.dtype(v).str[1:]: k for k, v in _DATATYPES.items()}
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"


def _open_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_header(raw: bytes, path) -> tuple[np.void, str]:
    if len(raw) < 348:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, shorter than a NIfTI-1 header")
    for bo in ("<", ">"):
        hdr = np.frombuffer(raw[:348], dtype=_header_dtype(bo))[0]
        if 1 <= hdr["dim"][0] <= 7:
            break
    else:
        raise NiftiFormatError(f"{path}: dim[0] out of range in either byte order")
    if hdr["sizeof_hdr"] == 540:
        raise NiftiFormatError(f"{path}: NIfTI-2 files are not supported")
    magic = bytes(raw[344:348])
    if magic == _MAGIC_PAIR:
        raise NiftiFormatError(f"{path}: .hdr/.img pairs are not supported")
    if magic != _MAGIC_SINGLE:
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    if hdr["sizeof_hdr"] != 348:
        raise NiftiFormatError(f"{path}: sizeof_hdr is {hdr['sizeof_hdr']}, expected 348")
    return hdr, bo


def _quaternion_affine(hdr, spacing) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = math.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    affine = np.eye(4)
    affine[:3, :3] = rot * np.array([spacing[0], spacing[1], spacing[2] * qfac])
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _header_affine(hdr, spacing) -> np.ndarray:
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
        return affine
    if hdr["qform_code"] > 0:
        return _quaternion_affine(hdr, spacing)
    return np.diag([*spacing, 1.0])


def read_nifti_array(path) -> tuple[np.ndarray, Geometry]:
    """Read a NIfTI-1 file of any rank 3..7 and return ``(array, geometry)``.

    The array keeps all non-spatial axes (e.g. a class axis of size C in the
    fourth dimension); trailing singleton axes beyond the third are dropped.
    """
    path = Path(path)
    raw = _open_bytes(path)
    hdr, byteorder = _parse_header(raw, path)
    ndim = int(hdr["dim"][0])
    shape = tuple(int(n) for n in hdr["dim"][1 : ndim + 1])
    if ndim < 3:
        shape = shape + (1,) * (3 - ndim)
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if min(shape) < 1:
        raise NiftiFormatError(f"{path}: non-positive dimension in {shape}")
    code = int(hdr["datatype"])
    if code not in _DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}")
    dtype = np.dtype(byteorder + _DATATYPES[code])

    pixdim = [float(p) for p in hdr["pixdim"][1:4]]
    if not all(p > 0 for p in pixdim):
        raise NiftiFormatError(f"{path}: spacing must be positive, got pixdim {pixdim}")
    spacing = tuple(pixdim)

    nbytes = int(np.prod(shape)) * dtype.itemsize
    offset = int(hdr["vox_offset"])
    if offset < 348:
        offset = 352 if len(raw) >= 352 + nbytes else 348
    if len(raw) < offset + nbytes:
        raise TruncatedFileError(
            f"{path}: header promises {nbytes} data bytes at offset {offset}, "
            f"file has {max(0, len(raw) - offset)}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="), copy=True)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and (slope, inter) != (1.0, 0.0):
        data = data.astype(np.float64) * slope + inter

    affine = _header_affine(hdr, spacing)
    try:
        geometry = Geometry(shape[:3], spacing, affine)
    except ValueError as exc:
        raise NiftiFormatError(f"{path}: {exc}") from exc
    return data, geometry


def read_nifti(path, as_mask: bool = False) -> VoxelGrid | LabelMask:
    """Read a 3D NIfTI-1 volume (``.nii`` or ``.nii.gz``).

    With ``as_mask=True`` an integer-typed file is returned as a LabelMask.
    """
    data, geometry = read_nifti_array(path)
    if data.ndim != 3:
        raise NiftiFormatError(f"{path}: expected a 3D volume, got shape {data.shape}")
    if as_mask:
        if not np.issubdtype(data.dtype, np.integer):
            raise UnsupportedDatatypeError(
                f"{path}: {data.dtype} data cannot be read as a label mask"
            )
        return LabelMask(data, geometry)
    return VoxelGrid(data, geometry)


def _disk_dtype(data: np.ndarray, is_mask: bool) -> np.dtype:
    if data.dtype == bool:
        return np.dtype("u1")
    if not is_mask and data.dtype in (np.uint8, np.int16):
        return data.dtype
    if np.issubdtype(data.dtype, np.integer):
        lo = int(data.min()) if data.size else 0
        hi = int(data.max()) if data.size else 0
        if lo >= 0 and hi <= 255:
            return np.dtype("u1")
        if -32768 <= lo and hi <= 32767:
            return np.dtype("i2")
        raise UnsupportedDatatypeError(
            f"integer range [{lo}, {hi}] does not fit uint8 or int16"
        )
    if is_mask:
        raise UnsupportedDatatypeError("label masks must be integer typed")
    if data.dtype in (np.float16, np.float32):
        return np.dtype("f4")
    if data.dtype == np.float64:
        return np.dtype("f8")
    raise UnsupportedDatatypeError(f"cannot store {data.dtype} in NIfTI-1")


def write_nifti_array(
    data: np.ndarray,
    geometry: Geometry,
    path,
    *,
    is_mask: bool = False,
    byteorder: str = "<",
) -> None:
    """Write an array of rank >= 3 whose first three axes follow ``geometry``."""
    if byteorder not in "<>":
        raise ValueError("byteorder must be '<' or '>'")
    data = np.asarray(data)
    if data.shape[:3] != geometry.dims:
        raise ShapeMismatchError(f"data shape {data.shape} does not match {geometry.dims}")
    disk = _disk_dtype(data, is_mask).newbyteorder(byteorder)
    code = _DTYPE_CODES[disk.str[1:]]

    hdr = np.zeros((), dtype=_header_dtype(byteorder))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = data.ndim
    dim[1 : data.ndim + 1] = data.shape
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = disk.itemsize * 8
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = geometry.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 2
    hdr["srow_x"] = geometry.affine[0]
    hdr["srow_y"] = geometry.affine[1]
    hdr["srow_z"] = geometry.affine[2]
    hdr["magic"] = _MAGIC_SINGLE

    payload = b"".join(
        [
            hdr.tobytes(),
            b"\x00\x00\x00\x00",
            np.asarray(data, dtype=disk).tobytes(order="F"),
        ]
    )
    path = Path(path)
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_nifti(grid: VoxelGrid | LabelMask, path, *, byteorder: str = "<") -> None:
    """Write a grid or mask; masks go to uint8 when every label is <= 255, else int16."""
    if isinstance(grid, LabelMask):
        write_nifti_array(grid.labels, grid.geometry, path, is_mask=True, byteorder=byteorder)
    else:
        write_nifti_array(grid.data, grid.geometry, path, byteorder=byteorder)


# ---------------------------------------------------------------------------
# demographic metadata


@dataclass(frozen=True)
class CaseMeta:
    case_id: str
    sex: str = "unknown"
    age_years: float | None = None
    tsi_months: float | None = None
    cohort: str = ""

    def __post_init__(self):
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        for name in ("age_years", "tsi_months"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be non-negative, got {v}")


def _optional_float(cell: str, column: str, line: int) -> float | None:
    cell = cell.strip()
    if not cell:
        return None
    try:
        return float(cell)
    except ValueError:
        raise MetaTableError(f"cannot parse {column}={cell!r} as a number", line) from None


def read_meta_table(path) -> list[CaseMeta]:
    """Parse ``case_id,sex,age_years,tsi_months,cohort``; empty cells mean missing."""
    metas: list[CaseMeta] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in META_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MetaTableError(f"missing columns {missing}", 1)
        for row in reader:
            line = reader.line_num
            case_id = (row["case_id"] or "").strip()
            if case_id in seen:
                raise MetaTableError(
                    f"duplicate case_id {case_id!r} (first seen on line {seen[case_id]})", line
                )
            sex = (row["sex"] or "").strip().lower() or "unknown"
            try:
                meta = CaseMeta(
                    case_id=case_id,
                    sex=sex,
                    age_years=_optional_float(row["age_years"] or "", "age_years", line),
                    tsi_months=_optional_float(row["tsi_months"] or "", "tsi_months", line),
                    cohort=(row["cohort"] or "").strip(),
                )
            except MetaTableError:
                raise
            except ValueError as exc:
                raise MetaTableError(str(exc), line) from None
            seen[case_id] = line
            metas.append(meta)
    return metas


def write_meta_table(metas: Iterable[CaseMeta], path) -> None:
    def cell(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(META_COLUMNS)
        for m in metas:
            writer.writerow([m.case_id, m.sex, cell(m.age_years), cell(m.tsi_months), m.cohort])


def case_stem(path) -> str:
    """Case identifier of a file: everything before the first dot of its name."""
    return Path(path).name.split(".", 1)[0]


def list_volumes(directory) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for p in sorted(Path(directory).iterdir()):
        if p.is_file() and (p.name.endswith(".nii") or p.name.endswith(".nii.gz")):
            out.setdefault(case_stem(p), p)
    return out


def _check_same_lattice(a: Geometry, b: Geometry, case_id=None) -> None:
    if not a.same_lattice(b):
        raise ShapeMismatchError(
            f"geometry mismatch: {a.dims}/{a.spacing} vs {b.dims}/{b.spacing}", case_id
        )
