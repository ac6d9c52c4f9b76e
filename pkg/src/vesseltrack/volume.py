"""3D scalar volumes with anisotropic spacing.

Voxel data is held as a ``(nx, ny, nz)`` float64 array indexed ``[x, y, z]``.
On disk the raw payload is always written x-fastest (the first index varies
quickest), which is the same as Fortran order of that array.

Two on-disk formats are understood:

* VVOL (read/write): a ``key = value`` text header plus a detached raw file.
* NRRD (read-only subset): 3 dimensions, raw encoding, attached or detached.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Volume",
    "VolumeFormatError",
    "load_volume",
    "save_volume",
    "world_to_voxel",
    "voxel_to_world",
    "sample_trilinear",
    "sample_many",
    "contains",
]

_DTYPES = {
    "u8": np.dtype("<u1"),
    "i16": np.dtype("<i2"),
    "u16": np.dtype("<u2"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable voxel grid.

    Parameters
    ----------
    data : np.ndarray
        Intensities with shape ``(nx, ny, nz)``.
    spacing : tuple of float
        Voxel size in mm along x, y, z.
    origin : tuple of float
        World position (mm) of voxel ``(0, 0, 0)``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if len(origin) != 3 or not np.all(np.isfinite(origin)):
            raise ValueError(f"origin must be 3 finite values, got {self.origin}")
        data = data.copy() if data is self.data else data
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent_mm(self) -> np.ndarray:
        return (np.array(self.dims) - 1) * np.array(self.spacing)

    def intensity_range(self) -> float:
        return float(self.data.max() - self.data.min())

    def like(self, data) -> "Volume":
        """New volume on the same grid with different voxel values."""
        return Volume(data, self.spacing, self.origin)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel, shape ``(nx, ny, nz, 3)``."""
        axes = [self.origin[k] + self.spacing[k] * np.arange(self.dims[k]) for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def world_to_voxel(v: Volume, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (p - np.asarray(v.origin)) / np.asarray(v.spacing)


def voxel_to_world(v: Volume, ijk) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.float64)
    return ijk * np.asarray(v.spacing) + np.asarray(v.origin)


def contains(v: Volume, p) -> np.ndarray | bool:
    """Whether world point(s) lie inside ``[0, dim-1]`` on every voxel axis."""
    q = world_to_voxel(v, p)
    upper = np.array(v.dims) - 1
    inside = np.all((q >= 0) & (q <= upper), axis=-1)
    return bool(inside) if inside.ndim == 0 else inside


def sample_many(v: Volume, points) -> np.ndarray:
    """Trilinear intensities at world points of shape ``(..., 3)``.

    Points outside the volume give ``nan``.
    """
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    q = world_to_voxel(v, pts.reshape(-1, 3))
    upper = np.array(v.dims) - 1
    inside = np.all((q >= 0) & (q <= upper), axis=1)
    out = np.full(q.shape[0], np.nan)
    if not inside.any():
        return out.reshape(shape)
    q = q[inside]
    # clamp the base corner so points on the far face interpolate with weight 1
    base = np.minimum(np.floor(q).astype(np.intp), np.maximum(upper - 1, 0))
    frac = q - base
    data = v.data
    acc = np.zeros(q.shape[0])
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        ix = np.minimum(base[:, 0] + dx, upper[0])
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            iy = np.minimum(base[:, 1] + dy, upper[1])
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                iz = np.minimum(base[:, 2] + dz, upper[2])
                acc += wx * wy * wz * data[ix, iy, iz]
    out[inside] = acc
    return out.reshape(shape)


def sample_trilinear(v: Volume, p) -> float:
    """Intensity at one world point; ``nan`` marks "outside"."""
    return float(sample_many(v, np.asarray(p, dtype=np.float64)[None, :])[0])


# -- I/O --------------------------------------------------------------------


def _parse_triplet(text: str, key: str, cast=float):
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise VolumeFormatError(f"{key}: expected 3 values, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise VolumeFormatError(f"{key}: {exc}") from None


def _read_payload(raw: bytes, dtype: np.dtype, dims) -> np.ndarray:
    n = int(np.prod(dims))
    if len(raw) % dtype.itemsize:
        raise VolumeFormatError("data length mismatch: payload is not a whole number of voxels")
    if len(raw) // dtype.itemsize != n:
        raise VolumeFormatError(
            f"data length mismatch: header dims {tuple(dims)} need {n} voxels, "
            f"file holds {len(raw) // dtype.itemsize}"
        )
    flat = np.frombuffer(raw, dtype=dtype)
    return flat.reshape(tuple(dims), order="F").astype(np.float64)


def _load_vvol(path: Path) -> Volume:
    header = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        header[key] = value
    for key in ("dims", "spacing_mm", "dtype", "data_file"):
        if key not in header:
            raise VolumeFormatError(f"{path}: missing header key '{key}'")
    dims = _parse_triplet(header["dims"], "dims", int)
    if any(d < 1 for d in dims):
        raise VolumeFormatError(f"dims must be positive, got {dims}")
    spacing = _parse_triplet(header["spacing_mm"], "spacing_mm")
    origin = _parse_triplet(header.get("origin_mm", "0 0 0"), "origin_mm")
    dtype_name = header["dtype"]
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"unsupported scalar type '{dtype_name}'")
    if header.get("byte_order", "little") != "little":
        raise VolumeFormatError("only byte_order = little is supported")
    raw_path = path.parent / header["data_file"]
    data = _read_payload(raw_path.read_bytes(), _DTYPES[dtype_name], dims)
    try:
        return Volume(data, spacing, origin)
    except ValueError as exc:
        raise VolumeFormatError(str(exc)) from None


_NRRD_TYPES = {
    "uchar": "u1", "unsigned char": "u1", "uint8": "u1", "uint8_t": "u1",
    "signed char": "i1", "int8": "i1", "int8_t": "i1",
    "short": "i2", "int16": "i2", "int16_t": "i2", "signed short": "i2",
    "ushort": "u2", "unsigned short": "u2", "uint16": "u2", "uint16_t": "u2",
    "int": "i4", "int32": "i4", "int32_t": "i4", "signed int": "i4",
    "uint": "u4", "unsigned int": "u4", "uint32": "u4", "uint32_t": "u4",
    "float": "f4", "double": "f8",
}


def _load_nrrd(path: Path) -> Volume:
    blob = path.read_bytes()
    if not blob.startswith(b"NRRD"):
        raise VolumeFormatError(f"{path}: not an NRRD file")
    sep = blob.find(b"\n\n")
    header_bytes = blob if sep < 0 else blob[:sep]
    fields = {}
    for line in header_bytes.decode("ascii", errors="replace").splitlines()[1:]:
        if not line or line.startswith("#") or ":=" in line:
            continue
        if ":" not in line:
            raise VolumeFormatError(f"{path}: bad header line {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip().lower()] = value.strip()
    if fields.get("dimension") != "3":
        raise VolumeFormatError("only 3-dimensional NRRD is supported")
    if fields.get("encoding", "raw") != "raw":
        raise VolumeFormatError(f"unsupported NRRD encoding '{fields.get('encoding')}'")
    type_name = fields.get("type", "").lower()
    if type_name not in _NRRD_TYPES:
        raise VolumeFormatError(f"unsupported scalar type '{type_name}'")
    dtype = np.dtype(_NRRD_TYPES[type_name])
    if dtype.itemsize > 1:
        endian = fields.get("endian", "little")
        dtype = dtype.newbyteorder("<" if endian == "little" else ">")
    dims = _parse_triplet(fields.get("sizes", ""), "sizes", int)

    spacing = (1.0, 1.0, 1.0)
    if "spacings" in fields:
        spacing = _parse_triplet(fields["spacings"], "spacings")
    elif "space directions" in fields:
        vecs = []
        for chunk in fields["space directions"].split(")"):
            chunk = chunk.strip().lstrip("(")
            if chunk:
                vecs.append([float(c) for c in chunk.split(",")])
        if len(vecs) != 3:
            raise VolumeFormatError("space directions must list 3 vectors")
        # axis-aligned grids only; the norm of each direction is its spacing
        spacing = tuple(float(np.linalg.norm(vec)) for vec in vecs)
    origin = (0.0, 0.0, 0.0)
    if "space origin" in fields:
        origin = _parse_triplet(fields["space origin"].strip("() "), "space origin")

    data_file = fields.get("data file", fields.get("datafile"))
    if data_file:
        raw = (path.parent / data_file).read_bytes()
    else:
        if sep < 0:
            raise VolumeFormatError(f"{path}: attached NRRD without blank-line separator")
        raw = blob[sep + 2:]
    data = _read_payload(raw, dtype, dims)
    return Volume(data, spacing, origin)


def load_volume(path) -> Volume:
    """Read a ``.vvol`` or ``.nrrd``/``.nhdr`` volume; intensities become float64."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() in (".nrrd", ".nhdr"):
        return _load_nrrd(path)
    return _load_vvol(path)


def save_volume(v: Volume, path, dtype: str = "f64") -> Path:
    """Write ``v`` as VVOL: ``path`` header plus ``<stem>.raw`` next to it."""
    path = Path(path)
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported scalar type '{dtype}'")
    raw_path = path.with_suffix(".raw")
    payload = np.asarray(v.data).astype(_DTYPES[dtype]).tobytes(order="F")
    raw_path.write_bytes(payload)
    fmt = lambda xs: " ".join(repr(float(x)) for x in xs)  # noqa: E731
    lines = [
        "# VVOL 1",
        "dims = " + " ".join(str(n) for n in v.dims),
        "spacing_mm = " + fmt(v.spacing),
        "origin_mm = " + fmt(v.origin),
        f"dtype = {dtype}",
        "byte_order = little",
        f"data_file = {os.path.basename(raw_path)}",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path
