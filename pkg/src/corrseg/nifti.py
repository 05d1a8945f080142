"""Minimal NIfTI-1 reader/writer for 3D volumes.

Supports single-file images (magic "n+1"), optional gzip compression,
little- and big-endian headers, sform/qform affines and the common scalar
datatypes. Data is returned in (x, y, z) index order, matching the on-disk
Fortran layout.
"""

import gzip
import io
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
# Data starts after the header plus the 4-byte extension flag.
VOX_OFFSET = 352

_HEADER_FMT = (
    "i"      # sizeof_hdr
    "10s"    # data_type (unused)
    "18s"    # db_name (unused)
    "i"      # extents
    "h"      # session_error
    "c"      # regular
    "c"      # dim_info
    "8h"     # dim
    "3f"     # intent_p1..p3
    "h"      # intent_code
    "h"      # datatype
    "h"      # bitpix
    "h"      # slice_start
    "8f"     # pixdim
    "f"      # vox_offset
    "f"      # scl_slope
    "f"      # scl_inter
    "h"      # slice_end
    "c"      # slice_code
    "c"      # xyzt_units
    "f"      # cal_max
    "f"      # cal_min
    "f"      # slice_duration
    "f"      # toffset
    "i"      # glmax
    "i"      # glmin
    "80s"    # descrip
    "24s"    # aux_file
    "h"      # qform_code
    "h"      # sform_code
    "6f"     # quatern_b..d, qoffset_x..z
    "4f"     # srow_x
    "4f"     # srow_y
    "4f"     # srow_z
    "16s"    # intent_name
    "4s"     # magic
)

_DTYPE_CODES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}
_CODE_FOR_KIND = {np.dtype(v).str[1:]: k for k, v in _DTYPE_CODES.items()}

# spatial units mm, temporal units sec
_XYZT_UNITS = bytes([2 | 8])


class NiftiFormatError(ValueError):
    """Raised when a file does not parse as NIfTI-1."""


def _is_gzip(data: bytes) -> bool:
    return data[:2] == b"\x1f\x8b"


def read(source) -> tuple[np.ndarray, np.ndarray, dict]:
    """Read a NIfTI-1 file from a path or bytes.

    Returns (data, affine, meta) where data has the file's on-disk dtype and
    3D shape (x, y, z), affine is the 4x4 voxel-to-world transform and meta
    holds spacing and the descrip string.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        raw = path.read_bytes()
    elif isinstance(source, bytes):
        raw = source
    else:
        raw = source.read()
    if _is_gzip(raw):
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiFormatError(f"corrupt gzip payload: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("file too short for a NIfTI-1 header")

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiFormatError("bad sizeof_hdr; not a NIfTI-1 file")
    fields = struct.unpack_from(order + _HEADER_FMT, raw, 0)
    (
        _, _, _, _, _, _, _,
        d0, d1, d2, d3, d4, d5, d6, d7,
        _, _, _, _,
        datatype, _bitpix, _,
        p0, p1, p2, p3, p4, p5, p6, p7,
        vox_offset, scl_slope, scl_inter,
        _, _, _, _, _, _, _, _, _,
        descrip, _,
        qform_code, sform_code,
        qb, qc, qd, qx, qy, qz,
        sx0, sx1, sx2, sx3,
        sy0, sy1, sy2, sy3,
        sz0, sz1, sz2, sz3,
        _, magic,
    ) = fields

    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiFormatError(f"bad magic {magic!r}; not a NIfTI-1 file")
    dims = [d1, d2, d3, d4, d5, d6, d7]
    ndim = d0
    if ndim < 1 or ndim > 7:
        raise NiftiFormatError(f"invalid dim[0]={ndim}")
    shape = [max(1, dims[i]) for i in range(ndim)]
    # trailing singleton dims are tolerated; anything else is not 3D
    while len(shape) > 3 and shape[-1] == 1:
        shape.pop()
    if len(shape) != 3:
        raise NiftiFormatError(f"expected a 3D volume, got shape {tuple(shape)}")

    if datatype not in _DTYPE_CODES:
        raise NiftiFormatError(f"unsupported datatype code {datatype}")
    dtype = _DTYPE_CODES[datatype].newbyteorder(order)
    count = int(np.prod(shape))
    offset = int(vox_offset) if vox_offset else VOX_OFFSET
    end = offset + count * dtype.itemsize
    if end > len(raw):
        raise NiftiFormatError("truncated data section")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(shape, order="F")
    if order == ">":
        data = data.astype(data.dtype.newbyteorder("<"))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data * scl_slope + scl_inter

    if sform_code > 0:
        affine = np.array(
            [
                [sx0, sx1, sx2, sx3],
                [sy0, sy1, sy2, sy3],
                [sz0, sz1, sz2, sz3],
                [0.0, 0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )
    elif qform_code > 0:
        affine = _affine_from_quaternion(qb, qc, qd, (qx, qy, qz), (p1, p2, p3), p0)
    else:
        affine = np.diag([p1 or 1.0, p2 or 1.0, p3 or 1.0, 1.0])

    spacing = tuple(float(abs(p)) or 1.0 for p in (p1, p2, p3))
    meta = {
        "spacing": spacing,
        "descrip": descrip.split(b"\x00", 1)[0].decode("utf-8", "replace"),
    }
    return np.ascontiguousarray(data), affine, meta


def _affine_from_quaternion(b, c, d, offset, spacing, qfac_raw):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(0.0, a2))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if qfac_raw < 0 else 1.0
    scale = np.array([spacing[0] or 1.0, spacing[1] or 1.0, (spacing[2] or 1.0) * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = offset
    return affine


def write(path, data: np.ndarray, affine=None, spacing=None, descrip: str = "") -> None:
    """Write a 3D array as a single-file NIfTI-1 image.

    Gzip-compresses when the path ends in ".gz". The affine is stored as the
    sform; spacing defaults to the affine column norms.
    """
    path = Path(path)
    blob = to_bytes(data, affine, spacing, descrip, compress=path.name.endswith(".gz"))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def to_bytes(data: np.ndarray, affine=None, spacing=None, descrip: str = "", compress=True) -> bytes:
    """Serialize a 3D array to (optionally gzipped) NIfTI-1 bytes."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    if data.dtype.str[1:] not in _CODE_FOR_KIND:
        raise ValueError(f"unsupported dtype {data.dtype}")
    if affine is None:
        affine = np.diag([*(spacing or (1.0, 1.0, 1.0)), 1.0])
    affine = np.asarray(affine, dtype=np.float64)
    if spacing is None:
        spacing = tuple(float(np.linalg.norm(affine[:3, i])) for i in range(3))
    blob = _pack(data, affine, spacing, descrip)
    if not compress:
        return blob
    # fixed mtime so identical volumes produce identical bytes
    buf = io.BytesIO()
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
        gz.write(blob)
    return buf.getvalue()


def _pack(data: np.ndarray, affine: np.ndarray, spacing, descrip: str) -> bytes:
    dim = [3, *data.shape, 1, 1, 1, 1]
    pixdim = [1.0, *(float(s) for s in spacing), 0.0, 0.0, 0.0, 0.0]
    code = _CODE_FOR_KIND[data.dtype.str[1:]]
    header = struct.pack(
        "<" + _HEADER_FMT,
        HEADER_SIZE,
        b"", b"",
        0, 0, b"r", b"\x00",
        *dim,
        0.0, 0.0, 0.0,
        0,
        code,
        data.dtype.itemsize * 8,
        0,
        *pixdim,
        float(VOX_OFFSET),
        1.0, 0.0,
        0, b"\x00", _XYZT_UNITS,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        descrip.encode("utf-8")[:79],
        b"",
        0, 1,
        0.0, 0.0, 0.0,
        float(affine[0, 3]), float(affine[1, 3]), float(affine[2, 3]),
        *(float(v) for v in affine[0]),
        *(float(v) for v in affine[1]),
        *(float(v) for v in affine[2]),
        b"",
        b"n+1\x00",
    )
    assert len(header) == HEADER_SIZE
    return header + b"\x00" * 4 + np.asfortranarray(data).tobytes(order="F")
