"""Single-frame NIfTI-1 reader/writer.

Only what a voxel-grid QC tool needs: little- or big-endian single files
(``n+1``), the four common scalar datatypes, scl_slope/scl_inter scaling and
pixdim spacing. Orientation fields are returned in the metadata record but are
never used for resampling.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
DT_FLOAT64 = 64

_DTYPES = {
    DT_UINT8: (np.uint8, 8),
    DT_INT16: (np.int16, 16),
    DT_FLOAT32: (np.float32, 32),
    DT_FLOAT64: (np.float64, 64),
}


class NiftiError(ValueError):
    """Raised for malformed or unsupported NIfTI-1 files."""


# (name, struct code) in on-disk order; 348 bytes total
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(code for _, code in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


def _unpack_header(raw: bytes, endian: str) -> dict:
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    header, pos = {}, 0
    for name, code in _FIELDS:
        count = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        if count == 1:
            header[name] = values[pos]
        else:
            header[name] = tuple(values[pos:pos + count])
        pos += count
    return header


def read_header(raw: bytes) -> tuple[dict, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for endian in ("<", ">"):
        (size,) = struct.unpack(endian + "i", raw[:4])
        if size == HEADER_SIZE:
            return _unpack_header(raw, endian), endian
    raise NiftiError("sizeof_hdr is not 348; not a NIfTI-1 file")


def load_nifti(path) -> tuple[Volume, dict]:
    """Read a NIfTI-1 volume.

    Returns the volume (float64 data, slope/intercept applied when the slope is
    nonzero) and the parsed header as a metadata dict.
    """
    raw = Path(path).read_bytes()
    header, endian = read_header(raw)
    magic = header["magic"]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"bad NIfTI-1 magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiError("two-file (.hdr/.img) NIfTI pairs are not supported")
    dim = header["dim"]
    ndim = dim[0]
    if ndim not in (3, 4) or (ndim == 4 and dim[4] != 1):
        raise NiftiError(f"only single-frame 3D volumes are supported (dim={dim})")
    shape = tuple(int(d) for d in dim[1:4])
    if any(s < 1 for s in shape):
        raise NiftiError(f"invalid dimensions {shape}")
    code = header["datatype"]
    if code not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    dtype = np.dtype(_DTYPES[code][0]).newbyteorder(endian)
    offset = int(header["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiError(f"vox_offset {offset} lies inside the header")
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError("file truncated before end of voxel data")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(shape, order="F")
    slope, inter = header["scl_slope"], header["scl_inter"]
    if code in (DT_FLOAT32,) and slope in (0.0, 1.0) and inter == 0.0:
        out = data.astype(np.float32)
    else:
        out = data.astype(np.float64)
        if slope != 0.0 and np.isfinite(slope):
            out = out * slope + inter
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in header["pixdim"][1:4])
    header["endian"] = endian
    return Volume(out, spacing), header


def _encode(text: str, size: int) -> bytes:
    return text.encode("ascii", "replace")[:size].ljust(size, b"\x00")


def save_nifti(vol: Volume, path, descrip: str = "") -> None:
    """Write ``vol`` as little-endian float32 NIfTI-1 with vox_offset 352."""
    shape = vol.shape
    sx, sy, sz = vol.spacing
    values = {
        "sizeof_hdr": HEADER_SIZE,
        "data_type": b"",
        "db_name": b"",
        "extents": 0,
        "session_error": 0,
        "regular": b"r",
        "dim_info": 0,
        "dim": (3, *shape, 1, 1, 1, 1),
        "intent_p1": 0.0,
        "intent_p2": 0.0,
        "intent_p3": 0.0,
        "intent_code": 0,
        "datatype": DT_FLOAT32,
        "bitpix": 32,
        "slice_start": 0,
        "pixdim": (1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0),
        "vox_offset": float(VOX_OFFSET),
        "scl_slope": 1.0,
        "scl_inter": 0.0,
        "slice_end": 0,
        "slice_code": 0,
        "xyzt_units": 2,  # mm
        "cal_max": 0.0,
        "cal_min": 0.0,
        "slice_duration": 0.0,
        "toffset": 0.0,
        "glmax": 0,
        "glmin": 0,
        "descrip": _encode(descrip, 80),
        "aux_file": b"",
        "qform_code": 0,
        "sform_code": 1,
        "quatern_b": 0.0,
        "quatern_c": 0.0,
        "quatern_d": 0.0,
        "qoffset_x": 0.0,
        "qoffset_y": 0.0,
        "qoffset_z": 0.0,
        "srow_x": (sx, 0.0, 0.0, 0.0),
        "srow_y": (0.0, sy, 0.0, 0.0),
        "srow_z": (0.0, 0.0, sz, 0.0),
        "intent_name": b"",
        "magic": b"n+1\x00",
    }
    flat = []
    for name, _ in _FIELDS:
        v = values[name]
        flat.extend(v if isinstance(v, tuple) else (v,))
    header = struct.pack("<" + _FORMAT, *flat)
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))  # empty extension flag
        fh.write(payload)
