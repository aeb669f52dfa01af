"""NIfTI-1 single-file (``.nii``) and pair (``.hdr``/``.img``) reader and writer.

Optionally gzip-compressed.  Byte order is detected from ``sizeof_hdr``.
Voxels are stored x-fastest (Fortran order).
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODES = {v: k for k, v in DATATYPES.items()}


class NiftiFormatError(ValueError):
    pass


class UnsupportedDatatype(NiftiFormatError):
    def __init__(self, code):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


@dataclass
class Volume:
    extents: tuple
    voxels: np.ndarray
    scaling: tuple = (1.0, 0.0)
    source_path: str = ""
    pixdim: tuple = ()
    header: dict = field(default_factory=dict, repr=False)

    @property
    def ndim(self) -> int:
        return len(self.extents)


def _open(path, mode="rb"):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"header truncated: {len(raw)} bytes")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348 in either byte order")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiFormatError(f"bad magic {magic!r}")

    def get(fmt, off):
        return struct.unpack_from(endian + fmt, raw, off)

    dim = get("8h", 40)
    hdr = dict(
        endian=endian,
        dim=dim,
        intent=get("3f", 56),
        datatype=get("h", 70)[0],
        bitpix=get("h", 72)[0],
        pixdim=get("8f", 76),
        vox_offset=get("f", 108)[0],
        scl_slope=get("f", 112)[0],
        scl_inter=get("f", 116)[0],
        xyzt_units=raw[123],
        descrip=raw[148:228].split(b"\x00")[0].decode("latin-1"),
        qform_code=get("h", 252)[0],
        sform_code=get("h", 254)[0],
        magic=magic.rstrip(b"\x00").decode(),
    )
    if not 1 <= dim[0] <= 7:
        raise NiftiFormatError(f"dim[0] = {dim[0]} outside 1..7")
    return hdr


def read_nifti(path) -> Volume:
    path = os.fspath(path)
    try:
        with _open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise NiftiFormatError(f"cannot read {path}: {exc}") from exc
    hdr = _parse_header(raw)
    code = hdr["datatype"]
    if code not in DATATYPES:
        raise UnsupportedDatatype(code)
    dt = DATATYPES[code].newbyteorder(hdr["endian"])
    extents = tuple(int(d) for d in hdr["dim"][1:hdr["dim"][0] + 1])
    if any(e < 1 for e in extents):
        raise NiftiFormatError(f"non-positive extent in {extents}")
    count = int(np.prod(extents))
    if hdr["magic"] == "n+1":
        payload = raw[int(hdr["vox_offset"]):]
    else:
        img = path.replace(".hdr", ".img")
        with _open(img) as fh:
            payload = fh.read()[int(hdr["vox_offset"]):]
    need = count * dt.itemsize
    if len(payload) < need:
        raise NiftiFormatError(f"payload truncated: need {need} bytes, have {len(payload)}")
    data = np.frombuffer(payload[:need], dtype=dt).reshape(extents, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and not (slope == 1 and inter == 0):
        data = data.astype(np.float64) * slope + inter
    else:
        data = data.astype(dt.newbyteorder("="))
        slope, inter = (slope, inter) if slope != 0 else (1.0, 0.0)
    return Volume(extents, data, (slope, inter), path,
                  tuple(hdr["pixdim"][1:len(extents) + 1]), hdr)


def write_nifti(path, data, slope: float = 1.0, inter: float = 0.0, pixdim=None,
                descrip: str = "", big_endian: bool = False):
    """Write ``data`` (raw stored values) as a single-file NIfTI-1 volume."""
    data = np.asarray(data)
    if data.dtype not in _CODES:
        raise UnsupportedDatatype(str(data.dtype))
    if not 1 <= data.ndim <= 7:
        raise ValueError("NIfTI supports 1 to 7 dimensions")
    e = ">" if big_endian else "<"
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(e + "i", hdr, 0, HEADER_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into(e + "8h", hdr, 40, *dim)
    struct.pack_into(e + "h", hdr, 70, _CODES[data.dtype])
    struct.pack_into(e + "h", hdr, 72, data.dtype.itemsize * 8)
    pd = [1.0] + list(pixdim or [1.0] * data.ndim) + [1.0] * (7 - data.ndim)
    struct.pack_into(e + "8f", hdr, 76, *pd[:8])
    struct.pack_into(e + "f", hdr, 108, 352.0)
    struct.pack_into(e + "f", hdr, 112, slope)
    struct.pack_into(e + "f", hdr, 116, inter)
    hdr[148:148 + min(79, len(descrip))] = descrip.encode("latin-1")[:79]
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(data, dtype=data.dtype.newbyteorder(e)).tobytes(order="F")
    with _open(path, "wb") as fh:
        fh.write(bytes(hdr) + b"\x00" * 4 + body)
