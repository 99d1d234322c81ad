"""MIMG raster files: "MIMG", u32 width, height, channels, float32 row-major payload (little-endian)."""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from app.core.error_handling import DatasetFormatError, ShapeError, handle_file_errors

MAGIC = b"MIMG"
_HEADER = struct.Struct("<4sIII")


def encode_mimg(image: np.ndarray) -> bytes:
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ShapeError(f"MIMG stores H x W x C rasters, got shape {image.shape}")
    height, width, channels = image.shape
    payload = np.ascontiguousarray(image, dtype="<f4").tobytes(order="C")
    return _HEADER.pack(MAGIC, width, height, channels) + payload


def decode_mimg(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < _HEADER.size:
        raise DatasetFormatError(f"{source}: file too short for an MIMG header")
    magic, width, height, channels = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise DatasetFormatError(f"{source}: bad magic {magic!r}")
    expected = width * height * channels * 4
    actual = len(payload) - _HEADER.size
    if actual != expected:
        raise DatasetFormatError(
            f"{source}: payload size mismatch, header says {width}x{height}x{channels} "
            f"({expected} bytes) but found {actual}"
        )
    data = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    return data.reshape(height, width, channels)


@handle_file_errors
def write_mimg(path: Union[str, Path], image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_mimg(image))
    return path


@handle_file_errors
def read_mimg(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    return decode_mimg(path.read_bytes(), str(path))
