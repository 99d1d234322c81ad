"""Binary containers for parameters ("MDTC") and attention traces ("ATTN").

Layout (little-endian): 4-byte magic, u16 version, then entries of
u16 name length, UTF-8 name, u8 rank, u32 dims, float32 payload.
Trace files insert a tag table (u32 count, u16-prefixed UTF-8 tags) and an
i32 CLS index between the version and the entries.
"""

import io
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from app.core.error_handling import CheckpointFormatError, handle_file_errors

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MDTC"
TRACE_MAGIC = b"ATTN"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def _write_string(fh: BinaryIO, text: str) -> None:
    encoded = text.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise CheckpointFormatError(f"name too long for format: {text[:40]}...")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)


def _write_entries(fh: BinaryIO, entries: Iterable[Tuple[str, np.ndarray]]) -> None:
    for name, array in entries:
        array = np.ascontiguousarray(array, dtype="<f4")
        _write_string(fh, name)
        fh.write(struct.pack("<B", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.tobytes(order="C"))


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.payload)

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointFormatError(
                f"{self.source}: truncated at byte {self.offset} (needed {size} more bytes)"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (length,) = self.unpack("<H")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"{self.source}: invalid UTF-8 name at byte {self.offset}") from e

    def header(self, magic: bytes) -> int:
        found = self.take(4)
        if found != magic:
            raise CheckpointFormatError(f"{self.source}: bad magic {found!r}, expected {magic!r}")
        (version,) = self.unpack("<H")
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"{self.source}: unsupported format version {version}")
        return version

    def entries(self) -> List[Tuple[str, np.ndarray]]:
        out = []
        while not self.exhausted:
            name = self.string()
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I") if rank else ()
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)
            out.append((name, data.reshape(dims)))
        return out


@handle_file_errors
def save_checkpoint(path: PathLike, state: Mapping[str, np.ndarray]) -> Path:
    """Write parameters in the order given"""
    path = Path(path)
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<H", FORMAT_VERSION))
    _write_entries(buffer, state.items())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    logger.debug(f"💾 Saved checkpoint with {len(state)} tensors to {path}")
    return path


@handle_file_errors
def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    reader = _Reader(path.read_bytes(), str(path))
    reader.header(CHECKPOINT_MAGIC)
    state: Dict[str, np.ndarray] = {}
    for name, array in reader.entries():
        if name in state:
            raise CheckpointFormatError(f"{path}: duplicate entry {name!r}")
        state[name] = array
    return state


@handle_file_errors
def save_trace(path: PathLike, matrices: Iterable[Tuple[str, np.ndarray]], tags: List[str],
               cls_index: Optional[int]) -> Path:
    path = Path(path)
    buffer = io.BytesIO()
    buffer.write(TRACE_MAGIC)
    buffer.write(struct.pack("<H", FORMAT_VERSION))
    buffer.write(struct.pack("<I", len(tags)))
    for tag in tags:
        _write_string(buffer, tag)
    buffer.write(struct.pack("<i", -1 if cls_index is None else cls_index))
    _write_entries(buffer, matrices)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    return path


@handle_file_errors
def load_trace(path: PathLike) -> Tuple[List[Tuple[str, np.ndarray]], List[str], Optional[int]]:
    path = Path(path)
    reader = _Reader(path.read_bytes(), str(path))
    reader.header(TRACE_MAGIC)
    (count,) = reader.unpack("<I")
    tags = [reader.string() for _ in range(count)]
    (cls_index,) = reader.unpack("<i")
    return reader.entries(), tags, (None if cls_index < 0 else cls_index)
