"""NNW1 weight files: magic, entry count, per-entry (name, shape, float32 LE values), CRC32 trailer.

An optional header tag (e.g. a policy's input modality) is stored as a leading
zero-size entry whose name starts with ``#``.
"""

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"NNW1"


class WeightFileError(ValueError):
    pass


def _entries(model):
    return list(model.named_params()) + list(model.named_buffers())


TAG_PREFIX = "#"


def save_params(model, tag=None) -> bytes:
    out = [MAGIC]
    entries = _entries(model)
    if tag is not None:
        entries = [(TAG_PREFIX + tag, np.zeros(0, dtype=np.float32))] + entries
    out.append(struct.pack("<I", len(entries)))
    for name, value in entries:
        arr = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def read_entries(data: bytes):
    """Parse an NNW1 blob into an ordered list of (name, float32 array)."""
    if len(data) < 12 or data[:4] != MAGIC:
        raise WeightFileError("not an NNW1 weight file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise WeightFileError("NNW1 checksum mismatch")
    pos = 4
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    out = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out.append((name, arr))
    if pos != len(body):
        raise WeightFileError("trailing bytes in NNW1 body")
    return out


def read_tag(data: bytes):
    entries = read_entries(data)
    if entries and entries[0][0].startswith(TAG_PREFIX):
        return entries[0][0][len(TAG_PREFIX) :]
    return None


def load_params(model, data: bytes, tag=None):
    """Load weights into ``model`` in place; raises naming the first mismatching entry.

    When ``tag`` is given the file must carry exactly that header tag.
    """
    entries = read_entries(data)
    found = None
    if entries and entries[0][0].startswith(TAG_PREFIX):
        found = entries.pop(0)[0][len(TAG_PREFIX) :]
    if tag is not None and found != tag:
        raise WeightFileError(f"weight file tag {found!r} does not match expected {tag!r}")
    expected = _entries(model)
    names = [n for n, _ in expected]
    if [n for n, _ in entries] != names:
        missing = sorted(set(names) ^ {n for n, _ in entries})
        raise WeightFileError(f"architecture mismatch: entries differ ({missing[:5]})")
    for (name, arr), (_, target) in zip(entries, expected):
        tshape = target.data.shape if hasattr(target, "grad") else np.shape(target)
        if tuple(arr.shape) != tuple(tshape):
            raise WeightFileError(f"shape mismatch in layer {name}: file {tuple(arr.shape)} vs model {tuple(tshape)}")
    for (name, arr), (_, target) in zip(entries, expected):
        if hasattr(target, "grad"):
            target.data = arr.astype(target.data.dtype)
            target.zero_grad()
        else:
            model.set_buffer(name, arr.astype(np.asarray(target).dtype))
    return model


def save_file(model, path, tag=None):
    Path(path).write_bytes(save_params(model, tag))


def load_file(model, path, tag=None):
    return load_params(model, Path(path).read_bytes(), tag)
