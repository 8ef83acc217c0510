"""Bit-exact model files.

Layout (all integers little-endian)::

    "FSTN"                      magic, 4 bytes
    u32   format version
    u64   architecture fingerprint
    u32   tensor count
    per tensor:
        u16   name length, then the UTF-8 name
        u8    rank, then one u32 per extent
        f32   payload, row-major
    u32   CRC-32 of every byte between the magic and the trailer
"""

import struct
import zlib

import numpy as np

from .training import AdamState

MAGIC = b"FSTN"
VERSION = 1
_HEADER = struct.Struct("<IQI")


class ModelFileError(ValueError):
    pass


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class FingerprintMismatchError(ModelFileError):
    pass


class MalformedFileError(ModelFileError):
    """Extents, names or payload sizes are inconsistent."""


def encode_tensors(tensors, fingerprint):
    """Serialize an ordered name -> array mapping."""
    body = bytearray(_HEADER.pack(VERSION, fingerprint, len(tensors)))
    for name, t in tensors.items():
        t = np.asarray(t)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"refusing to save non-finite tensor {name}")
        raw_name = name.encode("utf-8")
        body += struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape)
        body += np.ascontiguousarray(t, dtype="<f4").tobytes()
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_tensors(data, offset=0):
    """Parse one model file starting at ``offset``.

    Returns ``(fingerprint, tensors, end_offset)``. Raises the specific
    ``ModelFileError`` subclass for each kind of damage.
    """
    view = memoryview(data)

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends at byte {len(view)}, needed {pos + n}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    pos = offset
    if bytes(view[pos : pos + 4]) != MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    pos += 4
    body_start = pos
    version, fingerprint, count = _HEADER.unpack(take(_HEADER.size))
    if version != VERSION:
        raise VersionMismatchError(f"file format version {version}, this reader handles {VERSION}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedFileError("tensor name is not UTF-8") from e
        if name in tensors:
            raise MalformedFileError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        if any(s == 0 for s in shape):
            raise MalformedFileError(f"{name}: zero extent in shape {shape}")
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    body_end = pos
    (stored_crc,) = struct.unpack("<I", take(4))
    if zlib.crc32(view[body_start:body_end]) != stored_crc:
        raise ChecksumError("CRC-32 mismatch; file is corrupted")
    return fingerprint, tensors, pos


def save_model(model, sink):
    """Write ``model`` to a path or binary file object; returns bytes written."""
    data = encode_tensors(model.state_dict(), model.fingerprint())
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as f:
            f.write(data)
    return len(data)


def _read(source):
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as f:
        return f.read()


def _check_fingerprint(found, spec):
    if found != spec.fingerprint():
        raise FingerprintMismatchError(
            f"file was saved from a different architecture (fingerprint {found:#018x}, "
            f"expected {spec.fingerprint():#018x})"
        )


def _into_model(tensors, spec):
    from .network import build_model

    model = build_model(spec)
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as e:
        raise MalformedFileError(str(e)) from e
    return model


def load_model(source, spec):
    """Read a model file saved from ``spec`` (bytes, path or file object)."""
    data = _read(source)
    fingerprint, tensors, end = decode_tensors(data)
    if end != len(data):
        raise MalformedFileError(f"{len(data) - end} unexpected bytes after the trailer")
    _check_fingerprint(fingerprint, spec)
    return _into_model(tensors, spec)


def save_checkpoint(model, adam_state, sink):
    """Model file followed by a second model file holding the Adam moments.

    The moments file stores ``t`` as a rank-1 tensor named ``adam.t``.
    """
    moments = {"adam.t": np.array([adam_state.t], np.float32)}
    for name, _ in model.named_parameters():
        moments[f"adam.m.{name}"] = adam_state.m[name]
        moments[f"adam.v.{name}"] = adam_state.v[name]
    data = encode_tensors(model.state_dict(), model.fingerprint()) + encode_tensors(moments, model.fingerprint())
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as f:
            f.write(data)
    return len(data)


def load_checkpoint(source, spec):
    data = _read(source)
    fingerprint, tensors, end = decode_tensors(data)
    _check_fingerprint(fingerprint, spec)
    model = _into_model(tensors, spec)
    fp2, moments, end = decode_tensors(data, end)
    if end != len(data):
        raise MalformedFileError(f"{len(data) - end} unexpected bytes after the moments file")
    _check_fingerprint(fp2, spec)
    state = AdamState(t=int(moments.pop("adam.t")[0]))
    for name, _ in model.named_parameters():
        try:
            state.m[name] = moments[f"adam.m.{name}"].copy()
            state.v[name] = moments[f"adam.v.{name}"].copy()
        except KeyError as e:
            raise MalformedFileError(f"moments missing for {name}") from e
    return model, state
