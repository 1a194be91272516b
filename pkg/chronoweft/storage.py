# storage.py
# Little-endian binary containers:
#   CWTJ  trajectory matrix (header, row-major f64 data, norm_stats)
#   CWMK  observation bitmask section appended to a CWTJ block (sparse series)
#   CWTS  named-tensor checkpoint with a JSON metadata block

import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from chronoweft.dynsys import TrajectoryMatrix
from chronoweft.errors import FormatError
from chronoweft.observe import ObservationSpec, SparseSeries

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

_TRAJ_HEADER = struct.Struct("<4sIQId")  # magic, version, L_s, D, dt_effective
_MASK_HEADER = struct.Struct("<4sQ")  # magic, packed byte count
_OBS_SPEC = struct.Struct("<dddq")  # sparsity, mult sigma, add sigma, seed
_CKPT_HEADER = struct.Struct("<4sII")  # magic, version, metadata length


class _Reader:
    """Cursor over a byte buffer that raises FormatError on truncation"""

    def __init__(self, buf, source):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return fmt.unpack(self.take(fmt.size))

    def array(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)

    def done(self):
        return self.pos == len(self.buf)


def _check_magic(found, expected, source):
    if found != expected:
        raise FormatError(f"{source}: bad magic {found!r}, expected {expected!r}")


def _open(path):
    try:
        return _Reader(Path(path).read_bytes(), str(path))
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file")


def _check_version(version, source):
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")


def _write_atomic(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    logger.debug("Wrote %d bytes to %s", len(payload), path)


# ------------------------
# Trajectories
# ------------------------
def _encode_trajectory(data, dt_effective, norm_stats):
    data = np.ascontiguousarray(data, dtype="<f8")
    rows, dim = data.shape
    if norm_stats is None:
        norm_stats = np.vstack([np.zeros(dim), np.ones(dim)])
    stats = np.ascontiguousarray(norm_stats, dtype="<f8").reshape(2, dim)
    header = _TRAJ_HEADER.pack(b"CWTJ", FORMAT_VERSION, rows, dim, float(dt_effective))
    return header + data.tobytes() + stats.tobytes()


def _decode_trajectory(reader):
    magic, version, rows, dim, dt_effective = reader.unpack(_TRAJ_HEADER)
    _check_magic(magic, b"CWTJ", reader.source)
    _check_version(version, reader.source)
    data = reader.array((rows, dim))
    stats = reader.array((2, dim))
    return data, dt_effective, stats


def write_trajectory(path, traj):
    _write_atomic(path, _encode_trajectory(traj.data, traj.dt_effective, traj.norm_stats))


def read_trajectory(path):
    reader = _open(path)
    data, dt_effective, stats = _decode_trajectory(reader)
    if not reader.done():
        raise FormatError(f"{path}: trailing bytes after trajectory (is this a sparse series?)")
    return TrajectoryMatrix(data, dt_effective, stats)


# ------------------------
# Sparse series
# ------------------------
def write_sparse(path, sparse):
    mask = np.asarray(sparse.mask, dtype=bool)
    packed = np.packbits(mask.ravel(), bitorder="little")
    spec = sparse.spec
    payload = (
        _encode_trajectory(sparse.values, sparse.dt_effective, sparse.norm_stats)
        + _MASK_HEADER.pack(b"CWMK", packed.size)
        + packed.tobytes()
        + _OBS_SPEC.pack(spec.sparsity, spec.mult_noise_sigma, spec.add_noise_sigma, int(spec.seed))
    )
    _write_atomic(path, payload)


def read_sparse(path):
    reader = _open(path)
    values, dt_effective, stats = _decode_trajectory(reader)

    magic, nbytes = reader.unpack(_MASK_HEADER)
    _check_magic(magic, b"CWMK", reader.source)
    bits = np.frombuffer(reader.take(nbytes), dtype=np.uint8)
    mask = np.unpackbits(bits, count=values.size, bitorder="little").astype(bool).reshape(values.shape)

    sparsity, mult, add, seed = reader.unpack(_OBS_SPEC)
    if not reader.done():
        raise FormatError(f"{path}: trailing bytes after sparse series")
    spec = ObservationSpec(sparsity, mult, add, seed)
    return SparseSeries(values, mask, spec, dt_effective, stats)


# ------------------------
# Named-tensor checkpoints
# ------------------------
def write_checkpoint(path, tensors, metadata=None):
    """
    tensors: mapping name -> ndarray (any rank, stored as f64)
    metadata: JSON-serializable dict (configs, versions)
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts = [_CKPT_HEADER.pack(b"CWTS", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    _write_atomic(path, b"".join(parts))


def read_checkpoint(path):
    """Returns (dict name -> ndarray, metadata dict); order of names is preserved"""
    reader = _open(path)
    magic, version, meta_len = reader.unpack(_CKPT_HEADER)
    _check_magic(magic, b"CWTS", reader.source)
    _check_version(version, reader.source)
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable metadata block ({e})")

    (count,) = reader.unpack(struct.Struct("<I"))
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack(struct.Struct("<H"))
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack(struct.Struct("<B"))
        shape = reader.unpack(struct.Struct(f"<{ndim}Q")) if ndim else ()
        tensors[name] = reader.array(tuple(shape))
    if not reader.done():
        raise FormatError(f"{path}: trailing bytes after checkpoint")
    return tensors, metadata
