"""Persistence and provenance: binary signal files, manifests, JSONL, digests.

All multi-byte binary values are little-endian; all text artifacts are UTF-8
JSON/JSONL. Every derived artifact embeds the digest of the config that
produced it so stages can refuse mismatched inputs.
"""

import hashlib
import json
import os
import struct

import numpy as np

from .errors import DigestMismatchError, StoreError

SIGNAL_MAGIC = b"SGR1"
_SIGNAL_HEADER = struct.Struct("<4sIQf")  # magic, C (u32), M (u64), rate_hz (f32)


# ---------------------------------------------------------------------------
# Canonical serialization, digests and seed derivation
# ---------------------------------------------------------------------------

def _canonical(obj):
    """Recursively convert obj to plain JSON types with stable float text."""
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        # repr of float is the shortest round-trip form, stable across runs
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_config"):
        return _canonical(obj.to_config())
    raise TypeError(f"cannot canonicalize {type(obj).__name__} for digesting")


def canonical_json(obj):
    """Deterministic JSON text: sorted keys, no whitespace, no NaN."""
    return json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def digest(obj):
    """16-byte (32 hex chars) digest of a config-like object."""
    return hashlib.blake2b(canonical_json(obj).encode("utf-8"),
                           digest_size=16).hexdigest()


def hash64(text):
    """Stable 64-bit hash of a string (unlike builtin hash, not salted)."""
    h = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little")


def derive_seed(seed, *parts):
    """Derive an independent 64-bit seed from a base seed and string parts.

    Per-recording streams use seed XOR hash(recording_id) so parallel
    per-item work is schedule independent.
    """
    out = int(seed) & 0xFFFFFFFFFFFFFFFF
    for p in parts:
        out ^= hash64(str(p))
    return out


def check_digest(expected, actual, what, force=False):
    if expected != actual and not force:
        raise DigestMismatchError(
            f"{what}: upstream digest {actual} does not match expected "
            f"{expected} (use force to override)")


# ---------------------------------------------------------------------------
# Raw signal files
# ---------------------------------------------------------------------------

def write_signal(path, data, rate_hz):
    """Write a C x M float32 signal: magic 'SGR1', u32 C, u64 M, f32 rate."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise StoreError(f"signal must be 2-D (C x M), got shape {arr.shape}")
    c, m = arr.shape
    with open(path, "wb") as f:
        f.write(_SIGNAL_HEADER.pack(SIGNAL_MAGIC, c, m, float(rate_hz)))
        f.write(arr.tobytes())


def read_signal(path):
    """Read a signal file; returns (data (C, M) float32, rate_hz)."""
    with open(path, "rb") as f:
        head = f.read(_SIGNAL_HEADER.size)
        if len(head) < _SIGNAL_HEADER.size:
            raise StoreError("truncated header", path=path, offset=len(head))
        magic, c, m, rate = _SIGNAL_HEADER.unpack(head)
        if magic != SIGNAL_MAGIC:
            raise StoreError(f"bad magic {magic!r}, expected {SIGNAL_MAGIC!r}",
                             path=path, offset=0)
        expected = c * m * 4
        payload = f.read(expected)
        if len(payload) != expected:
            raise StoreError(
                f"truncated payload: expected {expected} bytes of samples, "
                f"got {len(payload)}",
                path=path, offset=_SIGNAL_HEADER.size + len(payload))
        extra = f.read(1)
        if extra:
            raise StoreError(f"trailing bytes after {expected}-byte payload",
                             path=path,
                             offset=_SIGNAL_HEADER.size + expected)
    data = np.frombuffer(payload, dtype="<f4").reshape(c, m)
    return data.copy(), float(rate)


# ---------------------------------------------------------------------------
# Flat float32 payloads with JSON sidecars (weights.bin, features.bin, ...)
# ---------------------------------------------------------------------------

def write_f32(path, arrays):
    """Concatenate arrays as little-endian float32 in the given order."""
    with open(path, "wb") as f:
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_f32(path, shapes):
    """Read back arrays of the declared shapes; error on size mismatch."""
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) != expected:
        raise StoreError(
            f"payload size mismatch: expected {expected} bytes "
            f"({expected // 4} float32 values), got {len(payload)}",
            path=path, offset=min(len(payload), expected))
    out = []
    off = 0
    flat = np.frombuffer(payload, dtype="<f4")
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[off:off + n].reshape(s).copy())
        off += n
    return out


# ---------------------------------------------------------------------------
# JSON / JSONL helpers
# ---------------------------------------------------------------------------

def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=False)
        f.write("\n")


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise StoreError(f"invalid JSON: {e}", path=path) from e


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":")))
            f.write("\n")


def append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, separators=(",", ":")))
        f.write("\n")


def read_jsonl(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise StoreError(f"invalid JSONL on line {i + 1}: {e}",
                                 path=path) from e
    return records


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
