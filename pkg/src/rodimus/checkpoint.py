"""Checkpoint serialization.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic b"RODIMUS1"
    8       4     format version (u32, currently 1)
    12      4     header length H (u32)
    16      H     header: UTF-8 JSON, canonical form (sorted keys)
    16+H    ...   raw array payloads, concatenated in manifest order

The JSON header has two required keys:
    "config":   the model config dict (plus optional "extra" metadata such as
                optimizer state scalars)
    "manifest": list of {"name", "dtype", "shape", "nbytes"} entries, one per
                array, in payload order

Arrays are stored as raw little-endian bytes with no padding, so a round trip
is bit-exact.  Truncated or corrupted files raise IntegrityError.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import IntegrityError

MAGIC = b"RODIMUS1"
VERSION = 1


def _le_dtype(dt: np.dtype) -> np.dtype:
    return np.dtype(dt).newbyteorder("<")


def save_arrays(path: str, config: dict, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    manifest = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(_le_dtype(arr.dtype), copy=False)
        raw = le.tobytes()
        manifest.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "nbytes": len(raw)}
        )
        payloads.append(raw)
    header = {"config": config, "manifest": manifest}
    if extra is not None:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for raw in payloads:
            f.write(raw)


def load_arrays(path: str) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns (config, arrays, extra). Raises IntegrityError on a bad file."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IntegrityError(f"cannot read checkpoint {path!r}: {e}") from e
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise IntegrityError(f"{path!r} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = struct.unpack_from("<I", blob, 12)
    if 16 + hlen > len(blob):
        raise IntegrityError(f"{path!r} truncated inside header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"{path!r} has a corrupt header: {e}") from e
    if not isinstance(header, dict) or "config" not in header or "manifest" not in header:
        raise IntegrityError(f"{path!r} header missing config/manifest")
    arrays: dict[str, np.ndarray] = {}
    off = 16 + hlen
    for entry in header["manifest"]:
        name, dtype, shape, nbytes = entry["name"], entry["dtype"], tuple(entry["shape"]), entry["nbytes"]
        if off + nbytes > len(blob):
            raise IntegrityError(f"{path!r} truncated inside array {name!r}")
        arr = np.frombuffer(blob[off : off + nbytes], dtype=_le_dtype(np.dtype(dtype)))
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if arr.size != expected:
            raise IntegrityError(
                f"{path!r}: array {name!r} has {arr.size} elements, manifest says {expected}"
            )
        arrays[name] = arr.astype(np.dtype(dtype), copy=True).reshape(shape)
        off += nbytes
    if off != len(blob):
        raise IntegrityError(f"{path!r} has {len(blob) - off} trailing bytes")
    return header["config"], arrays, header.get("extra", {})


def save_model(path: str, params, extra: dict | None = None) -> None:
    arrays = {name: t.data for name, t, _ in params.named()}
    save_arrays(path, params.cfg.to_dict(), arrays, extra)


def load_model(path: str, expect_config: dict | None = None):
    """Rebuild a model from a checkpoint; returns (params, extra).

    With ``expect_config``, any differing field raises IntegrityError naming it.
    """
    from .model import ModelConfig, build_model

    config, arrays, extra = load_arrays(path)
    if expect_config is not None:
        for key in sorted(set(config) | set(expect_config)):
            if config.get(key) != expect_config.get(key):
                raise IntegrityError(
                    f"checkpoint config mismatch on {key!r}: "
                    f"file has {config.get(key)!r}, expected {expect_config.get(key)!r}"
                )
    params = build_model(ModelConfig.from_dict(config))
    names = {name for name, _, _ in params.named()}
    missing = names - set(arrays)
    if missing:
        # surplus arrays (e.g. optimizer moments in a training checkpoint) are fine
        raise IntegrityError(f"checkpoint is missing parameters: {sorted(missing)}")
    for name, t, _ in params.named():
        arr = arrays[name]
        if arr.shape != t.shape:
            raise IntegrityError(f"array {name!r} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
    return params, extra
