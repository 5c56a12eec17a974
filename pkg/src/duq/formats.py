"""Binary map files (DMAP), PGM previews, and DUQC checkpoints."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import ParamStore, TensorMap

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1
DUQC_MAGIC = b"DUQC"
DUQC_VERSION = 1


def encode_dmap(t: TensorMap) -> bytes:
    c, h, w = t.shape
    header = DMAP_MAGIC + struct.pack("<4I", DMAP_VERSION, c, h, w)
    return header + t.data.astype("<f4").tobytes(order="C")


def decode_dmap(buf: bytes) -> TensorMap:
    if len(buf) < 20:
        raise FormatError(f"truncated header at offset {len(buf)} (need 20 bytes)")
    if buf[:4] != DMAP_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at offset 0")
    version, c, h, w = struct.unpack("<4I", buf[4:20])
    if version != DMAP_VERSION:
        raise FormatError(f"unsupported DMAP version {version} at offset 4")
    n = c * h * w
    need = 20 + 4 * n
    if len(buf) < need:
        raise FormatError(f"truncated payload: {(len(buf) - 20) // 4} of {n} floats, "
                          f"file ends at offset {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"trailing bytes after offset {need}")
    vals = np.frombuffer(buf, dtype="<f4", count=n, offset=20)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise FormatError(f"non-finite value at offset {20 + 4 * int(bad[0])}")
    return TensorMap(vals.astype(np.float64).reshape(c, h, w))


def write_dmap(path, t: TensorMap) -> None:
    Path(path).write_bytes(encode_dmap(t))


def read_dmap(path) -> TensorMap:
    return decode_dmap(Path(path).read_bytes())


def write_pgm(path, t: TensorMap, channel: int = 0) -> None:
    """8-bit binary PGM of one channel; values clamped to [0, 1]."""
    img = np.round(255 * np.clip(t.data[channel], 0.0, 1.0)).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(header: dict, stores: dict[str, ParamStore]) -> bytes:
    """Serialise named ParamStores.  Block layout is recorded in the header."""
    header = dict(header)
    header["stores"] = {
        sname: [[n, list(store[n].shape), store.learnable[n]] for n in store.blocks]
        for sname, store in stores.items()
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    # the JSON header lists stores in sorted order, so the body follows that order too
    body = b"".join(stores[s][n].astype("<f4").tobytes()
                    for s in sorted(stores) for n in stores[s].blocks)
    return DUQC_MAGIC + struct.pack("<2I", DUQC_VERSION, len(hbytes)) + hbytes + body


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    """Return ``(header, {store name: {block name: array}})``."""
    if buf[:4] != DUQC_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at offset 0")
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header")
    version, hlen = struct.unpack("<2I", buf[4:12])
    if version != DUQC_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header at offset 12: {exc}") from exc
    offset = 12 + hlen
    out: dict[str, dict[str, np.ndarray]] = {}
    for sname, blocks in header["stores"].items():
        out[sname] = {}
        for name, shape, _ in blocks:
            n = int(np.prod(shape)) if shape else 1
            if offset + 4 * n > len(buf):
                raise FormatError(f"truncated block {sname}/{name} at offset {offset}")
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
            out[sname][name] = arr.astype(np.float64).reshape(shape)
            offset += 4 * n
    if offset != len(buf):
        raise FormatError(f"trailing bytes after offset {offset}")
    return header, out


def load_into(store: ParamStore, blocks: dict[str, np.ndarray]) -> None:
    if list(blocks) != list(store.blocks):
        raise FormatError("checkpoint block layout does not match the architecture")
    for name, arr in blocks.items():
        store.blocks[name] = arr.copy()
