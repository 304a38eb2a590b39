"""
Self-describing binary archives and deterministic CSV tables.

Archive layout::

    b"TWZA"            magic
    uint16 LE          format version
    uint32 LE          header length in bytes
    header             UTF-8 JSON: kind, meta, and per-array name/dtype/shape/offset/nbytes
    payload            the arrays' raw row-major little-endian bytes, concatenated

The header also records a SHA-256 of the payload, checked on read.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .camera import Frame
from .classify import ClassifiedStack
from .dynamics import AtomTimeline

MAGIC = b"TWZA"
VERSION = 1


class ArchiveError(ValueError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


def _le(a):
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
        a = a.byteswap().view(a.dtype.newbyteorder("<"))
    return a


def write_bytes(kind, arrays: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = _le(np.asarray(arr))
        raw = a.tobytes(order="C")
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"kind": kind, "meta": meta or {}, "arrays": entries,
              "sha256": hashlib.sha256(payload).hexdigest()}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(hb)) + hb + payload


def read_bytes(buf: bytes):
    if buf[:4] != MAGIC:
        raise ArchiveError("not a tweezersim archive (bad magic)")
    version, hlen = struct.unpack("<HI", buf[4:10])
    if version != VERSION:
        raise ArchiveVersionError(f"archive version {version} is not supported (expected {VERSION})")
    header = json.loads(buf[10:10 + hlen].decode())
    payload = buf[10 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ArchiveError("payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["kind"], arrays, header["meta"]


def save(path, kind, arrays, meta=None):
    Path(path).write_bytes(write_bytes(kind, arrays, meta))


def load(path):
    return read_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# typed wrappers
# ---------------------------------------------------------------------------

def frame_stack_to_bytes(counts, site_centers, meta=None):
    """Frames (n_frames, height, width) as non-negative int32."""
    c = np.asarray(counts)
    if c.size and c.min() < 0:
        raise ArchiveError("frame counts must be non-negative")
    return write_bytes("frames", {"counts": c.astype("<i4"),
                                  "site_centers": np.asarray(site_centers, dtype="<f8")}, meta)


def encode(obj, meta=None) -> bytes:
    meta = dict(meta or {})
    if isinstance(obj, Frame):
        meta.update(exposure=obj.exposure, seed=obj.seed)
        arrays = {"counts": obj.counts.astype("<i4"), "site_centers": np.asarray(obj.site_centers, "<f8")}
        if obj.detected is not None:
            arrays["detected"] = np.asarray(obj.detected, "<i8")
        return write_bytes("frame", arrays, {**meta, "frame_meta": obj.meta})
    if isinstance(obj, AtomTimeline):
        meta.update(site=obj.site, loaded=obj.loaded, exposure=obj.exposure, frame_period=obj.frame_period)
        return write_bytes("timeline", {
            "internal": obj.internal.astype("u1"), "photons": obj.photons.astype("<i8"),
            "bright_time": obj.bright_time.astype("<f8"), "event_times": obj.event_times.astype("<f8"),
            "event_states": obj.event_states.astype("u1")}, meta)
    if isinstance(obj, ClassifiedStack):
        meta.update(frame_period=obj.frame_period, exposure=obj.exposure, stack_meta=obj.meta)
        return write_bytes("stack", {"labels": obj.labels.astype("u1"), "scores": obj.scores.astype("<f8")},
                           meta)
    raise TypeError(f"cannot archive {type(obj).__name__}")


def decode(buf: bytes):
    kind, arr, meta = read_bytes(buf)
    if kind == "frame":
        return Frame(arr["counts"].astype(np.int32), arr["site_centers"], meta["exposure"], meta["seed"],
                     arr.get("detected"), meta.get("frame_meta", {}))
    if kind == "timeline":
        return AtomTimeline(meta["site"], meta["loaded"], arr["internal"], arr["photons"], arr["bright_time"],
                            meta["exposure"], meta["frame_period"], arr["event_times"], arr["event_states"])
    if kind == "stack":
        return ClassifiedStack(arr["labels"].astype(bool), arr["scores"], meta["frame_period"],
                               meta["exposure"], meta.get("stack_meta", {}))
    raise ArchiveError(f"archive kind {kind!r} has no typed decoder")


def archive_roundtrip(obj):
    """Serialise then deserialise; the identity on frames, timelines and stacks."""
    return decode(encode(obj))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_csv(path, rows, columns, seed, config_hash):
    """One header row, '.' decimals via repr(); every row carries seed and config hash."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(columns) + ["seed", "config_hash"])
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns] + [str(seed), config_hash])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return Path(path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
