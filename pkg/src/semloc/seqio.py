"""Label-raster and sparse-feature sequence files.

Packed label sequence (little-endian)::

    b"SLBL" u8 version u8 flags(bit0: zlib) u16 width u16 height u32 frames
    per frame: f64 t, u8 camera_id, [u32 nbytes if zlib] payload (H*W u8)

Sparse feature sequence (little-endian)::

    b"SFEA" u8 version u8 flags(bit0: track ids) u16 descriptor_dim u32 frames
    per frame: f64 t, u8 camera_id, u32 count,
               count x (f32 u, f32 v, u8[dim] descriptor[, i32 track])

Feature ``(u, v)`` are distorted normalized image coordinates.
"""
from __future__ import annotations

import re
import struct
import zlib
from pathlib import Path

import numpy as np

from .semantic_filter import SegmentedImage
from .sift_filter import SparseFeatureSet

LABEL_MAGIC = b"SLBL"
FEATURE_MAGIC = b"SFEA"
VERSION = 1


class SequenceFormatError(ValueError):
    pass


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise SequenceFormatError("truncated sequence file")
    return buf


def write_label_sequence(path, images, compress: bool = True) -> None:
    images = list(images)
    if images:
        H, W = images[0].labels.shape
    else:
        H = W = 0
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC + struct.pack("<BBHHI", VERSION, int(compress), W, H, len(images)))
        for img in images:
            if img.labels.shape != (H, W):
                raise ValueError("all label images in a sequence must share one size")
            fh.write(struct.pack("<dB", float(img.t), int(img.camera_id)))
            raw = np.ascontiguousarray(img.labels, dtype=np.uint8).tobytes()
            if compress:
                raw = zlib.compress(raw, 6)
                fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def iter_label_sequence(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != LABEL_MAGIC:
            raise SequenceFormatError("not a label sequence file")
        version, flags, W, H, n = struct.unpack("<BBHHI", _read_exact(fh, 10))
        if version != VERSION:
            raise SequenceFormatError(f"unsupported version {version}")
        for _ in range(n):
            t, cam = struct.unpack("<dB", _read_exact(fh, 9))
            if flags & 1:
                (nb,) = struct.unpack("<I", _read_exact(fh, 4))
                raw = zlib.decompress(_read_exact(fh, nb))
            else:
                raw = _read_exact(fh, W * H)
            if len(raw) != W * H:
                raise SequenceFormatError("frame size mismatch")
            yield SegmentedImage(np.frombuffer(raw, dtype=np.uint8).reshape(H, W).copy(), cam, t)


def read_label_sequence(path) -> list:
    return list(iter_label_sequence(path))


def write_pgm(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    H, W = labels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (W, H))
        fh.write(np.ascontiguousarray(labels).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval separated by whitespace, comments allowed
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise SequenceFormatError("bad PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise SequenceFormatError("only binary PGM (P5) is supported")
    W, H, maxval = (int(x) for x in tokens[1:])
    if maxval > 255:
        raise SequenceFormatError("label rasters must be 8-bit")
    pos += 1
    body = data[pos:pos + W * H]
    if len(body) != W * H:
        raise SequenceFormatError("truncated PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W).copy()


PGM_NAME = "frame_{k:06d}_cam{c}.pgm"
_PGM_RE = re.compile(r"frame_(\d+)_cam(\d+)\.pgm$")


def write_pgm_sequence(directory, images) -> None:
    """One P5 file per image; frame numbers count images per camera."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    counters = {}
    for img in images:
        k = counters.get(img.camera_id, 0)
        counters[img.camera_id] = k + 1
        write_pgm(d / PGM_NAME.format(k=k, c=img.camera_id), img.labels)


def read_pgm_sequence(directory, times=None) -> list:
    """Images ordered by frame then camera; ``times[k]`` sets frame k's stamp."""
    entries = []
    for p in Path(directory).iterdir():
        m = _PGM_RE.match(p.name)
        if m:
            entries.append((int(m.group(1)), int(m.group(2)), p))
    entries.sort()
    return [SegmentedImage(read_pgm(p), c, float(times[k]) if times is not None else float(k))
            for k, c, p in entries]


def write_feature_sequence(path, frames) -> None:
    frames = list(frames)
    tracks = bool(frames) and all(f.track_ids is not None for f in frames)
    dim = next((f.descriptors.shape[1] for f in frames if len(f)), 128)
    rec = np.dtype([("u", "<f4"), ("v", "<f4"), ("d", "u1", (dim,))] + ([("track", "<i4")] if tracks else []))
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<BBHI", VERSION, int(tracks), dim, len(frames)))
        for f in frames:
            if len(f) and f.descriptors.shape[1] != dim:
                raise ValueError("descriptor dimension differs between frames")
            arr = np.zeros(len(f), dtype=rec)
            arr["u"], arr["v"] = f.coords[:, 0], f.coords[:, 1]
            arr["d"] = f.descriptors
            if tracks:
                arr["track"] = f.track_ids
            fh.write(struct.pack("<dBI", float(f.t), int(f.camera_id), len(f)))
            fh.write(arr.tobytes())


def iter_feature_sequence(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != FEATURE_MAGIC:
            raise SequenceFormatError("not a feature sequence file")
        version, flags, dim, n = struct.unpack("<BBHI", _read_exact(fh, 8))
        if version != VERSION:
            raise SequenceFormatError(f"unsupported version {version}")
        tracks = bool(flags & 1)
        rec = np.dtype([("u", "<f4"), ("v", "<f4"), ("d", "u1", (dim,))] + ([("track", "<i4")] if tracks else []))
        for _ in range(n):
            t, cam, count = struct.unpack("<dBI", _read_exact(fh, 13))
            arr = np.frombuffer(_read_exact(fh, count * rec.itemsize), dtype=rec)
            coords = np.column_stack([arr["u"], arr["v"]]).astype(float)
            yield SparseFeatureSet(coords, arr["d"].copy().reshape(count, dim), cam, t,
                                   arr["track"].astype(np.int64) if tracks else None)


def read_feature_sequence(path) -> list:
    return list(iter_feature_sequence(path))


def group_by_time(items) -> list:
    """Group consecutive items sharing a timestamp into per-frame lists."""
    out, last = [], None
    for it in items:
        if not out or it.t != last:
            out.append([])
            last = it.t
        out[-1].append(it)
    return out
