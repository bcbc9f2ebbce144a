"""Binary map container (``.smap``) and a JSON debug dump.

Layout, all integers little-endian::

    magic        4s   b"SMAP"
    version      u8   1
    n_classes    u8   followed by n_classes x (u8 length, utf-8 name)
    flags        u8   bit 0 set: dense 128-byte descriptors, else semantic
    max_range    f32  range quantization ceiling in meters
    class_prior  n_classes x f32
    occluded     n_classes x f32
    road_count   u32  followed by road_count x 6 x f32 (e, n, u, yaw, pitch, roll)
    point_count  u64
    records      point_count fixed-size records

Point record::

    position     3 x f32                 12 bytes
    rho          u8   rho * 255
    gamma_a      u8   (gamma_a + pi) / 2pi * 256, i.e. 2pi/256 steps
    span         u8   arc width / 2pi * 255 (255 is the full circle)
    range        u8   r / max_range * 255, at least 1
    descriptor   semantic: 5 bytes holding 39 used bits
                   bits  0-14  three 5-bit class ids
                   bits 15-38  three 8-bit probabilities, summing to 255
                 dense: 128 x u8
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .geometry import TWO_PI, wrap_angle
from .semantic_map import DENSE_DIM, MAX_CLASSES, TOP_K, SemanticMap

MAGIC = b"SMAP"
VERSION = 1
FLAG_DENSE = 0x01
DEFAULT_MAX_RANGE = 200.0

CLASS_BITS = 5
PROB_BITS = 8
SEMANTIC_DESCRIPTOR_BITS = TOP_K * (CLASS_BITS + PROB_BITS)  # 39
POSITION_BYTES = 12
VISIBILITY_BYTES = 4
SEMANTIC_DESCRIPTOR_BYTES = (SEMANTIC_DESCRIPTOR_BITS + 7) // 8
DENSE_DESCRIPTOR_BYTES = DENSE_DIM

# worst-case absolute decode error per field
QUANT_STEP = {
    "rho": 0.5 / 255,
    "gamma_a": np.pi / 256,
    "span": np.pi / 255,
    "prob": 1.0 / 255,
}


class MapFormatError(ValueError):
    pass


def record_size(dense: bool) -> int:
    desc = DENSE_DESCRIPTOR_BYTES if dense else SEMANTIC_DESCRIPTOR_BYTES
    return POSITION_BYTES + VISIBILITY_BYTES + desc


def quantize_probs(probs, total=255):
    """Integer apportionment of ``probs`` summing exactly to ``total``.

    Largest-remainder rounding keeps each value within one step of the
    exact product.
    """
    probs = np.asarray(probs, dtype=float)
    exact = probs * total
    q = np.floor(exact).astype(np.int64)
    short = total - q.sum(axis=-1)
    frac = exact - q
    # hand out the remaining units to the largest fractional parts
    order = np.argsort(-frac, axis=-1, kind="stable")
    ranks = np.argsort(order, axis=-1, kind="stable")
    q += (ranks < short[..., None]).astype(np.int64)
    return q


def pack_semantic(classes, probs) -> np.ndarray:
    """Pack ``(M, 3)`` class ids and PMFs into ``(M, 5)`` bytes."""
    classes = np.asarray(classes, dtype=np.uint64)
    q = quantize_probs(probs).astype(np.uint64)
    word = np.zeros(len(classes), dtype=np.uint64)
    for k in range(TOP_K):
        word |= classes[:, k] << np.uint64(CLASS_BITS * k)
        word |= q[:, k] << np.uint64(TOP_K * CLASS_BITS + PROB_BITS * k)
    as_bytes = word.astype("<u8").view(np.uint8).reshape(-1, 8)
    return as_bytes[:, :SEMANTIC_DESCRIPTOR_BYTES]


def unpack_semantic(raw):
    raw = np.asarray(raw, dtype=np.uint8).reshape(-1, SEMANTIC_DESCRIPTOR_BYTES)
    padded = np.zeros((len(raw), 8), dtype=np.uint8)
    padded[:, :SEMANTIC_DESCRIPTOR_BYTES] = raw
    word = padded.view("<u8").reshape(-1)
    classes = np.stack([(word >> np.uint64(CLASS_BITS * k)) & np.uint64(2**CLASS_BITS - 1)
                        for k in range(TOP_K)], axis=1).astype(np.int64)
    q = np.stack([(word >> np.uint64(TOP_K * CLASS_BITS + PROB_BITS * k)) & np.uint64(2**PROB_BITS - 1)
                  for k in range(TOP_K)], axis=1).astype(np.int64)
    return classes, q


def _quantize_wedges(smap: SemanticMap, max_range: float) -> np.ndarray:
    if len(smap) and smap.wedge_range.max() > max_range:
        raise ValueError(f"wedge range exceeds the encodable maximum of {max_range} m")
    rho = np.rint(smap.rho * 255)
    ga = np.mod(np.rint((smap.gamma_a + np.pi) / TWO_PI * 256), 256)
    span = np.rint(smap.span / TWO_PI * 255)
    rng = np.clip(np.rint(smap.wedge_range / max_range * 255), 1, 255)
    return np.stack([rho, ga, span, rng], axis=1).astype(np.uint8)


def encode_map(smap: SemanticMap, max_range: float = DEFAULT_MAX_RANGE) -> bytes:
    """Serialize a map; see the module docstring for the layout."""
    n = smap.n_classes
    if n > MAX_CLASSES:
        raise ValueError("class table too large for 5-bit class ids")
    out = bytearray(MAGIC)
    out += struct.pack("<BB", VERSION, n)
    for name in smap.class_table:
        b = name.encode("utf-8")
        out += struct.pack("<B", len(b)) + b
    out += struct.pack("<Bf", FLAG_DENSE if smap.is_dense else 0, max_range)
    out += np.asarray(smap.class_prior, dtype="<f4").tobytes()
    out += np.asarray(smap.occluded, dtype="<f4").tobytes()
    out += struct.pack("<I", len(smap.road))
    out += np.asarray(smap.road, dtype="<f4").tobytes()
    m = len(smap)
    out += struct.pack("<Q", m)
    rec = np.zeros((m, record_size(smap.is_dense)), dtype=np.uint8)
    rec[:, :POSITION_BYTES] = np.asarray(smap.positions, dtype="<f4").view(np.uint8).reshape(m, POSITION_BYTES)
    rec[:, POSITION_BYTES:POSITION_BYTES + VISIBILITY_BYTES] = _quantize_wedges(smap, max_range)
    off = POSITION_BYTES + VISIBILITY_BYTES
    if smap.is_dense:
        rec[:, off:] = smap.dense
    else:
        rec[:, off:] = pack_semantic(smap.sem_classes, smap.sem_probs)
    out += rec.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise MapFormatError("truncated map stream")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_map(data: bytes) -> SemanticMap:
    """Parse a map produced by :func:`encode_map`."""
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise MapFormatError("bad magic bytes")
    version, n = r.unpack("<BB")
    if version != VERSION:
        raise MapFormatError(f"unsupported map version {version}")
    if n == 0 or n > MAX_CLASSES:
        raise MapFormatError("invalid class table size")
    names = []
    for _ in range(n):
        (length,) = r.unpack("<B")
        names.append(bytes(r.take(length)).decode("utf-8"))
    flags, max_range = r.unpack("<Bf")
    dense = bool(flags & FLAG_DENSE)
    prior = np.frombuffer(r.take(4 * n), dtype="<f4").astype(float)
    occluded = np.frombuffer(r.take(4 * n), dtype="<f4").astype(float)
    (n_road,) = r.unpack("<I")
    road = np.frombuffer(r.take(24 * n_road), dtype="<f4").astype(float).reshape(n_road, 6)
    (m,) = r.unpack("<Q")
    size = record_size(dense)
    if m > (len(r.data) - r.pos) // max(size, 1):
        raise MapFormatError("truncated map stream")
    rec = np.frombuffer(r.take(m * size), dtype=np.uint8).reshape(m, size)
    positions = rec[:, :POSITION_BYTES].copy().view("<f4").astype(float).reshape(m, 3)
    vis = rec[:, POSITION_BYTES:POSITION_BYTES + VISIBILITY_BYTES].astype(float)
    rho = vis[:, 0] / 255
    gamma_a = wrap_angle(vis[:, 1] * TWO_PI / 256 - np.pi)
    span = vis[:, 2] * TWO_PI / 255
    wedge_range = vis[:, 3] * max_range / 255
    off = POSITION_BYTES + VISIBILITY_BYTES
    kw = {}
    if dense:
        kw["dense"] = rec[:, off:].copy()
    else:
        classes, q = unpack_semantic(rec[:, off:])
        if np.any(classes >= n):
            raise MapFormatError("descriptor class index outside the class table")
        total = q.sum(axis=1, keepdims=True)
        if m and np.any(total == 0):
            raise MapFormatError("semantic descriptor with zero probability mass")
        kw["sem_classes"] = np.where(q > 0, classes, 0)
        kw["sem_probs"] = q / np.maximum(total, 1)
    # stored PMFs are f32; renormalize in double precision
    return SemanticMap(tuple(names), positions, rho, np.atleast_1d(gamma_a), span, wedge_range,
                       prior / prior.sum(), occluded / occluded.sum(), road, **kw)


def save_map(smap: SemanticMap, path, max_range: float = DEFAULT_MAX_RANGE) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_map(smap, max_range))


def load_map(path) -> SemanticMap:
    with open(path, "rb") as fh:
        return decode_map(fh.read())


def map_to_json(smap: SemanticMap) -> str:
    """Human-readable dump for inspection.

    Schema: ``{"format", "version", "descriptor_kind", "class_table",
    "class_prior", "occluded_pmf", "road": [[e, n, u, yaw, pitch, roll]],
    "points": [{"position": [e, n, u], "wedge": {"rho", "gamma_a",
    "gamma_b", "range"}, "descriptor": {class: prob} | [128 ints]}]}``.
    """
    points = []
    for i in range(len(smap)):
        w = smap.wedge(i)
        if smap.is_dense:
            desc = [int(v) for v in smap.dense[i]]
        else:
            desc = smap.descriptor(i).as_dict(smap.class_table)
        points.append({
            "position": [float(v) for v in smap.positions[i]],
            "wedge": {"rho": float(w.rho), "gamma_a": float(w.gamma_a),
                      "gamma_b": float(w.gamma_b), "range": float(w.r)},
            "descriptor": desc,
        })
    doc = {
        "format": "SMAP",
        "version": VERSION,
        "descriptor_kind": "dense" if smap.is_dense else "semantic",
        "class_table": list(smap.class_table),
        "class_prior": [float(v) for v in smap.class_prior],
        "occluded_pmf": [float(v) for v in smap.occluded],
        "road": [[float(v) for v in row] for row in smap.road],
        "points": points,
    }
    return json.dumps(doc, indent=1, sort_keys=True)
