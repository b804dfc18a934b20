"""Binary file formats used across the pipeline.

All formats are little-endian, open with a 4-byte ASCII magic followed by a
u32 version. Readers raise :class:`ParseError` naming the offending field so
corrupted files can be diagnosed without a hex dump. Writers are
deterministic: writing the same in-memory value twice produces byte-identical
files, which the round-trip tests rely on.

Formats:
    O3PC  point cloud      (f32 xyz, u8 rgb, u32 instance id per record)
    O3DP  depth map        (H x W f32 meters, 0/NaN = no measurement)
    O3PE  pixel embeddings (H' x W' x D f32 grid)
    O3CE  crop embeddings  (keyed by frame, pixel box, scale)
    O3FT  fused 2D targets (per-node / per-edge vectors with presence flag)
    O3ET  embedding table  (labelled vectors in one embedding space)
    O3CK  checkpoint       (config echo + named tensors + counters)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CLOUD_MAGIC = b"O3PC"
DEPTH_MAGIC = b"O3DP"
PIXEL_EMBEDDING_MAGIC = b"O3PE"
CROP_EMBEDDING_MAGIC = b"O3CE"
FUSED_TARGETS_MAGIC = b"O3FT"
TABLE_MAGIC = b"O3ET"
CHECKPOINT_MAGIC = b"O3CK"

# 19 bytes per record, packed (no alignment padding)
_CLOUD_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1"), ("id", "<u4")]
)
_CLOUD_RECORD_SIZE = _CLOUD_DTYPE.itemsize
assert _CLOUD_RECORD_SIZE == 19


class ParseError(ValueError):
    """A malformed file; ``field`` names the part of the layout that failed."""

    def __init__(self, path, field: str, detail: str):
        self.path = str(path)
        self.field = field
        self.detail = detail
        super().__init__(f"{self.path}: bad {field}: {detail}")


class _Reader:
    """Cursor over a byte buffer that reports which field ran dry."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(self.path, field, f"file truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.take(4, "magic")
        if got != expected:
            raise ParseError(self.path, "magic", f"expected {expected!r}, got {got!r}")

    def u16(self, field: str) -> int:
        return struct.unpack("<H", self.take(2, field))[0]

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]

    def u64(self, field: str) -> int:
        return struct.unpack("<Q", self.take(8, field))[0]

    def f32(self, field: str) -> float:
        return struct.unpack("<f", self.take(4, field))[0]

    def version(self, expected: int = 1) -> int:
        v = self.u32("version")
        if v != expected:
            raise ParseError(self.path, "version", f"unsupported version {v} (expected {expected})")
        return v

    def f32_array(self, count: int, field: str) -> np.ndarray:
        raw = self.take(4 * count, field)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)

    def utf8(self, length_field: str, field: str, width: int = 16) -> str:
        n = self.u16(length_field) if width == 16 else self.u32(length_field)
        raw = self.take(n, field)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(self.path, field, f"invalid utf-8: {exc}") from None

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ParseError(self.path, "trailing data", f"{len(self.data) - self.pos} unexpected bytes at end")


def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise ParseError(p, "file", "missing file")
    return p.read_bytes()


# ---------------------------------------------------------------------------
# O3PC point cloud
# ---------------------------------------------------------------------------

def write_point_cloud(path, points: np.ndarray, colors: np.ndarray, instance_ids: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    instance_ids = np.asarray(instance_ids, dtype=np.uint32).reshape(-1)
    n = points.shape[0]
    if colors.shape[0] != n or instance_ids.shape[0] != n:
        raise ValueError("points/colors/instance_ids length mismatch")
    records = np.empty(n, dtype=_CLOUD_DTYPE)
    records["x"], records["y"], records["z"] = points[:, 0], points[:, 1], points[:, 2]
    records["r"], records["g"], records["b"] = colors[:, 0], colors[:, 1], colors[:, 2]
    records["id"] = instance_ids
    Path(path).write_bytes(CLOUD_MAGIC + struct.pack("<IQ", 1, n) + records.tobytes())


def read_point_cloud(path):
    """Returns (points f32 (N,3), colors u8 (N,3), instance_ids u32 (N,))."""
    r = _Reader(_read_bytes(path), path)
    r.magic(CLOUD_MAGIC)
    r.version()
    count = r.u64("count")
    if count < 1:
        raise ParseError(path, "count", "cloud must contain at least one point")
    body = r.data[r.pos :]
    need = count * _CLOUD_RECORD_SIZE
    if len(body) < need:
        # Identify which per-point array the truncation landed in.
        tail = len(body) % _CLOUD_RECORD_SIZE
        if tail == 0 or tail < 12:
            field = "points length"
        elif tail < 15:
            field = "colors length"
        else:
            field = "instance_ids length"
        raise ParseError(path, field, f"expected {count} records ({need} bytes), got {len(body)} bytes")
    if len(body) > need:
        raise ParseError(path, "trailing data", f"{len(body) - need} unexpected bytes after records")
    records = np.frombuffer(body, dtype=_CLOUD_DTYPE, count=count)
    points = np.stack([records["x"], records["y"], records["z"]], axis=1).astype(np.float32)
    colors = np.stack([records["r"], records["g"], records["b"]], axis=1).astype(np.uint8)
    instance_ids = records["id"].astype(np.uint32)
    return points, colors, instance_ids


# ---------------------------------------------------------------------------
# O3DP depth map
# ---------------------------------------------------------------------------

def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError("depth must be 2-D")
    h, w = depth.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<III", 1, h, w) + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    r = _Reader(_read_bytes(path), path)
    r.magic(DEPTH_MAGIC)
    r.version()
    h = r.u32("height")
    w = r.u32("width")
    data = r.f32_array(h * w, "depth values")
    r.done()
    return data.reshape(h, w)


# ---------------------------------------------------------------------------
# O3PE pixel-embedding grid
# ---------------------------------------------------------------------------

def write_pixel_embeddings(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 3:
        raise ValueError("pixel-embedding grid must be (H', W', D)")
    h, w, d = grid.shape
    Path(path).write_bytes(
        PIXEL_EMBEDDING_MAGIC + struct.pack("<IIII", 1, d, h, w) + grid.astype("<f4").tobytes()
    )


def read_pixel_embeddings(path) -> np.ndarray:
    r = _Reader(_read_bytes(path), path)
    r.magic(PIXEL_EMBEDDING_MAGIC)
    r.version()
    d = r.u32("dim")
    h = r.u32("grid height")
    w = r.u32("grid width")
    data = r.f32_array(h * w * d, "embedding values")
    r.done()
    return data.reshape(h, w, d)


# ---------------------------------------------------------------------------
# O3CE crop-embedding cache
# ---------------------------------------------------------------------------

def write_crop_embeddings(path, dim: int, records) -> None:
    """records: iterable of (frame, (x0, y0, x1, y1), scale, vector)."""
    buf = bytearray()
    buf += CROP_EMBEDDING_MAGIC
    records = list(records)
    buf += struct.pack("<IIQ", 1, dim, len(records))
    for frame, box, scale, vec in records:
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.shape[0] != dim:
            raise ValueError(f"crop vector has dim {vec.shape[0]}, expected {dim}")
        buf += struct.pack("<IIIIIf", int(frame), int(box[0]), int(box[1]), int(box[2]), int(box[3]), float(scale))
        buf += vec.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_crop_embeddings(path):
    """Returns (dim, list of (frame, box, scale, vector))."""
    r = _Reader(_read_bytes(path), path)
    r.magic(CROP_EMBEDDING_MAGIC)
    r.version()
    d = r.u32("dim")
    count = r.u64("count")
    out = []
    for k in range(count):
        head = r.take(24, f"record {k} header")
        frame, x0, y0, x1, y1, scale = struct.unpack("<IIIIIf", head)
        vec = r.f32_array(d, f"record {k} vector")
        out.append((frame, (x0, y0, x1, y1), scale, vec))
    r.done()
    return d, out


# ---------------------------------------------------------------------------
# O3FT fused 2D targets
# ---------------------------------------------------------------------------

def write_fused_targets(path, d_obj: int, d_rel: int, node_records, edge_records) -> None:
    """node_records: iterable of (node_id, vector|None); edge_records of ((i, j), vector|None).

    A ``None`` vector is stored as presence flag 0 with no payload; targets are
    never silently zero-filled.
    """
    buf = bytearray()
    buf += FUSED_TARGETS_MAGIC
    node_records = list(node_records)
    edge_records = list(edge_records)
    buf += struct.pack("<IIIQQ", 1, d_obj, d_rel, len(node_records), len(edge_records))
    for node_id, vec in node_records:
        if vec is None:
            buf += struct.pack("<IB", int(node_id), 0)
        else:
            vec = np.asarray(vec, dtype=np.float32).reshape(-1)
            if vec.shape[0] != d_obj:
                raise ValueError(f"node target has dim {vec.shape[0]}, expected {d_obj}")
            buf += struct.pack("<IB", int(node_id), 1) + vec.astype("<f4").tobytes()
    for (i, j), vec in edge_records:
        if vec is None:
            buf += struct.pack("<IIB", int(i), int(j), 0)
        else:
            vec = np.asarray(vec, dtype=np.float32).reshape(-1)
            if vec.shape[0] != d_rel:
                raise ValueError(f"edge target has dim {vec.shape[0]}, expected {d_rel}")
            buf += struct.pack("<IIB", int(i), int(j), 1) + vec.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_fused_targets(path):
    """Returns (d_obj, d_rel, node_records, edge_records) mirroring the writer."""
    r = _Reader(_read_bytes(path), path)
    r.magic(FUSED_TARGETS_MAGIC)
    r.version()
    d_obj = r.u32("object dim")
    d_rel = r.u32("relationship dim")
    n_nodes = r.u64("node count")
    n_edges = r.u64("edge count")
    nodes = []
    for k in range(n_nodes):
        node_id = r.u32(f"node record {k} id")
        flag = r.take(1, f"node record {k} presence flag")[0]
        if flag == 1:
            nodes.append((node_id, r.f32_array(d_obj, f"node record {k} vector")))
        elif flag == 0:
            nodes.append((node_id, None))
        else:
            raise ParseError(path, f"node record {k} presence flag", f"must be 0 or 1, got {flag}")
    edges = []
    for k in range(n_edges):
        i = r.u32(f"edge record {k} subject id")
        j = r.u32(f"edge record {k} object id")
        flag = r.take(1, f"edge record {k} presence flag")[0]
        if flag == 1:
            edges.append(((i, j), r.f32_array(d_rel, f"edge record {k} vector")))
        elif flag == 0:
            edges.append(((i, j), None))
        else:
            raise ParseError(path, f"edge record {k} presence flag", f"must be 0 or 1, got {flag}")
    r.done()
    return d_obj, d_rel, nodes, edges


# ---------------------------------------------------------------------------
# O3ET embedding table
# ---------------------------------------------------------------------------

def write_embedding_table(path, space: str, dim: int, entries) -> None:
    """entries: iterable of (label, vector)."""
    space_raw = space.encode("utf-8")
    buf = bytearray()
    buf += TABLE_MAGIC
    buf += struct.pack("<I", 1)
    buf += struct.pack("<H", len(space_raw)) + space_raw
    entries = list(entries)
    buf += struct.pack("<IQ", dim, len(entries))
    for label, vec in entries:
        raw = label.encode("utf-8")
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.shape[0] != dim:
            raise ValueError(f"entry {label!r} has dim {vec.shape[0]}, expected {dim}")
        buf += struct.pack("<H", len(raw)) + raw + vec.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_embedding_table(path):
    """Returns (space, dim, list of (label, vector))."""
    r = _Reader(_read_bytes(path), path)
    r.magic(TABLE_MAGIC)
    r.version()
    space = r.utf8("space tag length", "space tag")
    dim = r.u32("dim")
    count = r.u64("count")
    entries = []
    for k in range(count):
        label = r.utf8(f"entry {k} label length", f"entry {k} label")
        entries.append((label, r.f32_array(dim, f"entry {k} vector")))
    r.done()
    return space, dim, entries


# ---------------------------------------------------------------------------
# O3CK checkpoint
# ---------------------------------------------------------------------------

def _pack_tensors(tensors: dict) -> bytes:
    buf = bytearray()
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        buf += arr.astype("<f4").tobytes()
    return bytes(buf)


def _unpack_tensors(r: _Reader, section: str) -> dict:
    count = r.u32(f"{section} tensor count")
    out = {}
    for k in range(count):
        name = r.utf8(f"{section} tensor {k} name length", f"{section} tensor {k} name")
        rank = r.u32(f"{name} rank")
        if rank > 8:
            raise ParseError(r.path, f"{name} rank", f"implausible rank {rank}")
        shape = tuple(r.u32(f"{name} dim {d}") for d in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        out[name] = r.f32_array(n, f"{name} data").reshape(shape)
    return out


def write_checkpoint(path, config_json: str, params: dict, opt_state: dict, counters: dict) -> None:
    """counters: mapping name -> non-negative int (step, epoch, seed, ...)."""
    cfg_raw = config_json.encode("utf-8")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", 1)
    buf += struct.pack("<I", len(cfg_raw)) + cfg_raw
    buf += _pack_tensors(params)
    buf += _pack_tensors(opt_state)
    buf += struct.pack("<I", len(counters))
    for name in sorted(counters):
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<Q", int(counters[name]))
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path):
    """Returns (config_json, params, opt_state, counters)."""
    r = _Reader(_read_bytes(path), path)
    r.magic(CHECKPOINT_MAGIC)
    r.version()
    cfg = r.utf8("config length", "config echo", width=32)
    params = _unpack_tensors(r, "parameter")
    opt_state = _unpack_tensors(r, "optimizer")
    n = r.u32("counter count")
    counters = {}
    for k in range(n):
        name = r.utf8(f"counter {k} name length", f"counter {k} name")
        counters[name] = r.u64(f"counter {name}")
    r.done()
    return cfg, params, opt_state, counters
