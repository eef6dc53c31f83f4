"""Offline index build: member vectors, int8 compression, shard files.

Forward index (``forward.fwdx``), little-endian::

    "FWDX" | fmt u8 | dim u16 | scheme u8 (0 none, 1 int8) | count u32
    per record: uid u64 | field_version u16 | scale f32 | dim x (i8 | f32)
                nfields u16 | per field: field_id u16 | count u16 |
                                         per token: len u16 | utf-8

Inverted index (``inverted.invx``)::

    "INVX" | term count u32
    per term: len u16 | utf-8 term | uid count u32 | sorted u64 uids

Terms are ``"<field_id>:<token>"``.
"""
from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BuildError, FormatError, InputError
from .features import MemberProfile
from .splitter import MemberArmBundle, ModelVersion

FWD_MAGIC = b"FWDX"
INV_MAGIC = b"INVX"
FWD_FORMAT = 1
SCHEME_NONE = 0
SCHEME_INT8 = 1
SCHEMES = {"none": SCHEME_NONE, "int8": SCHEME_INT8}


def term_key(field_id: int, token: str) -> str:
    return f"{field_id}:{token}"


# ------------------------------------------------------------------ ingest


def ingest_members(path) -> list[MemberProfile]:
    """Read newline-delimited JSON member records; blank lines are skipped."""
    profiles, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                p = MemberProfile.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed member record ({exc})") from exc
            if not 0 <= p.uid < 2**64:
                raise InputError(f"{path}:{lineno}: uid {p.uid} does not fit in u64")
            if p.uid in seen:
                raise InputError(f"{path}:{lineno}: duplicate uid {p.uid}")
            seen.add(p.uid)
            profiles.append(p)
    return profiles


def compute_member_vectors(bundle: MemberArmBundle, profiles, batch_size=256) -> dict[int, np.ndarray]:
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    out = {}
    for start in range(0, len(profiles), batch_size):
        chunk = profiles[start:start + batch_size]
        vecs = bundle.arm.forward_batch(chunk)
        for p, v in zip(chunk, vecs):
            out[p.uid] = v
    return out


# ------------------------------------------------------------ quantization


@dataclass
class QuantizedVector:
    scale: np.float32
    values: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, QuantizedVector) and np.float32(self.scale) == np.float32(other.scale)
                and self.values.dtype == other.values.dtype and np.array_equal(self.values, other.values))


def quantize(v) -> QuantizedVector:
    """Symmetric per-vector int8: ``scale = max|v| / 127``, values rounded to nearest."""
    v = np.asarray(v, dtype=np.float32)
    if not np.all(np.isfinite(v)):
        raise InputError("cannot quantize a non-finite vector")
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0:
        return QuantizedVector(np.float32(0), np.zeros(v.shape, dtype=np.int8))
    scale = np.float32(peak / 127)
    v64 = v.astype(np.float64)
    q = np.clip(np.rint(v64 / float(scale)), -127, 127)
    # float32 rounding of scale * q can push an exact half-step just past
    # scale/2; nudge those components one step toward v
    deq = (np.float32(scale) * q.astype(np.float32)).astype(np.float64)
    bad = np.abs(deq - v64) > float(scale) / 2
    if np.any(bad):
        q[bad] += np.sign(v64[bad] - deq[bad])
        q = np.clip(q, -127, 127)
    return QuantizedVector(scale, q.astype(np.int8))


def dequantize(qv: QuantizedVector) -> np.ndarray:
    return np.float32(qv.scale) * qv.values.astype(np.float32)


def quantize_matrix(V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`quantize`; returns (scales, int8 values)."""
    pairs = [quantize(v) for v in V]
    scales = np.array([p.scale for p in pairs], dtype=np.float32)
    values = np.stack([p.values for p in pairs]) if pairs else np.zeros((0, V.shape[1]), np.int8)
    return scales, values


# ------------------------------------------------------------ index types


@dataclass
class ForwardIndexRecord:
    uid: int
    field_version: int
    vector: np.ndarray | None
    stored: dict[int, list[str]] = field(default_factory=dict)
    quantized: QuantizedVector | None = None

    @property
    def has_vector(self) -> bool:
        return self.field_version > 0


class ForwardIndex:
    """Column-oriented forward index, rows sorted by uid."""

    def __init__(self, dim, scheme, uids, versions, scales, values, stored):
        self.dim = int(dim)
        self.scheme = scheme
        self.uids = np.asarray(uids, dtype=np.uint64)
        self.versions = np.asarray(versions, dtype=np.uint16)
        self.scales = np.asarray(scales, dtype=np.float32)
        self.values = values
        self.stored = stored
        if len(self.uids) > 1 and np.any(self.uids[1:] <= self.uids[:-1]):
            raise FormatError("forward index uids must be strictly increasing")

    def __len__(self):
        return len(self.uids)

    def rows(self, uids) -> np.ndarray:
        rows = np.searchsorted(self.uids, uids)
        rows = np.minimum(rows, max(len(self.uids) - 1, 0))
        found = len(self.uids) > 0 and np.all(self.uids[rows] == uids)
        if not found:
            raise KeyError("uid not in forward index")
        return rows

    def vectors(self, rows) -> np.ndarray:
        """Dequantized float64 member vectors for the given rows."""
        if self.scheme == SCHEME_INT8:
            return np.multiply(self.values[rows], self.scales[rows][:, None], dtype=np.float64)
        return self.values[rows].astype(np.float64)

    def record(self, uid) -> ForwardIndexRecord:
        row = int(self.rows(np.array([uid], dtype=np.uint64))[0])
        vec = self.vectors(np.array([row]))[0].astype(np.float32)
        qv = QuantizedVector(self.scales[row], self.values[row].copy()) if self.scheme == SCHEME_INT8 else None
        return ForwardIndexRecord(int(uid), int(self.versions[row]), vec, self.stored[row], qv)

    def __eq__(self, other):
        return (isinstance(other, ForwardIndex) and self.dim == other.dim and self.scheme == other.scheme
                and np.array_equal(self.uids, other.uids) and np.array_equal(self.versions, other.versions)
                and self.scales.tobytes() == other.scales.tobytes()
                and self.values.dtype == other.values.dtype and self.values.tobytes() == other.values.tobytes()
                and self.stored == other.stored)


class InvertedIndex:
    def __init__(self, postings: dict[str, np.ndarray]):
        self.postings = {t: np.asarray(u, dtype=np.uint64) for t, u in postings.items()}

    def get(self, field_id: int, token: str) -> np.ndarray:
        return self.postings.get(term_key(field_id, token), _EMPTY)

    def __len__(self):
        return len(self.postings)

    def __eq__(self, other):
        return (isinstance(other, InvertedIndex) and self.postings.keys() == other.postings.keys()
                and all(np.array_equal(v, other.postings[k]) for k, v in self.postings.items()))


_EMPTY = np.zeros(0, dtype=np.uint64)


@dataclass
class ShardIndex:
    shard_id: int
    num_shards: int
    version: int
    forward: ForwardIndex
    inverted: InvertedIndex

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_forward(self.forward, directory / "forward.fwdx")
        write_inverted(self.inverted, directory / "inverted.invx")
        meta = {"shard_id": self.shard_id, "num_shards": self.num_shards, "version": self.version,
                "records": len(self.forward)}
        (directory / "shard.json").write_text(json.dumps(meta, indent=1))
        return directory


def _shard_index(shard_id, num_shards, version, members, vectors, dim, scheme) -> ShardIndex:
    members = sorted(members, key=lambda p: p.uid)
    n = len(members)
    uids = np.array([p.uid for p in members], dtype=np.uint64)
    V = np.stack([np.asarray(vectors[p.uid], dtype=np.float32) for p in members]) if n else np.zeros((0, dim), np.float32)
    if scheme == SCHEME_INT8:
        scales, values = quantize_matrix(V)
    else:
        scales, values = np.ones(n, dtype=np.float32), V
    postings = defaultdict(list)
    stored = []
    for p in members:
        stored.append({f: list(p.fields[f]) for f in sorted(p.fields)})
        for f, toks in p.fields.items():
            for t in dict.fromkeys(toks):
                postings[term_key(f, t)].append(p.uid)
    inverted = InvertedIndex({t: np.array(sorted(u), dtype=np.uint64) for t, u in sorted(postings.items())})
    forward = ForwardIndex(dim, scheme, uids, np.full(n, version, dtype=np.uint16), scales, values, stored)
    return ShardIndex(shard_id, num_shards, version, forward, inverted)


def build_shards(profiles, vectors, num_shards, version, *, quantization="int8", out_dir=None) -> list[ShardIndex]:
    """Partition members by ``uid % num_shards`` and build each shard's indexes."""
    if num_shards < 1:
        raise InputError("num_shards must be >= 1")
    if not profiles:
        raise BuildError("refusing to build an index over zero members")
    version = version.version_id if isinstance(version, ModelVersion) else int(version)
    if not 0 < version <= 0xFFFF:
        raise BuildError(f"invalid version {version}")
    try:
        scheme = SCHEMES[quantization]
    except KeyError:
        raise InputError(f"unknown quantization {quantization!r}") from None
    missing = [p.uid for p in profiles if p.uid not in vectors]
    if missing:
        raise BuildError(f"no member vector for uid {missing[0]}")
    dim = len(next(iter(vectors.values())))
    groups = defaultdict(list)
    for p in profiles:
        groups[p.uid % num_shards].append(p)
    shards = [_shard_index(s, num_shards, version, groups[s], vectors, dim, scheme) for s in range(num_shards)]
    if out_dir is not None:
        for s in shards:
            s.write(Path(out_dir) / f"shard{s.shard_id}")
    return shards


# ----------------------------------------------------------------- file I/O


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InputError(f"token too long: {s[:40]!r}...")
    return struct.pack("<H", len(raw)) + raw


def write_forward(fwd: ForwardIndex, path) -> Path:
    out = bytearray(FWD_MAGIC)
    out += struct.pack("<BHBI", FWD_FORMAT, fwd.dim, fwd.scheme, len(fwd))
    vdtype = "<i1" if fwd.scheme == SCHEME_INT8 else "<f4"
    for i in range(len(fwd)):
        out += struct.pack("<QHf", int(fwd.uids[i]), int(fwd.versions[i]), float(fwd.scales[i]))
        out += np.ascontiguousarray(fwd.values[i], dtype=vdtype).tobytes()
        stored = fwd.stored[i]
        out += struct.pack("<H", len(stored))
        for f, toks in stored.items():
            out += struct.pack("<HH", f, len(toks))
            for t in toks:
                out += _pack_str(t)
    Path(path).write_bytes(bytes(out))
    return Path(path)


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct, what):
        return st.unpack(self.take(st.size, what))

    def string(self, what):
        (n,) = self.unpack(_U16, what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: invalid UTF-8 in {what}") from exc

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_FWD_HEAD = struct.Struct("<BHBI")
_REC_HEAD = struct.Struct("<QHf")
_FIELD_HEAD = struct.Struct("<HH")


def read_forward(path) -> ForwardIndex:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4, "magic") != FWD_MAGIC:
        raise FormatError(f"{path}: bad magic, not a forward index")
    fmt, dim, scheme, count = r.unpack(_FWD_HEAD, "header")
    if fmt != FWD_FORMAT:
        raise FormatError(f"{path}: unsupported format version {fmt}")
    if scheme not in (SCHEME_NONE, SCHEME_INT8):
        raise FormatError(f"{path}: unknown quantization scheme {scheme}")
    vdtype = np.dtype("<i1") if scheme == SCHEME_INT8 else np.dtype("<f4")
    vbytes = dim * vdtype.itemsize
    uids = np.zeros(count, dtype=np.uint64)
    versions = np.zeros(count, dtype=np.uint16)
    scales = np.zeros(count, dtype=np.float32)
    values = np.zeros((count, dim), dtype=np.int8 if scheme == SCHEME_INT8 else np.float32)
    stored = []
    for i in range(count):
        uids[i], versions[i], scales[i] = r.unpack(_REC_HEAD, f"record {i} header")
        values[i] = np.frombuffer(r.take(vbytes, f"record {i} vector"), dtype=vdtype)
        (nf,) = r.unpack(_U16, f"record {i} stored fields")
        fields = {}
        for _ in range(nf):
            f, nt = r.unpack(_FIELD_HEAD, f"record {i} field header")
            fields[f] = [r.string(f"record {i} token") for _ in range(nt)]
        stored.append(fields)
    r.done()
    return ForwardIndex(dim, scheme, uids, versions, scales, values, stored)


def write_inverted(inv: InvertedIndex, path) -> Path:
    out = bytearray(INV_MAGIC)
    out += _U32.pack(len(inv.postings))
    for term in sorted(inv.postings):
        uids = inv.postings[term]
        out += _pack_str(term) + _U32.pack(len(uids)) + np.asarray(uids, dtype="<u8").tobytes()
    Path(path).write_bytes(bytes(out))
    return Path(path)


def read_inverted(path) -> InvertedIndex:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4, "magic") != INV_MAGIC:
        raise FormatError(f"{path}: bad magic, not an inverted index")
    (nterms,) = r.unpack(_U32, "term count")
    postings = {}
    for i in range(nterms):
        term = r.string(f"term {i}")
        (n,) = r.unpack(_U32, f"posting count for {term!r}")
        uids = np.frombuffer(r.take(8 * n, f"postings for {term!r}"), dtype="<u8").astype(np.uint64)
        if n > 1 and np.any(uids[1:] <= uids[:-1]):
            raise FormatError(f"{path}: postings for {term!r} are not strictly increasing")
        postings[term] = uids
    r.done()
    return InvertedIndex(postings)
