"""Query-side token embedding dictionary.

Holds the query arm's input embedding rows keyed by ``(field_id, token)``
so the frontend can evaluate the query arm without the full model.  Only
the top-K most frequent tokens per field are kept; :func:`coverage`
measures what that truncation costs on a query log.
"""
from __future__ import annotations

import logging
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .splitter import ModelVersion, QueryArmBundle

logger = logging.getLogger(__name__)

MAGIC = b"EMBD"
FORMAT_VERSION = 1
DEFAULT_SIZE_BUDGET = 256 * 1024 * 1024


class EmbeddingDictionary:
    def __init__(self, version: ModelVersion | int, dims: Mapping[int, int],
                 entries: Mapping[int, Mapping[str, np.ndarray]]):
        self.version = version if isinstance(version, ModelVersion) else ModelVersion(version)
        self.dims = {int(f): int(d) for f, d in dims.items()}
        self.entries = {}
        for f, table in entries.items():
            dim = self.dims[f]
            checked = {}
            for tok, vec in table.items():
                vec = np.asarray(vec, dtype=np.float32)
                if vec.shape != (dim,):
                    raise InputError(f"field {f} token {tok!r}: vector shape {vec.shape}, expected ({dim},)")
                checked[tok] = vec
            self.entries[int(f)] = checked

    def __len__(self):
        return sum(len(t) for t in self.entries.values())

    def field_size(self, field_id: int) -> int:
        return len(self.entries.get(field_id, {}))

    def lookup(self, field_id: int, token: str):
        """Stored vector, or None on a miss."""
        return self.entries.get(field_id, {}).get(token)

    def serialized_size(self) -> int:
        size = 4 + 1 + 2 + 2
        for f, table in self.entries.items():
            size += 2 + 2 + 4
            size += sum(2 + len(t.encode("utf-8")) + 4 * self.dims[f] for t in table)
        return size

    def __eq__(self, other):
        if not isinstance(other, EmbeddingDictionary):
            return NotImplemented
        if self.version != other.version or self.dims != other.dims or self.entries.keys() != other.entries.keys():
            return False
        for f, table in self.entries.items():
            o = other.entries[f]
            if table.keys() != o.keys():
                return False
            if any(table[t].tobytes() != o[t].tobytes() for t in table):
                return False
        return True


def lookup(dictionary: EmbeddingDictionary, field_id: int, token: str):
    return dictionary.lookup(field_id, token)


def build_dictionary(bundle: QueryArmBundle, top_k, frequency: Mapping[int, Mapping[str, int]],
                     token_table: Mapping[int, Mapping[str, int]] | None = None,
                     size_budget: int = DEFAULT_SIZE_BUDGET) -> EmbeddingDictionary:
    """Copy the embedding rows of the ``top_k`` most frequent tokens per field.

    ``top_k`` is an int applied to every field or a per-field mapping.  Ties
    in frequency break by token string.  ``token_table`` defaults to the
    bundle's vocabulary.
    """
    arm = bundle.arm
    if token_table is None:
        if arm.vocab is None:
            raise InputError("bundle has no vocabulary; pass token_table")
        token_table = {f: {t: i for i, t in enumerate(arm.vocab.tokens(f))} for f in arm.spec.field_ids}
    dims, entries = {}, {}
    for fs in arm.spec.fields:
        f = fs.field_id
        k = top_k.get(f, 0) if isinstance(top_k, Mapping) else int(top_k)
        if k < 0:
            raise InputError("top_k must be >= 0")
        table = arm.params[f"emb/{f}"]
        ids = token_table.get(f, {})
        for tok, i in ids.items():
            if not 0 <= i < fs.vocab_size:
                raise InputError(f"field {f} token {tok!r}: id {i} outside vocab of {fs.vocab_size}")
        freq = frequency.get(f, {})
        ranked = sorted(ids, key=lambda t: (-freq.get(t, 0), t))[:k]
        dims[f] = fs.embed_dim
        entries[f] = {t: table[ids[t]].copy() for t in ranked}
    d = EmbeddingDictionary(bundle.version, dims, entries)
    size = d.serialized_size()
    if size > size_budget:
        logger.warning("embedding dictionary is %d bytes, over the %d byte budget", size, size_budget)
    return d


def coverage(dictionary: EmbeddingDictionary, query_log) -> float:
    """Fraction of (field, token) occurrences in the log that lookup resolves."""
    query_log = list(query_log)
    if not query_log:
        raise InputError("coverage needs a non-empty query log")
    total = hits = 0
    for q in query_log:
        inputs = q.model_inputs() if hasattr(q, "model_inputs") else q
        for f, toks in inputs.items():
            for t in toks:
                total += 1
                hits += dictionary.lookup(f, t) is not None
    return hits / total if total else 0.0


# -------------------------------------------------------------- binary I/O


def save_dictionary(dictionary: EmbeddingDictionary, path) -> Path:
    path = Path(path)
    out = bytearray(MAGIC)
    out += struct.pack("<BHH", FORMAT_VERSION, dictionary.version.version_id, len(dictionary.dims))
    for f in sorted(dictionary.dims):
        table = dictionary.entries.get(f, {})
        dim = dictionary.dims[f]
        out += struct.pack("<HHI", f, dim, len(table))
        for tok, vec in table.items():
            raw = tok.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
            out += np.asarray(vec, dtype="<f4").tobytes()
    path.write_bytes(bytes(out))
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_dictionary(path) -> EmbeddingDictionary:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not an embedding dictionary")
    fmt, version_id, nfields = r.unpack("<BHH", "header")
    if fmt != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {fmt}")
    if version_id == 0:
        raise FormatError(f"{path}: version_id 0 is reserved")
    dims, entries = {}, {}
    for _ in range(nfields):
        f, dim, count = r.unpack("<HHI", "field header")
        table = {}
        for i in range(count):
            (n,) = r.unpack("<H", f"token length (field {f}, entry {i})")
            try:
                tok = r.take(n, "token").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"{path}: token {i} of field {f} is not UTF-8") from exc
            table[tok] = np.frombuffer(r.take(4 * dim, f"vector for {tok!r}"), dtype="<f4").astype(np.float32)
        dims[f] = dim
        entries[f] = table
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return EmbeddingDictionary(ModelVersion(version_id), dims, entries)
