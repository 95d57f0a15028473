"""Binary embedding stores (PLYE pooled / PLYT token-level) and synthesis.

File layout, all little-endian, version 1:

    header:  magic 4 bytes ("PLYE" or "PLYT") | version u16 | modality u8
             | reserved u8 (0) | dim u32 | count u64
             | tag_len u16 | source_tag UTF-8 bytes
    PLYE record:  id_len u16 | id UTF-8 | dim x f32
    PLYT record:  id_len u16 | id UTF-8 | n_tokens u16
                  | per token: tok_len u16 | token UTF-8
                  | n_tokens x dim x f32

An empty pooled file with an empty source tag is exactly 22 bytes.
Values are stored as f32; all reductions here accumulate in f64.
Writes are byte-deterministic: identical inputs produce identical files.

Synthetic embeddings are pure functions of (id, modality, seed): each
vector comes from the package's counter-based SplitMix64/Box-Muller
stream keyed by hash of those three values.  A ``PlantSpec`` overwrites
the first k dimensions with character-count features of the polymer
string, scaled to unit variance across the id set, so a linear target
over those features is recoverable by any sound regressor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DuplicateIdError,
    FormatError,
    NonFinitePayloadError,
    TruncatedError,
    VersionMismatchError,
)
from .rng import Stream, derive_key

FORMAT_VERSION = 1
MAGIC_POOLED = b"PLYE"
MAGIC_TOKENS = b"PLYT"

_HEADER = struct.Struct("<4sHBBIQ")


class Modality(Enum):
    TEXT_LLM = 1
    STRUCTURE_3D = 2

    @property
    def default_dim(self) -> int:
        return 4096 if self is Modality.TEXT_LLM else 1536

    @classmethod
    def from_code(cls, code: int) -> "Modality":
        for m in cls:
            if m.value == code:
                return m
        raise FormatError(f"unknown modality code {code}")

    @classmethod
    def from_name(cls, name: str) -> "Modality":
        table = {"text": cls.TEXT_LLM, "structure": cls.STRUCTURE_3D}
        key = name.lower()
        if key not in table:
            raise DataError(f"unknown modality {name!r} (expected 'text' or 'structure')")
        return table[key]


@dataclass(frozen=True)
class EmbeddingMeta:
    modality: Modality
    dim: int
    source_tag: str = ""
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.dim <= 0:
            raise DataError(f"embedding dim must be positive, got {self.dim}")


@dataclass
class EmbeddingMatrix:
    """Pooled per-polymer vectors, one f32 row per id."""

    meta: EmbeddingMeta
    ids: list[str]
    vectors: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape != (len(self.ids), self.meta.dim):
            raise DataError(
                f"vector block shape {self.vectors.shape} does not match "
                f"{len(self.ids)} ids x dim {self.meta.dim}"
            )
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateIdError("polymer ids must be unique")
        if not np.all(np.isfinite(self.vectors)):
            raise NonFinitePayloadError("embedding vectors must be finite")
        self._index = {pid: i for i, pid in enumerate(self.ids)}

    def row(self, polymer_id: str) -> np.ndarray:
        if polymer_id not in self._index:
            raise DataError(f"no embedding for polymer id {polymer_id!r}")
        return self.vectors[self._index[polymer_id]]

    def __contains__(self, polymer_id: str) -> bool:
        return polymer_id in self._index

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class TokenRecord:
    polymer_id: str
    tokens: list[str]
    vectors: np.ndarray  # (n_tokens, dim) float32


@dataclass
class TokenEmbeddingSet:
    """Per-token vectors retained before pooling, one record per polymer."""

    meta: EmbeddingMeta
    records: list[TokenRecord]

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.polymer_id in seen:
                raise DuplicateIdError(f"duplicate polymer id {rec.polymer_id!r}")
            seen.add(rec.polymer_id)
            rec.vectors = np.ascontiguousarray(rec.vectors, dtype=np.float32)
            if len(rec.tokens) < 1:
                raise DataError(f"record {rec.polymer_id!r} has no tokens")
            if rec.vectors.shape != (len(rec.tokens), self.meta.dim):
                raise DataError(
                    f"record {rec.polymer_id!r}: vector block {rec.vectors.shape} does not "
                    f"match {len(rec.tokens)} tokens x dim {self.meta.dim}"
                )
            if not np.all(np.isfinite(rec.vectors)):
                raise NonFinitePayloadError(f"record {rec.polymer_id!r} has non-finite values")

    def record(self, polymer_id: str) -> TokenRecord:
        for rec in self.records:
            if rec.polymer_id == polymer_id:
                return rec
        raise DataError(f"no token record for polymer id {polymer_id!r}")

    def __len__(self) -> int:
        return len(self.records)


def mean_pool(vectors: np.ndarray) -> np.ndarray:
    """Arithmetic mean over token rows, accumulated in f64."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise DataError("mean_pool needs a non-empty (n_tokens, dim) array")
    return vectors.astype(np.float64).sum(axis=0) / vectors.shape[0]


# ---------------------------------------------------------------------------
# Serialization


def _pack_header(magic: bytes, meta: EmbeddingMeta, count: int) -> bytes:
    tag = meta.source_tag.encode("utf-8")
    return (
        _HEADER.pack(magic, meta.version, meta.modality.value, 0, meta.dim, count)
        + struct.pack("<H", len(tag))
        + tag
    )


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"string too long to serialize ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def string(self, what: str) -> str:
        return self.take(self.u16(what + " length"), what).decode("utf-8")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.path}: {len(self.data) - self.pos} trailing bytes after last record"
            )


def _read_meta(r: _Reader, expected_magic: bytes) -> tuple[EmbeddingMeta, int]:
    magic, version, modality_code, _reserved, dim, count = _HEADER.unpack(
        r.take(_HEADER.size, "header")
    )
    if magic != expected_magic:
        raise BadMagicError(f"{r.path}: bad magic {magic!r}, expected {expected_magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{r.path}: format version {version}, this build reads version {FORMAT_VERSION}"
        )
    tag = r.string("source tag")
    if dim == 0:
        raise FormatError(f"{r.path}: dim must be positive")
    meta = EmbeddingMeta(Modality.from_code(modality_code), dim, tag, version)
    return meta, count


def _check_payload(block: np.ndarray, path: str, what: str) -> None:
    if not np.all(np.isfinite(block)):
        raise NonFinitePayloadError(f"{path}: non-finite f32 values in {what}")


def write_matrix(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write a pooled matrix in PLYE format (deterministic bytes)."""
    chunks = [_pack_header(MAGIC_POOLED, matrix.meta, len(matrix.ids))]
    for i, pid in enumerate(matrix.ids):
        chunks.append(_pack_str(pid))
        chunks.append(matrix.vectors[i].tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_matrix(path: str | Path) -> EmbeddingMatrix:
    """Read a PLYE file, restoring every f32 bit pattern exactly."""
    r = _Reader(Path(path).read_bytes(), str(path))
    meta, count = _read_meta(r, MAGIC_POOLED)
    ids: list[str] = []
    vectors = np.empty((count, meta.dim), dtype=np.float32)
    for i in range(count):
        ids.append(r.string("record id"))
        row = np.frombuffer(r.take(4 * meta.dim, f"vector of record {i}"), dtype="<f4")
        _check_payload(row, str(path), f"record {ids[-1]!r}")
        vectors[i] = row
    r.done()
    if len(set(ids)) != len(ids):
        raise DuplicateIdError(f"{path}: duplicate polymer ids")
    return EmbeddingMatrix(meta, ids, vectors)


def write_token_set(token_set: TokenEmbeddingSet, path: str | Path) -> None:
    """Write token-level embeddings in PLYT format (deterministic bytes)."""
    chunks = [_pack_header(MAGIC_TOKENS, token_set.meta, len(token_set.records))]
    for rec in token_set.records:
        if len(rec.tokens) > 0xFFFF:
            raise DataError(f"record {rec.polymer_id!r} has too many tokens")
        chunks.append(_pack_str(rec.polymer_id))
        chunks.append(struct.pack("<H", len(rec.tokens)))
        for tok in rec.tokens:
            chunks.append(_pack_str(tok))
        chunks.append(rec.vectors.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_token_set(path: str | Path) -> TokenEmbeddingSet:
    """Read a PLYT file."""
    r = _Reader(Path(path).read_bytes(), str(path))
    meta, count = _read_meta(r, MAGIC_TOKENS)
    records: list[TokenRecord] = []
    for i in range(count):
        pid = r.string("record id")
        n_tokens = r.u16("token count")
        if n_tokens < 1:
            raise FormatError(f"{path}: record {pid!r} has zero tokens")
        tokens = [r.string("token text") for _ in range(n_tokens)]
        block = np.frombuffer(
            r.take(4 * meta.dim * n_tokens, f"vectors of record {pid!r}"), dtype="<f4"
        ).reshape(n_tokens, meta.dim)
        _check_payload(block, str(path), f"record {pid!r}")
        records.append(TokenRecord(pid, tokens, block.copy()))
    r.done()
    return TokenEmbeddingSet(meta, records)


def peek_magic(path: str | Path) -> bytes:
    head = Path(path).read_bytes()[:4]
    if head not in (MAGIC_POOLED, MAGIC_TOKENS):
        raise BadMagicError(f"{path}: bad magic {head!r}")
    return head


# ---------------------------------------------------------------------------
# Synthetic embeddings

PHI_FEATURES = (
    "count_C",
    "count_c",
    "count_F",
    "count_N",
    "count_n",
    "count_O",
    "count_double_bond",
    "count_triple_bond",
    "ring_digits",
    "branch_depth",
)

_PHI_CHARS = {
    "count_C": "C",
    "count_c": "c",
    "count_F": "F",
    "count_N": "N",
    "count_n": "n",
    "count_O": "O",
    "count_double_bond": "=",
    "count_triple_bond": "#",
}


def phi_features(psmiles: str, features: tuple[str, ...] = PHI_FEATURES) -> np.ndarray:
    """Character-count feature vector of a polymer string.

    Plain character counts for C, c, F, N, n, O, =, #; total count of
    digit characters (ring-bond labels); and maximum parenthesis
    nesting depth.
    """
    values = []
    for name in features:
        if name in _PHI_CHARS:
            values.append(float(psmiles.count(_PHI_CHARS[name])))
        elif name == "ring_digits":
            values.append(float(sum(ch.isdigit() for ch in psmiles)))
        elif name == "branch_depth":
            depth = best = 0
            for ch in psmiles:
                if ch == "(":
                    depth += 1
                    best = max(best, depth)
                elif ch == ")":
                    depth -= 1
            values.append(float(best))
        else:
            raise DataError(f"unknown plant feature {name!r}")
    return np.array(values)


@dataclass(frozen=True)
class PlantSpec:
    """Overwrite leading dims with unit-variance polymer features.

    ``psmiles`` maps each polymer id to the string the features are
    computed from.  Each selected feature column is divided by its
    population std across the id set (left unscaled when constant).
    """

    psmiles: dict[str, str]
    features: tuple[str, ...] = PHI_FEATURES

    def planted_block(self, ids: list[str]) -> np.ndarray:
        missing = [pid for pid in ids if pid not in self.psmiles]
        if missing:
            raise DataError(f"plant spec has no polymer string for ids {missing[:3]}...")
        block = np.stack([phi_features(self.psmiles[pid], self.features) for pid in ids])
        std = block.std(axis=0)
        return block / np.where(std > 0, std, 1.0)


def _record_key(polymer_id: str, modality: Modality, seed: int, label: str) -> int:
    return derive_key("embed-synth", label, polymer_id, modality.value, seed)


def synth_embeddings(
    ids: list[str],
    meta: EmbeddingMeta,
    seed: int,
    plant: PlantSpec | None = None,
) -> EmbeddingMatrix:
    """Deterministic standard-normal pooled embeddings, optionally planted.

    The vector for an id depends only on (id, modality, seed); the id
    list order affects record order, never values.
    """
    if len(set(ids)) != len(ids):
        raise DuplicateIdError("ids must be unique")
    vectors = np.empty((len(ids), meta.dim), dtype=np.float32)
    for i, pid in enumerate(ids):
        stream = Stream(_record_key(pid, meta.modality, seed, "pooled"))
        vectors[i] = stream.normal(meta.dim).astype(np.float32)
    if plant is not None:
        k = len(plant.features)
        if k > meta.dim:
            raise DataError(f"cannot plant {k} features into dim {meta.dim}")
        vectors[:, :k] = plant.planted_block(ids).astype(np.float32)
    return EmbeddingMatrix(meta, list(ids), vectors)


def synth_token_embeddings(
    items: list[tuple[str, list[str]]],
    meta: EmbeddingMeta,
    seed: int,
) -> TokenEmbeddingSet:
    """Deterministic per-token embeddings for (id, token list) pairs."""
    records = []
    for pid, tokens in items:
        stream = Stream(_record_key(pid, meta.modality, seed, "tokens"))
        block = stream.normal(len(tokens) * meta.dim).astype(np.float32)
        records.append(TokenRecord(pid, list(tokens), block.reshape(len(tokens), meta.dim)))
    return TokenEmbeddingSet(meta, records)
