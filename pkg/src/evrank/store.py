"""Candidate pools, query manifests, embedding files, and coarse top-K retrieval.

Manifests are line-delimited JSON (UTF-8). Embedding files are a small binary
format: magic ``VRE1``, little-endian u32 dim, u32 count, ``dim * count``
little-endian float32 values (row-major), then a u32 CRC32 of the float
payload. First-stage scores are cosine similarity (assumed throughout),
computed with 64-bit accumulation over the 32-bit stored vectors.
"""

from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

EMBEDDING_MAGIC = b"VRE1"
_HEADER = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


class ManifestError(ValueError):
    """A manifest line is malformed or inconsistent with its modality."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmbeddingFormatError(ValueError):
    """An embedding file violates the binary format or carries bad values."""


class Modality(str, enum.Enum):
    TEXT = "text"
    IMAGE = "image"
    TEXT_IMAGE = "text-image"


@dataclass
class Candidate:
    """One retrievable item: id, payload references, optional embedding row."""

    id: str
    modality: Modality
    text: str | None = None
    image_ref: str | None = None
    embedding_row: int | None = None

    @property
    def has_image(self) -> bool:
        return self.image_ref is not None


@dataclass
class Query:
    id: str
    modality: Modality
    text: str | None = None
    image_refs: tuple[str, ...] = ()
    gt_candidate_ids: frozenset[str] = frozenset()
    embedding_row: int | None = None
    embedding: np.ndarray | None = None


@dataclass(frozen=True)
class RetrievalHit:
    candidate_id: str
    score: float


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense float32 matrix, one row per vector; values must be finite."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.dtype != np.float32:
            raise EmbeddingFormatError("embedding matrix must be 2-D float32")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise EmbeddingFormatError("embedding matrix must be non-empty")
        if not np.isfinite(v).all():
            raise EmbeddingFormatError("embedding matrix contains NaN or Inf")

    @property
    def count(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


def _modality_from(record: dict, line: int) -> Modality:
    raw = record.get("modality")
    try:
        return Modality(raw)
    except ValueError:
        raise ManifestError(f"unknown modality {raw!r}", line) from None


def _check_payload(modality: Modality, text: str | None, has_images: bool, line: int):
    # Field presence must match the declared modality exactly.
    if modality is Modality.TEXT and (not text or has_images):
        raise ManifestError("text modality requires text and forbids images", line)
    if modality is Modality.IMAGE and (text or not has_images):
        raise ManifestError("image modality requires an image and forbids text", line)
    if modality is Modality.TEXT_IMAGE and (not text or not has_images):
        raise ManifestError("text-image modality requires both text and an image", line)


def _id_from(record: dict, line: int) -> str:
    rid = record.get("id")
    if not isinstance(rid, str) or not rid:
        raise ManifestError("record is missing a nonempty string id", line)
    return rid


def _row_from(record: dict, line: int) -> int | None:
    row = record.get("embedding_row")
    if row is None:
        return None
    if not isinstance(row, int) or isinstance(row, bool) or row < 0:
        raise ManifestError("embedding_row must be a nonnegative integer", line)
    return row


def _iter_lines(source) -> Iterable[tuple[int, str]]:
    for lineno, raw in enumerate(source, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        if raw.strip():
            yield lineno, raw


def ingest_manifest(source: IO | Iterable) -> "Pool":
    """Parse a candidate manifest stream into a Pool, validating each record.

    Raises ManifestError with the offending line number on malformed JSON,
    duplicate ids, or modality/field mismatches.
    """
    candidates: list[Candidate] = []
    seen: set[str] = set()
    for lineno, raw in _iter_lines(source):
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise ManifestError("record must be a JSON object", lineno)
        rid = _id_from(record, lineno)
        if rid in seen:
            raise ManifestError(f"duplicate candidate id {rid!r}", lineno)
        seen.add(rid)
        modality = _modality_from(record, lineno)
        text = record.get("text")
        image_ref = record.get("image_ref")
        if image_ref is not None and not isinstance(image_ref, str):
            raise ManifestError("image_ref must be a string path", lineno)
        _check_payload(modality, text, image_ref is not None, lineno)
        candidates.append(
            Candidate(
                id=rid,
                modality=modality,
                text=text,
                image_ref=image_ref,
                embedding_row=_row_from(record, lineno),
            )
        )
    return Pool(candidates=candidates)


def load_query_manifest(source: IO | Iterable) -> list[Query]:
    """Parse a query manifest stream. Queries use plural ``image_refs``."""
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, raw in _iter_lines(source):
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise ManifestError("record must be a JSON object", lineno)
        rid = _id_from(record, lineno)
        if rid in seen:
            raise ManifestError(f"duplicate query id {rid!r}", lineno)
        seen.add(rid)
        if "image_ref" in record:
            raise ManifestError("query records use image_refs (a list)", lineno)
        modality = _modality_from(record, lineno)
        refs = record.get("image_refs") or []
        if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
            raise ManifestError("image_refs must be a list of string paths", lineno)
        text = record.get("text")
        _check_payload(modality, text, bool(refs), lineno)
        gt = record.get("gt_candidate_ids") or []
        if not isinstance(gt, list) or not all(isinstance(g, str) for g in gt):
            raise ManifestError("gt_candidate_ids must be a list of ids", lineno)
        queries.append(
            Query(
                id=rid,
                modality=modality,
                text=text,
                image_refs=tuple(refs),
                gt_candidate_ids=frozenset(gt),
                embedding_row=_row_from(record, lineno),
            )
        )
    return queries


def load_embeddings(source: IO) -> EmbeddingMatrix:
    """Read a VRE1 binary embedding file, verifying layout and checksum."""
    data = source.read()
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError("file too short for header")
    magic, dim, count = _HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if dim < 1 or count < 1:
        raise EmbeddingFormatError("dim and count must be positive")
    payload_len = 4 * dim * count
    expected = _HEADER.size + payload_len + _CRC.size
    if len(data) < expected:
        raise EmbeddingFormatError(
            f"truncated payload: have {len(data)} bytes, need {expected}"
        )
    if len(data) > expected:
        raise EmbeddingFormatError("trailing data after checksum")
    payload = data[_HEADER.size : _HEADER.size + payload_len]
    (crc,) = _CRC.unpack_from(data, _HEADER.size + payload_len)
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != actual:
        raise EmbeddingFormatError(f"checksum mismatch: header {crc}, payload {actual}")
    values = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    if not np.isfinite(values).all():
        raise EmbeddingFormatError("embedding payload contains NaN or Inf")
    return EmbeddingMatrix(values=values)


def write_embeddings(matrix: EmbeddingMatrix, sink: IO):
    payload = matrix.values.astype("<f4").tobytes(order="C")
    sink.write(_HEADER.pack(EMBEDDING_MAGIC, matrix.dim, matrix.count))
    sink.write(payload)
    sink.write(_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))


@dataclass
class Pool:
    """Candidates in ingestion order, addressable by id.

    Retrieval requires attach_embeddings() first; rows must map one-to-one
    onto candidates.
    """

    candidates: list[Candidate]
    _by_id: dict[str, Candidate] = field(init=False, repr=False)
    _aligned64: np.ndarray | None = field(init=False, default=None, repr=False)
    _norms64: np.ndarray | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        self._by_id = {c.id: c for c in self.candidates}

    def __len__(self) -> int:
        return len(self.candidates)

    def __contains__(self, candidate_id: str) -> bool:
        return candidate_id in self._by_id

    def candidate(self, candidate_id: str) -> Candidate:
        try:
            return self._by_id[candidate_id]
        except KeyError:
            raise KeyError(f"unknown candidate id {candidate_id!r}") from None

    def window(self, candidate_ids: Sequence[str]) -> list[Candidate]:
        return [self.candidate(cid) for cid in candidate_ids]

    @property
    def has_embeddings(self) -> bool:
        return self._aligned64 is not None

    def attach_embeddings(self, matrix: EmbeddingMatrix):
        """Bind an embedding matrix, aligning rows to ingestion order."""
        if matrix.count != len(self.candidates):
            raise EmbeddingFormatError(
                f"matrix has {matrix.count} rows for {len(self.candidates)} candidates"
            )
        rows = []
        for c in self.candidates:
            if c.embedding_row is None:
                raise EmbeddingFormatError(f"candidate {c.id!r} has no embedding_row")
            if not (0 <= c.embedding_row < matrix.count):
                raise EmbeddingFormatError(
                    f"candidate {c.id!r} embedding_row {c.embedding_row} out of range"
                )
            rows.append(c.embedding_row)
        if len(set(rows)) != len(rows):
            raise EmbeddingFormatError("embedding rows are not one-to-one")
        aligned = matrix.values[np.asarray(rows, dtype=np.intp)]
        aligned64 = aligned.astype(np.float64)
        norms = np.linalg.norm(aligned64, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise EmbeddingFormatError(
                f"zero-norm embedding for candidate {self.candidates[int(zero[0])].id!r}"
            )
        self._aligned64 = aligned64
        self._norms64 = norms


def attach_query_embeddings(queries: Sequence[Query], matrix: EmbeddingMatrix):
    """Resolve each query's embedding_row against a query-side matrix."""
    if matrix.count != len(queries):
        raise EmbeddingFormatError(
            f"matrix has {matrix.count} rows for {len(queries)} queries"
        )
    rows = [q.embedding_row for q in queries]
    if any(r is None for r in rows):
        missing = next(q.id for q in queries if q.embedding_row is None)
        raise EmbeddingFormatError(f"query {missing!r} has no embedding_row")
    if any(not (0 <= r < matrix.count) for r in rows):
        raise EmbeddingFormatError("query embedding_row out of range")
    if len(set(rows)) != len(rows):
        raise EmbeddingFormatError("query embedding rows are not one-to-one")
    for q in queries:
        q.embedding = matrix.values[q.embedding_row]


def cosine_topk(query_embedding, pool: Pool, k: int) -> list[RetrievalHit]:
    """Top-k candidates by cosine similarity, ties broken by ingestion order.

    Returns min(k, len(pool)) hits with nonincreasing scores. Scores are
    computed in float64 over the float32-stored vectors, so repeated calls
    on identical inputs are bit-identical.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not pool.has_embeddings:
        raise ValueError("pool has no embeddings attached")
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    if q.shape[0] != pool._aligned64.shape[1]:
        raise ValueError(
            f"dimension mismatch: query has {q.shape[0]}, pool has "
            f"{pool._aligned64.shape[1]}"
        )
    if not np.isfinite(q).all():
        raise ValueError("query embedding contains NaN or Inf")
    qnorm = float(np.linalg.norm(q))
    if qnorm == 0.0:
        raise ValueError("query embedding has zero norm")
    scores = (pool._aligned64 @ q) / (pool._norms64 * qnorm)
    # Stable argsort on negated scores keeps ingestion order among exact ties.
    order = np.argsort(-scores, kind="stable")[: min(k, len(pool))]
    return [
        RetrievalHit(candidate_id=pool.candidates[int(i)].id, score=float(scores[int(i)]))
        for i in order
    ]
