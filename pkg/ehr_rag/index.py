"""
Evidence index

Splits serialized textual events into overlapping row-count chunks, embeds them
through a pluggable provider, and serves exhaustive cosine-similarity search
within one patient's history.
"""

import hashlib
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np
import requests

from ehr_rag import config, utils
from ehr_rag.core_model import PatientRecord, history_before
from ehr_rag.errors import DataError, ParameterError, ProviderError
from ehr_rag.ingest import serialize_event

logger = logging.getLogger(__name__)

_LINE_TIMESTAMP = re.compile(r"^\[([^\]]+)\]")
_TOKEN = re.compile(r"[a-z0-9_]+")


# ============================================================================
# EMBEDDING PROVIDERS
# ============================================================================

@runtime_checkable
class EmbeddingProvider(Protocol):
    dimension: int
    deterministic: bool

    @property
    def fingerprint(self) -> str:
        ...

    def embed(self, text: str) -> np.ndarray:
        ...


class HashingEmbeddingProvider:
    """
    Deterministic bag-of-tokens embedder

    Each lower-cased word token is hashed into one of `dimension` buckets; the
    count vector is L2-normalized. Texts sharing tokens get positive similarity,
    which lets tests plant evidence by token overlap.
    """

    deterministic = True

    def __init__(self, dimension: int = config.DEFAULT_EMBEDDING_DIMENSION):
        if dimension < 1:
            raise ParameterError("embedding dimension must be >= 1")
        self.dimension = dimension

    @property
    def fingerprint(self) -> str:
        return f"hashing-blake2b-{self.dimension}"

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dimension

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimension, dtype=np.float64)
        for token in _TOKEN.findall(text.lower()):
            vector[self._bucket(token)] += 1.0
        norm = np.linalg.norm(vector)
        if norm > 0:
            vector /= norm
        return vector


class HttpEmbeddingProvider:
    """
    Embeddings from an HTTP endpoint following the common embeddings wire format

    POST {"model": ..., "input": text} -> {"data": [{"embedding": [...]}]}
    """

    deterministic = False

    def __init__(
        self,
        endpoint: str,
        dimension: int,
        model: Optional[str] = None,
        api_key_env: Optional[str] = None,
        timeout: float = config.DEFAULT_HTTP_TIMEOUT_SECONDS,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.dimension = dimension
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.session = session or requests.Session()

    @property
    def fingerprint(self) -> str:
        return f"http:{self.endpoint}:{self.model}:{self.dimension}"

    def embed(self, text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env and os.environ.get(self.api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[self.api_key_env]}"
        try:
            response = self.session.post(
                self.endpoint,
                json={"model": self.model, "input": text},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise ProviderError(f"Embedding request failed: {e}") from e

        if response.status_code >= 400:
            retriable = response.status_code == 429 or response.status_code >= 500
            raise ProviderError(f"Embedding endpoint returned HTTP {response.status_code}", retriable=retriable)

        try:
            vector = np.asarray(response.json()["data"][0]["embedding"], dtype=np.float64)
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise ProviderError(f"Malformed embedding response: {e}", retriable=False) from e

        if vector.shape != (self.dimension,):
            raise ProviderError(
                f"Embedding has dimension {vector.shape}, expected {self.dimension}", retriable=False
            )
        return vector


class CachingEmbeddingProvider:
    """
    Wraps a non-deterministic provider so repeated texts reuse the first vector
    """

    deterministic = True

    def __init__(self, inner: EmbeddingProvider):
        self.inner = inner
        self.dimension = inner.dimension
        self._cache: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def fingerprint(self) -> str:
        return f"cached:{self.inner.fingerprint}"

    def embed(self, text: str) -> np.ndarray:
        with self._lock:
            cached = self._cache.get(text)
        if cached is not None:
            return cached
        vector = self.inner.embed(text)
        with self._lock:
            return self._cache.setdefault(text, vector)


def ensure_deterministic(provider: EmbeddingProvider) -> EmbeddingProvider:
    if getattr(provider, "deterministic", False):
        return provider
    return CachingEmbeddingProvider(provider)


def build_embedding_provider(settings: config.EmbeddingConfig) -> EmbeddingProvider:
    if settings.provider == "http":
        return CachingEmbeddingProvider(
            HttpEmbeddingProvider(
                endpoint=settings.endpoint,
                dimension=settings.dimension,
                model=settings.model,
                api_key_env=settings.api_key_env,
                timeout=settings.timeout_seconds,
            )
        )
    return HashingEmbeddingProvider(dimension=settings.dimension)


# ============================================================================
# CHUNKS AND INDEX
# ============================================================================

@dataclass(frozen=True)
class EvidenceChunk:
    """
    A window of serialized event lines

    row_span is 1-based and inclusive; time_span is (earliest, latest) event
    time. tau_c, the chunk's time for temporal scoring, is the latest time.
    """

    chunk_id: str
    subject_id: str
    row_span: Tuple[int, int]
    time_span: Tuple[datetime, datetime]
    text: str
    embedding: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def tau_c(self) -> datetime:
        return self.time_span[1]

    @property
    def row_count(self) -> int:
        return self.row_span[1] - self.row_span[0] + 1


@dataclass(frozen=True)
class VectorIndex:
    subject_id: str
    chunks: Tuple[EvidenceChunk, ...]
    provider_fingerprint: str
    dimension: int
    chunk_size: int
    overlap: int
    cutoff: Optional[datetime] = None
    first_event_time: Optional[datetime] = None

    def __post_init__(self):
        ids = [chunk.chunk_id for chunk in self.chunks]
        if len(set(ids)) != len(ids):
            raise DataError(f"Index for {self.subject_id} has duplicate chunk ids")
        for chunk in self.chunks:
            if chunk.embedding is None or chunk.embedding.shape != (self.dimension,):
                raise DataError(f"Chunk {chunk.chunk_id} embedding does not match dimension {self.dimension}")

    def __len__(self) -> int:
        return len(self.chunks)


def chunk_spans(n_rows: int, chunk_size: int, overlap: int) -> List[Tuple[int, int]]:
    """
    1-based inclusive row spans for overlapping chunks

    Chunk k starts at 1 + k*(chunk_size - overlap); the last chunk always ends
    at row n_rows.

    Raises:
        ParameterError: invalid sizes or no rows
    """
    if chunk_size < 1:
        raise ParameterError("chunk_size must be >= 1")
    if not 0 <= overlap < chunk_size:
        raise ParameterError(f"overlap must satisfy 0 <= overlap < chunk_size (got {overlap}, {chunk_size})")
    if n_rows < 1:
        raise ParameterError("cannot chunk an empty line list")

    stride = chunk_size - overlap
    spans = []
    start = 1
    while True:
        end = min(start + chunk_size - 1, n_rows)
        spans.append((start, end))
        if end == n_rows:
            return spans
        start += stride


def chunk_events(lines: Sequence[str], chunk_size: int, overlap: int, subject_id: str = "") -> List[EvidenceChunk]:
    """
    Split serialized event lines into overlapping chunks (not yet embedded)

    Each line must begin with its "[timestamp]" prefix; chunk time spans are
    read from it.

    Args:
        lines: Chronological serialized event lines
        chunk_size: Rows per chunk
        overlap: Rows shared by consecutive chunks
        subject_id: Owner of the lines, mixed into chunk ids

    Returns:
        Ordered chunks with embedding=None
    """
    spans = chunk_spans(len(lines), chunk_size, overlap)
    times = [_line_time(line, position) for position, line in enumerate(lines)]

    chunks = []
    for start, end in spans:
        window = lines[start - 1:end]
        window_times = times[start - 1:end]
        text = "\n".join(window)
        chunks.append(
            EvidenceChunk(
                chunk_id=utils.stable_hash(subject_id, start, end, text),
                subject_id=subject_id,
                row_span=(start, end),
                time_span=(min(window_times), max(window_times)),
                text=text,
            )
        )
    return chunks


def _line_time(line: str, position: int) -> datetime:
    match = _LINE_TIMESTAMP.match(line)
    if not match:
        raise ParameterError(f"line {position + 1} has no [timestamp] prefix")
    try:
        return utils.parse_timestamp(match.group(1))
    except ValueError as e:
        raise ParameterError(f"line {position + 1}: {e}") from e


def cosine_similarity(u: Union[np.ndarray, Sequence[float]], v: Union[np.ndarray, Sequence[float]]) -> float:
    """
    Cosine similarity u.v / (|u||v|)

    A zero vector has similarity 0 with anything (logged as a diagnostic).

    Raises:
        ParameterError: dimension mismatch
    """
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"dimension mismatch: {a.shape} vs {b.shape}")

    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        logger.debug("Cosine similarity with a zero vector defined as 0")
        return 0.0

    value = float(np.dot(a, b) / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))


def build_index(
    record: PatientRecord,
    cutoff: Union[datetime, str],
    provider: EmbeddingProvider,
    chunk_size: int = config.DEFAULT_CHUNK_SIZE,
    overlap: int = config.DEFAULT_CHUNK_OVERLAP,
    max_in_flight: int = 1,
    include_numeric: bool = False,
) -> VectorIndex:
    """
    Build the per-patient vector index over textual history

    Numeric measurements are excluded (they go to the indicator path) unless
    include_numeric is set.

    Args:
        record: Validated record
        cutoff: Prediction time; later events are never indexed
        provider: Embedding provider
        chunk_size: Rows per chunk
        overlap: Rows shared by consecutive chunks
        max_in_flight: Concurrent embedding calls
        include_numeric: Chunk numeric events together with the text

    Returns:
        VectorIndex (possibly empty)

    Raises:
        ProviderError: embedding failure, carrying the chunk id
    """
    provider = ensure_deterministic(provider)
    cutoff_time = utils.parse_timestamp(cutoff)
    history = history_before(record, cutoff_time)
    textual = [e for e in history if include_numeric or not e.is_numeric]

    index_args = dict(
        subject_id=record.subject_id,
        provider_fingerprint=provider.fingerprint,
        dimension=provider.dimension,
        chunk_size=chunk_size,
        overlap=overlap,
        cutoff=cutoff_time,
        first_event_time=history[0].timestamp if history else None,
    )
    if not textual:
        return VectorIndex(chunks=(), **index_args)

    lines = [serialize_event(e) for e in textual]
    pending = chunk_events(lines, chunk_size, overlap, subject_id=record.subject_id)

    def _embed(chunk: EvidenceChunk) -> EvidenceChunk:
        try:
            vector = np.asarray(provider.embed(chunk.text), dtype=np.float64)
        except ProviderError as e:
            raise ProviderError(f"Embedding failed for chunk {chunk.chunk_id}: {e}", chunk_id=chunk.chunk_id,
                                retriable=e.retriable) from e
        except Exception as e:
            raise ProviderError(f"Embedding failed for chunk {chunk.chunk_id}: {e}", chunk_id=chunk.chunk_id) from e
        return EvidenceChunk(
            chunk_id=chunk.chunk_id,
            subject_id=chunk.subject_id,
            row_span=chunk.row_span,
            time_span=chunk.time_span,
            text=chunk.text,
            embedding=vector,
        )

    if max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            embedded = list(pool.map(_embed, pending))
    else:
        embedded = [_embed(chunk) for chunk in pending]

    return VectorIndex(chunks=tuple(embedded), **index_args)


def search_semantic(
    index: VectorIndex, query_text: str, k: int, provider: EmbeddingProvider
) -> List[Tuple[EvidenceChunk, float]]:
    """
    Exhaustive top-k cosine search

    Ties are broken by earlier tau_c, then chunk_id.

    Returns:
        List of (chunk, s_sem), best first, length min(k, |index|)
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    if not index.chunks:
        return []

    query_vector = ensure_deterministic(provider).embed(query_text)
    scored = [(chunk, cosine_similarity(query_vector, chunk.embedding)) for chunk in index.chunks]
    scored.sort(key=lambda item: (-item[1], item[0].tau_c, item[0].chunk_id))
    return scored[:k]


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_index(index: VectorIndex, out_dir: str) -> Path:
    """
    Persist an index: manifest.json, chunks.jsonl and embeddings.f32

    Embeddings are stored row by row as little-endian float32.
    """
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    manifest = {
        "subject_id": index.subject_id,
        "provider_fingerprint": index.provider_fingerprint,
        "dimension": index.dimension,
        "chunk_size": index.chunk_size,
        "overlap": index.overlap,
        "cutoff": utils.format_timestamp(index.cutoff) if index.cutoff else None,
        "first_event_time": utils.format_timestamp(index.first_event_time) if index.first_event_time else None,
        "chunk_count": len(index.chunks),
    }
    (out_path / config.INDEX_MANIFEST_FILENAME).write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                                          encoding="utf-8")

    with open(out_path / "chunks.jsonl", "w", encoding="utf-8") as handle:
        for chunk in index.chunks:
            handle.write(json.dumps({
                "chunk_id": chunk.chunk_id,
                "row_span": list(chunk.row_span),
                "time_span": [utils.format_timestamp(t) for t in chunk.time_span],
                "text": chunk.text,
            }) + "\n")

    matrix = np.zeros((len(index.chunks), index.dimension), dtype="<f4")
    for row, chunk in enumerate(index.chunks):
        matrix[row] = chunk.embedding
    (out_path / "embeddings.f32").write_bytes(matrix.tobytes())
    return out_path


def load_index(index_dir: str) -> VectorIndex:
    """Load an index written by save_index"""
    index_path = Path(index_dir)
    manifest_path = index_path / config.INDEX_MANIFEST_FILENAME
    if not manifest_path.exists():
        raise DataError(f"No index manifest in {index_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    dimension = int(manifest["dimension"])
    raw = np.frombuffer((index_path / "embeddings.f32").read_bytes(), dtype="<f4")
    matrix = raw.reshape(-1, dimension) if dimension else raw

    chunks = []
    with open(index_path / "chunks.jsonl", encoding="utf-8") as handle:
        for row, line in enumerate(l for l in handle if l.strip()):
            payload = json.loads(line)
            chunks.append(EvidenceChunk(
                chunk_id=payload["chunk_id"],
                subject_id=manifest["subject_id"],
                row_span=tuple(payload["row_span"]),
                time_span=tuple(utils.parse_timestamp(t) for t in payload["time_span"]),
                text=payload["text"],
                embedding=matrix[row].astype(np.float64),
            ))

    return VectorIndex(
        subject_id=manifest["subject_id"],
        chunks=tuple(chunks),
        provider_fingerprint=manifest["provider_fingerprint"],
        dimension=dimension,
        chunk_size=int(manifest["chunk_size"]),
        overlap=int(manifest["overlap"]),
        cutoff=utils.parse_timestamp(manifest["cutoff"]) if manifest.get("cutoff") else None,
        first_event_time=(utils.parse_timestamp(manifest["first_event_time"])
                          if manifest.get("first_event_time") else None),
    )
