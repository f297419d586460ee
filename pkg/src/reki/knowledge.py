"""Knowledge texts to dense vectors, and their bit-exact prestorage.

Store format (little-endian): magic ``REKIVEC1``, u32 dim, u64 record count,
then records of (u16 key_len, key utf-8, u8 key_kind, dim x f32), and a
trailing u64 CRC-64 over the records region. Writes are record appends
followed by a trailer/header flush, so a completed put survives a kill.
Re-putting a key appends a superseding record; readers keep the latest.

Vectors persist as float32 (model math stays float64 and is truncated on
write). Per-kind default vectors live under the reserved key
``__default__`` and are the elementwise mean of that kind at precompute
time.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Protocol, Sequence

import numpy as np

from .errors import ClientError, StoreError
from .ioutil import crc64, pack_u16, pack_u32, pack_u64

MAGIC = b"REKIVEC1"
DEFAULT_KEY = "__default__"

KIND_CODES = {
    "user": 1,
    "item": 2,
    "user_cluster": 3,
    "item_cluster": 4,
    "user_history": 5,
    "item_desc": 6,
}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}

_HEADER_LEN = 8 + 4 + 8  # magic, dim, record count


@dataclass(frozen=True)
class KnowledgeRepresentation:
    key_kind: str
    key: str
    vector: np.ndarray  # float32, shape (m,)
    encoder_id: str
    m: int


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class TextEncoder(Protocol):
    encoder_id: str

    def encode(self, text: str) -> np.ndarray:
        """Per-token embedding matrix of shape (T, m)."""
        ...


class MockTextEncoder:
    """Deterministic stand-in encoder: whitespace/punctuation tokenizer,
    seeded feature hashing of each token into one of `buckets` rows of a
    fixed random projection, each output row L2-normalized."""

    def __init__(self, dim: int, seed: int = 0, buckets: int = 4096):
        self.dim = dim
        self.encoder_id = f"mock-hash-{dim}d-s{seed}"
        rng = np.random.default_rng(seed)
        proj = rng.normal(size=(buckets, dim))
        proj /= np.linalg.norm(proj, axis=1, keepdims=True)
        self._proj = proj
        self._buckets = buckets

    def _bucket(self, token: str) -> tuple[int, float]:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=9).digest()
        bucket = int.from_bytes(digest[:8], "little") % self._buckets
        sign = 1.0 if digest[8] & 1 else -1.0
        return bucket, sign

    def encode(self, text: str) -> np.ndarray:
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        if not tokens:
            raise ClientError("cannot encode empty text")
        rows = np.empty((len(tokens), self.dim))
        for i, tok in enumerate(tokens):
            bucket, sign = self._bucket(tok)
            rows[i] = sign * self._proj[bucket]
        return rows


class RemoteTextEncoder:
    """HTTP embedding endpoint returning one vector per text (so T = 1).

    The transport is injectable for tests; by default requests.post is used.
    """

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 dim: int | None = None, retries: int = 3, backoff: float = 0.5,
                 post=None):
        self.endpoint = endpoint
        self.model = model
        self.encoder_id = f"remote-{model}"
        self._api_key = api_key
        self._dim = dim
        self._retries = retries
        self._backoff = backoff
        if post is None:
            import requests

            post = requests.post
        self._post = post

    def encode(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ClientError("cannot encode empty text")
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        payload = {"model": self.model, "input": text}
        last_error: Exception | None = None
        for attempt in range(self._retries):
            try:
                resp = self._post(self.endpoint, json=payload, headers=headers, timeout=60)
                body = resp.json() if not isinstance(resp, dict) else resp
                vector = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
                if self._dim is not None and vector.shape[0] != self._dim:
                    raise ClientError(
                        f"embedding dim {vector.shape[0]} vs configured {self._dim}")
                return vector.reshape(1, -1)
            except ClientError:
                raise
            except Exception as exc:  # transport / schema failure: retry
                last_error = exc
                if attempt + 1 < self._retries:
                    time.sleep(self._backoff * (2 ** attempt))
        raise ClientError(f"encoder call failed after {self._retries} attempts: {last_error}")


def encode_tokens(text: str, encoder: TextEncoder) -> np.ndarray:
    """Token matrix (T, m) for non-empty text."""
    if not text or not text.strip():
        raise ClientError("cannot encode empty text")
    matrix = encoder.encode(text)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ClientError(f"encoder returned shape {matrix.shape}, expected (T, m)")
    return matrix


def aggregate(token_matrix: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Collapse a (T, m) token matrix to one m-vector: columnwise mean or row 0."""
    token_matrix = np.asarray(token_matrix, dtype=np.float64)
    if token_matrix.ndim != 2 or token_matrix.shape[0] < 1:
        raise StoreError(f"aggregate expects (T, m) with T >= 1, got {token_matrix.shape}")
    if mode == "mean":
        return token_matrix.mean(axis=0)
    if mode == "first_token":
        return token_matrix[0].copy()
    raise StoreError(f"unknown aggregation mode: {mode!r}")


def represent(text: str, key_kind: str, key: str, encoder: TextEncoder,
              mode: str = "mean") -> KnowledgeRepresentation:
    """encode -> aggregate pipeline producing a persistable representation."""
    vector = aggregate(encode_tokens(text, encoder), mode).astype(np.float32)
    return KnowledgeRepresentation(key_kind, key, vector, encoder.encoder_id, vector.shape[0])


# ---------------------------------------------------------------------------
# vector store
# ---------------------------------------------------------------------------

class VectorStore:
    """Keyed float32 vector file with an in-memory index.

    Readers and the single writer must not interleave on the same instance;
    many concurrent readers of a closed file are fine.
    """

    def __init__(self, path: Path, dim: int, fh, records_end: int, body_crc: int,
                 record_count: int, index: dict[tuple[str, str], np.ndarray]):
        self.path = path
        self.dim = dim
        self._fh = fh
        self._records_end = records_end
        self._body_crc = body_crc
        self.record_count = record_count
        self._index = index
        self.version = 0

    # -- lifecycle ----------------------------------------------------

    @classmethod
    def create(cls, path, dim: int) -> "VectorStore":
        if dim < 1:
            raise StoreError(f"store dimension must be >= 1, got {dim}")
        path = Path(path)
        fh = open(path, "w+b")
        fh.write(MAGIC)
        fh.write(pack_u32(dim))
        fh.write(pack_u64(0))
        fh.write(pack_u64(crc64(b"")))
        fh.flush()
        return cls(path, dim, fh, _HEADER_LEN, 0, 0, {})

    @classmethod
    def open(cls, path, writable: bool = False) -> "VectorStore":
        path = Path(path)
        if not path.exists():
            raise StoreError(f"vector store not found: {path}")
        raw = path.read_bytes()
        if len(raw) < _HEADER_LEN + 8 or raw[:8] != MAGIC:
            raise StoreError(f"bad magic or truncated store: {path}")
        dim = struct.unpack_from("<I", raw, 8)[0]
        record_count = struct.unpack_from("<Q", raw, 12)[0]
        body = raw[_HEADER_LEN:-8]
        stored_crc = struct.unpack("<Q", raw[-8:])[0]
        computed = crc64(body)
        if computed != stored_crc:
            raise StoreError(f"store CRC mismatch: {path}")
        index: dict[tuple[str, str], np.ndarray] = {}
        offset = 0
        rec_bytes = memoryview(body)
        parsed = 0
        while offset < len(body):
            key_len = struct.unpack_from("<H", rec_bytes, offset)[0]
            offset += 2
            key = bytes(rec_bytes[offset:offset + key_len]).decode("utf-8")
            offset += key_len
            kind_code = rec_bytes[offset]
            offset += 1
            kind = CODE_KINDS.get(kind_code)
            if kind is None:
                raise StoreError(f"unknown key kind code {kind_code} in {path}")
            vec = np.frombuffer(rec_bytes, dtype="<f4", count=dim, offset=offset).copy()
            offset += 4 * dim
            index[(kind, key)] = vec
            parsed += 1
        if parsed != record_count:
            raise StoreError(f"store record count {record_count} vs parsed {parsed}: {path}")
        fh = open(path, "r+b") if writable else None
        return cls(path, dim, fh, _HEADER_LEN + len(body), computed, record_count, index)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "VectorStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- access ---------------------------------------------------------

    @property
    def count(self) -> int:
        """Distinct keys (superseded records excluded)."""
        return len(self._index)

    def keys(self) -> list[tuple[str, str]]:
        return list(self._index)

    def get(self, key: str, kind: str) -> np.ndarray | None:
        vec = self._index.get((kind, key))
        return None if vec is None else vec.copy()

    def items(self) -> Iterator[tuple[str, str, np.ndarray]]:
        for (kind, key), vec in self._index.items():
            yield kind, key, vec.copy()

    def put(self, key: str, vector, kind: str) -> None:
        if self._fh is None:
            raise StoreError(f"store {self.path} is not open for writing")
        if kind not in KIND_CODES:
            raise StoreError(f"unknown key kind: {kind!r}")
        vector = np.asarray(vector)
        if vector.shape != (self.dim,):
            raise StoreError(f"vector shape {vector.shape} vs store dimension ({self.dim},)")
        vec32 = np.ascontiguousarray(vector, dtype="<f4")
        encoded = key.encode("utf-8")
        record = pack_u16(len(encoded)) + encoded + struct.pack("<B", KIND_CODES[kind]) \
            + vec32.tobytes()
        self._fh.seek(self._records_end)
        self._fh.write(record)
        self._records_end += len(record)
        self._body_crc = crc64(record, self._body_crc)
        self._fh.write(pack_u64(self._body_crc))
        self.record_count += 1
        self._fh.seek(12)
        self._fh.write(pack_u64(self.record_count))
        self._fh.flush()
        existed = (kind, key) in self._index
        self._index[(kind, key)] = vec32.astype(np.float32)
        if existed:
            self.version += 1

    def export_jsonl(self, path) -> None:
        """Human-readable mirror of the current contents."""
        with open(path, "w", encoding="utf-8") as fh:
            for kind, key, vec in self.items():
                fh.write(json.dumps({"key_kind": kind, "key": key,
                                     "vector": [float(v) for v in vec]}) + "\n")


def store_put(store: VectorStore, key: str, vector, kind: str) -> None:
    store.put(key, vector, kind)


def store_get(store: VectorStore, key: str, kind: str) -> np.ndarray | None:
    return store.get(key, kind)


# ---------------------------------------------------------------------------
# default vectors
# ---------------------------------------------------------------------------

def compute_defaults(store: VectorStore) -> dict[str, np.ndarray]:
    """Write the per-kind elementwise mean under the reserved default key."""
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for kind, key, vec in store.items():
        if key == DEFAULT_KEY:
            continue
        sums[kind] = sums.get(kind, np.zeros(store.dim)) + vec.astype(np.float64)
        counts[kind] = counts.get(kind, 0) + 1
    defaults = {}
    for kind, total in sums.items():
        mean = (total / counts[kind]).astype(np.float32)
        store.put(DEFAULT_KEY, mean, kind)
        defaults[kind] = mean
    return defaults


def default_vector(store: VectorStore | None, kind: str, m: int) -> np.ndarray:
    """The stored per-kind default, or zeros before any precompute."""
    if store is not None:
        stored = store.get(DEFAULT_KEY, kind)
        if stored is not None:
            return stored
    return np.zeros(m, dtype=np.float32)


# ---------------------------------------------------------------------------
# PCA reduction
# ---------------------------------------------------------------------------

@dataclass
class PcaResult:
    components: np.ndarray        # (m, target) orthonormal columns, sign-fixed
    mean: np.ndarray              # (m,)
    eigenvalues: np.ndarray       # (target,) descending
    total_variance: float

    @property
    def retained_variance(self) -> float:
        return float(self.eigenvalues.sum() / self.total_variance) if self.total_variance else 1.0


def _power_iteration_eigs(cov: np.ndarray, k: int, seed: int = 0,
                          max_iters: int = 10000) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs by power iteration with deflation; components are
    re-orthogonalized against those already found on every step."""
    m = cov.shape[0]
    rng = np.random.default_rng(seed)
    work = cov.copy()
    scale = float(np.trace(cov)) / max(m, 1)
    components = np.zeros((m, k))
    eigenvalues = np.zeros(k)
    for j in range(k):
        v = rng.normal(size=m)
        v /= np.linalg.norm(v)
        lam_prev = np.inf
        for _ in range(max_iters):
            v = work @ v
            if j:
                v -= components[:, :j] @ (components[:, :j].T @ v)
            norm = np.linalg.norm(v)
            if norm <= 1e-300:
                break
            v /= norm
            lam = float(v @ (work @ v))
            if abs(lam - lam_prev) <= 1e-14 * max(abs(lam), scale, 1e-30):
                break
            lam_prev = lam
        lam = float(v @ (cov @ v))
        if lam <= max(1e-10 * eigenvalues[0] if j else 0.0, 1e-12 * max(scale, 1e-30)):
            raise StoreError(f"data rank {j} is below the requested {k} components")
        peak = int(np.argmax(np.abs(v)))
        if v[peak] < 0:
            v = -v
        components[:, j] = v
        eigenvalues[j] = lam
        work -= lam * np.outer(v, v)
    return components, eigenvalues


def reduce_dim(store: VectorStore, target_dim: int, out_path, seed: int = 0) -> tuple[VectorStore, PcaResult]:
    """PCA-project a store to `target_dim`, writing the reduced store plus a
    sidecar (.proj.npz + .proj.json) recording the projection provenance.

    target_dim == dim is allowed as the degenerate full-rank rotation; data
    already expressed in its own principal axes passes through unchanged.
    """
    if target_dim < 1 or target_dim > store.dim:
        raise StoreError(f"target dim {target_dim} must be in [1, {store.dim}]")
    entries = [(kind, key, vec) for kind, key, vec in store.items() if key != DEFAULT_KEY]
    if len(entries) < target_dim:
        raise StoreError(f"need at least {target_dim} vectors, store has {len(entries)}")
    matrix = np.stack([vec.astype(np.float64) for _, _, vec in entries])
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    cov = centered.T @ centered / max(len(entries) - 1, 1)
    components, eigenvalues = _power_iteration_eigs(cov, target_dim, seed=seed)
    total_variance = float(np.trace(cov))
    projected = centered @ components

    out_path = Path(out_path)
    reduced = VectorStore.create(out_path, target_dim)
    for (kind, key, _), row in zip(entries, projected):
        reduced.put(key, row.astype(np.float32), kind)
    had_defaults = any(key == DEFAULT_KEY for _, key, _ in store.items())
    if had_defaults:
        compute_defaults(reduced)
    result = PcaResult(components, mean, eigenvalues, total_variance)
    np.savez(str(out_path) + ".proj.npz", components=components, mean=mean,
             eigenvalues=eigenvalues)
    manifest = {
        "source": str(store.path),
        "source_dim": store.dim,
        "target_dim": target_dim,
        "vectors": len(entries),
        "retained_variance": result.retained_variance,
    }
    Path(str(out_path) + ".proj.json").write_text(json.dumps(manifest, indent=2))
    return reduced, result
