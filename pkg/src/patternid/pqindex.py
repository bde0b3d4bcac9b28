"""Product-quantization backend: 16 subvectors of 8 dims, 128 words each.

Codebooks come from per-subspace k-means (k-means++ seeding, 25 Lloyd
iterations, farthest-point reseeding of empty clusters). Search is an
exhaustive asymmetric-distance scan: the query stays unquantized, one
16x128 table of subvector-to-centroid squared distances is built per query,
and every stored 16-byte code is scored by table lookups.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .annindex import NeighborList

M_SUBVECTORS = 16
SUB_DIM = 8
NUM_WORDS = 128
KMEANS_ITERATIONS = 25
CODE_BYTES = M_SUBVECTORS  # one u8 word index per subvector

CODEBOOK_MAGIC = b"HSPQ"
CODEBOOK_VERSION = 1
_CODEBOOK_HEADER = struct.Struct("<4sIBBBI")


class InsufficientDataError(ValueError):
    """Too few training vectors to fit the codebooks."""


class CodebookFormatError(ValueError):
    """Codebook file malformed: magic, version, geometry, or truncation."""


@dataclass
class PQCodebook:
    """Per-subspace centroids plus the training objective log."""

    centroids: np.ndarray  # (16, 128, 8) float32
    train_seed: int
    objectives: np.ndarray  # (16, 25) mean quantization error per iteration

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32).reshape(
            M_SUBVECTORS, NUM_WORDS, SUB_DIM
        )
        if not np.isfinite(self.centroids).all():
            raise ValueError("centroids must be finite")

    @property
    def m(self) -> int:
        return M_SUBVECTORS

    @property
    def sub_dim(self) -> int:
        return SUB_DIM

    @property
    def words(self) -> int:
        return NUM_WORDS


@dataclass(frozen=True)
class PQCode:
    """16 word indices, one byte each."""

    codes: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.codes, dtype=np.uint8).reshape(M_SUBVECTORS)
        if arr.max(initial=0) >= NUM_WORDS:
            raise ValueError("word indices must be < 128")
        object.__setattr__(self, "codes", arr)


def _assign(data: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row (ties to the lower index) and squared distance."""
    d2 = (
        (data * data).sum(axis=1, keepdims=True)
        - 2.0 * data @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    idx = np.argmin(d2, axis=1)
    return idx, np.maximum(d2[np.arange(len(data)), idx], 0.0)


def _kmeans_pp_seed(data: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; degenerates to uniform picks when all residual
    distances are zero (fewer distinct points than words)."""
    n = len(data)
    chosen = np.empty(NUM_WORDS, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = ((data - data[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, NUM_WORDS):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = rng.integers(n)
        chosen[i] = pick
        d2 = np.minimum(d2, ((data - data[pick]) ** 2).sum(axis=1))
    return data[chosen].copy()


def _kmeans_subspace(data: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    centroids = _kmeans_pp_seed(data, rng)
    objective = np.empty(KMEANS_ITERATIONS)
    for it in range(KMEANS_ITERATIONS):
        assign, d2 = _assign(data, centroids)
        objective[it] = d2.mean()
        counts = np.bincount(assign, minlength=NUM_WORDS)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, data)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # re-seed each empty cluster from the point currently farthest
            # from its centroid, one distinct point per cluster
            order = np.argsort(-d2, kind="stable")
            centroids[empty] = data[order[: empty.size]]
    return centroids, objective


def train_codebooks(sample, seed: int = 0) -> PQCodebook:
    """Fit the 16 sub-codebooks on a descriptor sample (pool or raw matrix).

    Deterministic for a fixed seed.

    Raises:
        InsufficientDataError: fewer than 128 training vectors.
    """
    vectors = np.asarray(getattr(sample, "vectors", sample), dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != M_SUBVECTORS * SUB_DIM:
        raise ValueError(f"expected (n, 128) training matrix, got {vectors.shape}")
    if len(vectors) < NUM_WORDS:
        raise InsufficientDataError(
            f"need at least {NUM_WORDS} training vectors, got {len(vectors)}"
        )
    centroids = np.empty((M_SUBVECTORS, NUM_WORDS, SUB_DIM), dtype=np.float32)
    objectives = np.empty((M_SUBVECTORS, KMEANS_ITERATIONS))
    for s in range(M_SUBVECTORS):
        sub = np.ascontiguousarray(vectors[:, s * SUB_DIM : (s + 1) * SUB_DIM])
        cent, obj = _kmeans_subspace(sub, np.random.default_rng([seed, s]))
        centroids[s] = cent.astype(np.float32)
        objectives[s] = obj
    return PQCodebook(centroids=centroids, train_seed=seed, objectives=objectives)


def encode_pool(cb: PQCodebook, vectors: np.ndarray) -> np.ndarray:
    """Encode a (n, 128) matrix to (n, 16) uint8 word indices."""
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, M_SUBVECTORS * SUB_DIM)
    out = np.empty((len(vectors), M_SUBVECTORS), dtype=np.uint8)
    cents = cb.centroids.astype(np.float64)
    for s in range(M_SUBVECTORS):
        sub = vectors[:, s * SUB_DIM : (s + 1) * SUB_DIM]
        idx, _ = _assign(sub, cents[s])
        out[:, s] = idx.astype(np.uint8)
    return out


def encode(cb: PQCodebook, d: np.ndarray) -> PQCode:
    """Encode one descriptor; ties go to the lower word index."""
    return PQCode(codes=encode_pool(cb, np.asarray(d).reshape(1, -1))[0])


def reconstruct(cb: PQCodebook, codes: np.ndarray) -> np.ndarray:
    """Inverse of encode up to quantization: concatenate the coded centroids."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1, M_SUBVECTORS)
    parts = [cb.centroids[s, codes[:, s]] for s in range(M_SUBVECTORS)]
    return np.concatenate(parts, axis=1).astype(np.float32)


def adc_table(cb: PQCodebook, q: np.ndarray) -> np.ndarray:
    """(16, 128) squared distances from q's subvectors to every centroid."""
    q = np.asarray(q, dtype=np.float64).reshape(M_SUBVECTORS, SUB_DIM)
    diff = cb.centroids.astype(np.float64) - q[:, None, :]
    return (diff * diff).sum(axis=2)


def pq_knn_search(cb: PQCodebook, codes: np.ndarray, q: np.ndarray, k: int) -> NeighborList:
    """Top-k over the code pool by asymmetric distance; ties break to the
    lower pool index. ``codes`` is the (n, 16) uint8 matrix from encode_pool."""
    if k < 1:
        raise ValueError("k must be >= 1")
    idx, dist = pq_knn_search_batch(cb, codes, np.asarray(q).reshape(1, -1), k)
    return NeighborList(indices=idx[0], distances_sq=dist[0])


def _code_onehot(codes: np.ndarray) -> sparse.csr_matrix:
    """(n, 16*128) one-hot rows; multiplying by flattened LUTs sums the 16
    table entries per code word in subspace order."""
    n = len(codes)
    cols = codes.astype(np.int32) + (np.arange(M_SUBVECTORS, dtype=np.int32) * NUM_WORDS)
    indptr = np.arange(0, M_SUBVECTORS * n + 1, M_SUBVECTORS, dtype=np.int64)
    data = np.ones(M_SUBVECTORS * n, dtype=np.float32)
    return sparse.csr_matrix(
        (data, cols.ravel(), indptr), shape=(n, M_SUBVECTORS * NUM_WORDS)
    )


def pq_knn_search_batch(cb: PQCodebook, codes: np.ndarray, queries: np.ndarray, k: int):
    """Vectorized ADC search for a whole query matrix; returns (indices,
    distances) arrays of shape (nq, k). Equivalent to per-row pq_knn_search."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1, M_SUBVECTORS)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, M_SUBVECTORS * SUB_DIM)
    n, nq = len(codes), len(queries)
    if n == 0:
        raise ValueError("cannot search an empty code pool")
    k = min(k, n)
    cents = cb.centroids.astype(np.float64)
    q_subs = queries.reshape(nq, M_SUBVECTORS, SUB_DIM)
    # (nq, 16, 128) tables, float32 scan to halve memory traffic
    luts = (
        (q_subs * q_subs).sum(axis=2)[:, :, None]
        - 2.0 * np.einsum("qsd,swd->qsw", q_subs, cents)
        + (cents * cents).sum(axis=2)[None, :, :]
    ).astype(np.float32)
    # one sparse product realizes all nq gather-accumulate scans at once
    onehot = _code_onehot(codes)
    lut_t = np.ascontiguousarray(luts.reshape(nq, -1).T)
    scores = np.ascontiguousarray((onehot @ lut_t).T)
    out_idx = np.empty((nq, k), dtype=np.int64)
    out_dist = np.empty((nq, k))
    for qi in range(nq):
        d32 = scores[qi]
        kth = np.partition(d32, k - 1)[k - 1]
        cand = np.flatnonzero(d32 <= kth)  # ascending, so ties go low-index
        d64 = d32[cand].astype(np.float64)
        sel = np.lexsort((cand, d64))[:k]
        out_idx[qi] = cand[sel]
        out_dist[qi] = d64[sel]
    return out_idx, out_dist


def save_codebook(path: str | Path, cb: PQCodebook) -> None:
    """Write the codebook file: "HSPQ" header then 16x128x8 f32 centroids."""
    header = _CODEBOOK_HEADER.pack(
        CODEBOOK_MAGIC, CODEBOOK_VERSION, M_SUBVECTORS, SUB_DIM, NUM_WORDS, cb.train_seed
    )
    Path(path).write_bytes(header + cb.centroids.astype("<f4").tobytes())


def load_codebook(path: str | Path) -> PQCodebook:
    """Read a codebook file, rejecting unknown magic/version/geometry.

    Raises:
        CodebookFormatError: malformed file.
    """
    data = Path(path).read_bytes()
    if len(data) < _CODEBOOK_HEADER.size:
        raise CodebookFormatError(f"{path}: truncated header")
    magic, version, m, sub_dim, words, train_seed = _CODEBOOK_HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise CodebookFormatError(f"{path}: unknown magic {magic!r}")
    if version != CODEBOOK_VERSION:
        raise CodebookFormatError(f"{path}: unsupported version {version}")
    if (m, sub_dim, words) != (M_SUBVECTORS, SUB_DIM, NUM_WORDS):
        raise CodebookFormatError(f"{path}: unexpected geometry {(m, sub_dim, words)}")
    expected = _CODEBOOK_HEADER.size + M_SUBVECTORS * NUM_WORDS * SUB_DIM * 4
    if len(data) != expected:
        raise CodebookFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    cents = np.frombuffer(data, dtype="<f4", offset=_CODEBOOK_HEADER.size).reshape(
        M_SUBVECTORS, NUM_WORDS, SUB_DIM
    )
    return PQCodebook(
        centroids=cents.copy(),
        train_seed=train_seed,
        objectives=np.full((M_SUBVECTORS, KMEANS_ITERATIONS), np.nan),
    )
