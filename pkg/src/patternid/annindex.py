"""Randomized k-d tree forest over descriptor pools.

Trees split on a dimension drawn uniformly from the five highest-variance
dimensions at each node, with position-median splits (both children non-empty
even under ties) and leaves of at most 8 vectors. Search is best-first across
all trees through one shared priority queue, stopping after a budget of
leaf-vector comparisons; with an unlimited budget the result is exact and
matches the brute-force oracle, including ties (broken by lower pool index).
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_NUM_TREES = 4
DEFAULT_MAX_CHECKS = 128
LEAF_SIZE = 8
TOP_VARIANCE_DIMS = 5
DESCRIPTOR_DIM = 128

CACHE_MAGIC = b"HSKD"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIQQ")  # magic, version, num_trees, seed, count
_TREE_HEADER = struct.Struct("<I")


class EmptyPoolError(ValueError):
    """Operation requires a non-empty descriptor pool."""


class CacheFormatError(ValueError):
    """Forest cache file is malformed (magic, version, or truncation)."""


@dataclass
class DescriptorPool:
    """Aggregate descriptor matrix with per-vector ownership.

    ``owner[i] = (image_id, local_index)`` names the image each vector came
    from and its position within that image's feature set.
    """

    vectors: np.ndarray  # (n, 128) float32, C-contiguous
    owner: np.ndarray  # (n, 2) int64

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32).reshape(
            -1, DESCRIPTOR_DIM
        )
        self.owner = np.asarray(self.owner, dtype=np.int64).reshape(-1, 2)
        if len(self.owner) != len(self.vectors):
            raise ValueError("owner list length must equal vector count")
        if len(self.owner) and len(np.unique(self.owner, axis=0)) != len(self.owner):
            raise ValueError("(image_id, local_index) pairs must be unique")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def image_ids(self) -> np.ndarray:
        return self.owner[:, 0]

    @classmethod
    def from_feature_sets(cls, items) -> "DescriptorPool":
        """Stack (image_id, FeatureSet) pairs into one pool."""
        blocks, owners = [], []
        for image_id, fs in items:
            n = len(fs.descriptors)
            blocks.append(np.asarray(fs.descriptors, dtype=np.float32).reshape(n, -1))
            owners.append(
                np.column_stack([np.full(n, image_id, dtype=np.int64), np.arange(n)])
            )
        if not blocks:
            return cls(
                vectors=np.empty((0, DESCRIPTOR_DIM), dtype=np.float32),
                owner=np.empty((0, 2), dtype=np.int64),
            )
        return cls(vectors=np.vstack(blocks), owner=np.vstack(owners))

    def fingerprint(self) -> bytes:
        """Vector count plus SHA-256 of the raw vector bytes."""
        return struct.pack("<Q", len(self)) + hashlib.sha256(self.vectors.tobytes()).digest()


@dataclass
class NeighborList:
    """k-NN result: pool indices with non-decreasing squared L2 distances."""

    indices: np.ndarray
    distances_sq: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.distances_sq = np.asarray(self.distances_sq, dtype=np.float64).reshape(-1)
        if len(self.indices) != len(self.distances_sq):
            raise ValueError("indices and distances must have equal length")
        if len(self.distances_sq) > 1 and np.any(np.diff(self.distances_sq) < 0):
            raise ValueError("distances must be non-decreasing")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class _Tree:
    split_dim: np.ndarray  # int32; -1 marks a leaf
    lo: np.ndarray  # float64; max coordinate in the left child along split_dim
    hi: np.ndarray  # float64; min coordinate in the right child
    left: np.ndarray  # int32; child node, or leaf slice start
    right: np.ndarray  # int32; child node, or leaf slice end
    perm: np.ndarray  # int64; pool rows, leaves own contiguous slices
    # plain-list mirrors for fast descent in the inner search loop
    _dim_l: list = field(default_factory=list, repr=False, compare=False)
    _lo_l: list = field(default_factory=list, repr=False, compare=False)
    _hi_l: list = field(default_factory=list, repr=False, compare=False)
    _left_l: list = field(default_factory=list, repr=False, compare=False)
    _right_l: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self._dim_l = self.split_dim.tolist()
        self._lo_l = self.lo.tolist()
        self._hi_l = self.hi.tolist()
        self._left_l = self.left.tolist()
        self._right_l = self.right.tolist()


@dataclass
class KdForest:
    pool: DescriptorPool
    trees: list
    num_trees: int
    seed: int


def _build_tree(vectors: np.ndarray, rng: np.random.Generator) -> _Tree:
    n = len(vectors)
    dims, los, his, lefts, rights = [], [], [], [], []
    perm = np.empty(n, dtype=np.int64)
    cursor = [0]

    def rec(idx: np.ndarray) -> int:
        nid = len(dims)
        dims.append(-1)
        los.append(0.0)
        his.append(0.0)
        lefts.append(0)
        rights.append(0)
        if len(idx) <= LEAF_SIZE:
            start = cursor[0]
            perm[start : start + len(idx)] = idx
            cursor[0] = start + len(idx)
            lefts[nid], rights[nid] = start, cursor[0]
            return nid
        var = vectors[idx].var(axis=0, dtype=np.float64)
        top = np.argsort(-var, kind="stable")[:TOP_VARIANCE_DIMS]
        d = int(top[rng.integers(len(top))])
        vals = vectors[idx, d]
        order = np.argsort(vals, kind="stable")
        mid = len(idx) // 2
        dims[nid] = d
        los[nid] = float(vals[order[mid - 1]])
        his[nid] = float(vals[order[mid]])
        left_id = rec(idx[order[:mid]])
        right_id = rec(idx[order[mid:]])
        lefts[nid], rights[nid] = left_id, right_id
        return nid

    rec(np.arange(n, dtype=np.int64))
    return _Tree(
        split_dim=np.array(dims, dtype=np.int32),
        lo=np.array(los, dtype=np.float64),
        hi=np.array(his, dtype=np.float64),
        left=np.array(lefts, dtype=np.int32),
        right=np.array(rights, dtype=np.int32),
        perm=perm,
    )


def build_forest(
    pool: DescriptorPool, num_trees: int = DEFAULT_NUM_TREES, seed: int = 0
) -> KdForest:
    """Build a randomized k-d tree forest. Deterministic for a fixed seed.

    Raises:
        EmptyPoolError: the pool holds no vectors.
    """
    if len(pool) == 0:
        raise EmptyPoolError("cannot build a forest over an empty pool")
    if num_trees < 1:
        raise ValueError("num_trees must be >= 1")
    trees = [
        _build_tree(pool.vectors, np.random.default_rng([seed, t])) for t in range(num_trees)
    ]
    return KdForest(pool=pool, trees=trees, num_trees=num_trees, seed=seed)


def _sq_dists(rows: np.ndarray, q64: np.ndarray) -> np.ndarray:
    """Shared distance kernel so forest and oracle agree bit for bit."""
    diff = rows.astype(np.float64) - q64
    return (diff * diff).sum(axis=1)


def knn_search(forest: KdForest, q: np.ndarray, k: int, max_checks=DEFAULT_MAX_CHECKS) -> NeighborList:
    """k nearest neighbors by best-first traversal of all trees through one
    shared priority queue. ``max_checks`` bounds the number of distinct
    leaf vectors compared (the final leaf is always finished); pass None
    (or numpy inf) for an exact search. k larger than the pool is clipped.
    """
    n = len(forest.pool)
    if n == 0:
        raise EmptyPoolError("cannot search an empty pool")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, n)
    unlimited = max_checks is None or np.isinf(max_checks)
    if not unlimited and max_checks < k:
        raise ValueError("max_checks must be >= k (or None for exact search)")

    vectors = forest.pool.vectors
    q64 = np.asarray(q, dtype=np.float64).reshape(DESCRIPTOR_DIM)
    ql = q64.tolist()
    visited = np.zeros(n, dtype=bool)
    best: list = []  # max-heap of (-dist_sq, -row); size <= k
    tick = itertools.count()
    pq = [(0.0, next(tick), t, 0) for t in range(forest.num_trees)]
    heapq.heapify(pq)
    checks = 0

    while pq:
        bound, _, t, node = heapq.heappop(pq)
        if len(best) == k and bound > -best[0][0]:
            continue
        tree = forest.trees[t]
        dim_l, lo_l, hi_l = tree._dim_l, tree._lo_l, tree._hi_l
        left_l, right_l = tree._left_l, tree._right_l
        d = dim_l[node]
        while d >= 0:
            qd = ql[d]
            hi = hi_l[node]
            if qd < hi:
                far = right_l[node]
                node = left_l[node]
                off = hi - qd
            else:
                far = left_l[node]
                off = qd - lo_l[node]
                node = right_l[node]
            fb = off * off
            if fb < bound:
                fb = bound
            if not (len(best) == k and fb > -best[0][0]):
                heapq.heappush(pq, (fb, next(tick), t, far))
            d = dim_l[node]
        rows = tree.perm[left_l[node] : right_l[node]]
        fresh = rows[~visited[rows]]
        if fresh.size:
            visited[fresh] = True
            for dist, row in zip(_sq_dists(vectors[fresh], q64), fresh):
                item = (-dist, -row)
                if len(best) < k:
                    heapq.heappush(best, item)
                elif item > best[0]:
                    heapq.heapreplace(best, item)
            checks += int(fresh.size)
            if not unlimited and checks >= max_checks:
                break

    found = sorted((-nd, -ni) for nd, ni in best)
    return NeighborList(
        indices=np.array([i for _, i in found], dtype=np.int64),
        distances_sq=np.array([dist for dist, _ in found], dtype=np.float64),
    )


def brute_force_knn(pool: DescriptorPool, q: np.ndarray, k: int) -> NeighborList:
    """Exact k-NN by full scan; ties broken by lower pool index."""
    n = len(pool)
    if n == 0:
        raise EmptyPoolError("cannot search an empty pool")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, n)
    q64 = np.asarray(q, dtype=np.float64).reshape(DESCRIPTOR_DIM)
    dists = _sq_dists(pool.vectors, q64)
    order = np.lexsort((np.arange(n), dists))[:k]
    return NeighborList(indices=order, distances_sq=dists[order])


def save_forest(path: str | Path, forest: KdForest) -> None:
    """Write a forest cache: "HSKD" header, pool fingerprint, then per-tree
    node arrays. Advisory only; loaders rebuild on fingerprint mismatch."""
    parts = [
        _CACHE_HEADER.pack(
            CACHE_MAGIC, CACHE_VERSION, forest.num_trees, forest.seed, len(forest.pool)
        ),
        forest.pool.fingerprint()[8:],  # 32-byte digest; count already in header
    ]
    for tree in forest.trees:
        parts.append(_TREE_HEADER.pack(len(tree.split_dim)))
        parts.append(tree.split_dim.astype("<i4").tobytes())
        parts.append(tree.lo.astype("<f8").tobytes())
        parts.append(tree.hi.astype("<f8").tobytes())
        parts.append(tree.left.astype("<i4").tobytes())
        parts.append(tree.right.astype("<i4").tobytes())
        parts.append(tree.perm.astype("<i8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_forest(path: str | Path, pool: DescriptorPool) -> KdForest | None:
    """Load a forest cache for ``pool``. Returns None when the stored
    fingerprint does not match (caller rebuilds).

    Raises:
        CacheFormatError: unknown magic/version or truncated file.
    """
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size + 32:
        raise CacheFormatError(f"{path}: truncated header")
    magic, version, num_trees, seed, count = _CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: unknown magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    offset = _CACHE_HEADER.size
    digest = data[offset : offset + 32]
    offset += 32
    if struct.pack("<Q", count) + digest != pool.fingerprint():
        return None

    def take(dtype, nitems):
        nonlocal offset
        nbytes = np.dtype(dtype).itemsize * nitems
        if offset + nbytes > len(data):
            raise CacheFormatError(f"{path}: truncated tree data")
        arr = np.frombuffer(data, dtype=dtype, count=nitems, offset=offset)
        offset += nbytes
        return arr

    trees = []
    for _ in range(num_trees):
        if offset + _TREE_HEADER.size > len(data):
            raise CacheFormatError(f"{path}: truncated tree header")
        (n_nodes,) = _TREE_HEADER.unpack_from(data, offset)
        offset += _TREE_HEADER.size
        trees.append(
            _Tree(
                split_dim=take("<i4", n_nodes).copy(),
                lo=take("<f8", n_nodes).copy(),
                hi=take("<f8", n_nodes).copy(),
                left=take("<i4", n_nodes).copy(),
                right=take("<i4", n_nodes).copy(),
                perm=take("<i8", count).copy(),
            )
        )
    if offset != len(data):
        raise CacheFormatError(f"{path}: trailing bytes")
    return KdForest(pool=pool, trees=trees, num_trees=num_trees, seed=seed)
