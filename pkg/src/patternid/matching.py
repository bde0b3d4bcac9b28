"""Per-database-image match sets.

Two matching regimes: one-vs-one ratio-test matching (for each database
descriptor, the two nearest query descriptors decide distinctiveness), and
one-vs-many competitive matching over the aggregate pool (k+1 nearest
neighbors per query descriptor, the (k+1)-th distance acting as the
normalizer, scores distributed to the owner images of the first k).

The ratio convention follows the big-ratio-wins form: r = d_second / d_first,
kept when r exceeds t_ratio = 1.6^2. Scoring functions map a (nearest,
normalizer) squared-distance pair to a non-negative score.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .annindex import DEFAULT_MAX_CHECKS, KdForest, knn_search
from .pqindex import PQCodebook, pq_knn_search_batch

logger = logging.getLogger(__name__)

T_RATIO = 1.6**2
EPSILON = 1e-8
EXACT_QUERY_LIMIT = 2000
REFETCH_PAD = 3

SCORING_FNS = ("LNBNN", "ratio", "lnrat", "count")


class InsufficientDatabaseError(ValueError):
    """Pool too small for the requested k+1 foreign neighbors."""


class MatchTriple(NamedTuple):
    i: int  # database-image-local descriptor index
    j: int  # query descriptor index
    score: float


@dataclass
class MatchSet:
    """Matches between one database image and the query, as parallel arrays."""

    image_id: int
    i: np.ndarray
    j: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64).reshape(-1)
        self.j = np.asarray(self.j, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(self.i) == len(self.j) == len(self.scores)):
            raise ValueError("i, j, scores must have equal length")
        if len(self.i):
            pairs = np.stack([self.i, self.j], axis=1)
            if len(np.unique(pairs, axis=0)) != len(pairs):
                raise ValueError("(i, j) pairs must be unique within a match set")

    def __len__(self) -> int:
        return len(self.i)

    @property
    def triples(self) -> list[MatchTriple]:
        return [
            MatchTriple(int(a), int(b), float(s))
            for a, b, s in zip(self.i, self.j, self.scores)
        ]

    def subset(self, positions: np.ndarray) -> "MatchSet":
        positions = np.asarray(positions, dtype=np.int64)
        return MatchSet(
            image_id=self.image_id,
            i=self.i[positions],
            j=self.j[positions],
            scores=self.scores[positions],
        )


@dataclass
class PQBackend:
    """One-vs-many search backend over PQ codes aligned with a pool's owners."""

    codebook: PQCodebook
    codes: np.ndarray  # (n, 16) uint8
    owner: np.ndarray  # (n, 2) int64

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint8).reshape(-1, 16)
        self.owner = np.asarray(self.owner, dtype=np.int64).reshape(-1, 2)
        if len(self.codes) != len(self.owner):
            raise ValueError("codes and owner must have equal length")

    def __len__(self) -> int:
        return len(self.codes)


def delta(fn: str, dist_sq_p, dist_sq_norm):
    """Score a (nearest, normalizer) squared-distance pair.

    LNBNN: norm - p. ratio: norm / p. lnrat: ln(norm / p). count: 1.
    Zero distances are guarded by epsilon = 1e-8 applied to both numerator
    and denominator of the quotient, so ratio >= 1 and lnrat >= 0 hold even
    for duplicate descriptors. Accepts scalars or equal-shaped arrays.

    Raises:
        ValueError: unknown fn, or violated 0 <= p <= norm precondition.
    """
    if fn not in SCORING_FNS:
        raise ValueError(f"unknown scoring function {fn!r}")
    p = np.asarray(dist_sq_p, dtype=np.float64)
    norm = np.asarray(dist_sq_norm, dtype=np.float64)
    if np.any(p < 0) or np.any(norm < p):
        raise ValueError("require 0 <= dist_sq_p <= dist_sq_norm")
    if fn == "LNBNN":
        out = norm - p
    elif fn == "count":
        out = np.ones_like(p)
    else:
        quot = np.maximum(norm, EPSILON) / np.maximum(p, EPSILON)
        out = quot if fn == "ratio" else np.log(quot)
    if out.ndim == 0:
        return float(out)
    return out


def match_one_vs_one(
    db: "FeatureSet",
    query: "FeatureSet",
    t_ratio: float = T_RATIO,
    query_forest: KdForest | None = None,
    image_id: int = -1,
) -> MatchSet:
    """Ratio-test matching of one database image against the query.

    For each database descriptor, the two nearest query descriptors are
    found; the match is kept iff r = d_second/d_first > t_ratio. Search is
    exact for queries of at most 2000 descriptors, budget-restricted beyond.
    A query with fewer than 2 descriptors yields an empty MatchSet.
    """
    empty = MatchSet(
        image_id=image_id, i=np.empty(0), j=np.empty(0), scores=np.empty(0)
    )
    if len(query.descriptors) < 2:
        logger.info("query has %d descriptors; one-vs-one needs 2", len(query.descriptors))
        return empty
    if len(db.descriptors) == 0:
        return empty
    if query_forest is None:
        from .annindex import DescriptorPool, build_forest

        pool = DescriptorPool(
            vectors=query.descriptors,
            owner=np.column_stack(
                [np.zeros(len(query.descriptors), dtype=np.int64),
                 np.arange(len(query.descriptors))]
            ),
        )
        query_forest = build_forest(pool, seed=0)
    max_checks = None if len(query.descriptors) <= EXACT_QUERY_LIMIT else DEFAULT_MAX_CHECKS

    out_i, out_j, out_r = [], [], []
    for i, d in enumerate(db.descriptors):
        nn = knn_search(query_forest, d, 2, max_checks=max_checks)
        r = max(nn.distances_sq[1], EPSILON) / max(nn.distances_sq[0], EPSILON)
        if r > t_ratio:
            out_i.append(i)
            out_j.append(int(nn.indices[0]))
            out_r.append(r)
    return MatchSet(image_id=image_id, i=out_i, j=out_j, scores=out_r)


def _foreign_count(owner: np.ndarray, exclude_image) -> int:
    if exclude_image is None:
        return len(owner)
    return int(np.count_nonzero(owner[:, 0] != exclude_image))


def _forest_fetch(index: KdForest, q: np.ndarray, fetch: int, max_checks) -> tuple[np.ndarray, np.ndarray]:
    checks = max_checks if max_checks is None else max(max_checks, fetch)
    nn = knn_search(index, q, fetch, max_checks=checks)
    return nn.indices, nn.distances_sq


def match_one_vs_many(
    query: "FeatureSet",
    index: KdForest | PQBackend,
    k: int = 1,
    fn: str = "lnrat",
    exclude_image: int | None = None,
    max_checks=DEFAULT_MAX_CHECKS,
    pad: int = REFETCH_PAD,
) -> dict[int, MatchSet]:
    """Competitive matching of the query against the aggregate pool.

    Per query descriptor: fetch k+1 nearest neighbors (skipping vectors owned
    by ``exclude_image`` when set, refetching deeper as needed), use the
    (k+1)-th distance as the normalizer, and credit each of the first k
    neighbors' owner images with delta(fn, d_p, d_norm). At most one triple
    per (query descriptor, image) survives: the best-scoring one, earliest
    neighbor on ties. Returns MatchSets keyed by image id, ascending.

    Raises:
        InsufficientDatabaseError: fewer than k+1 foreign vectors in the pool.
    """
    if fn not in SCORING_FNS:
        raise ValueError(f"unknown scoring function {fn!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    owner = index.pool.owner if isinstance(index, KdForest) else index.owner
    n = len(owner)
    kk = k + 1
    if kk > _foreign_count(owner, exclude_image):
        raise InsufficientDatabaseError(
            f"pool holds {_foreign_count(owner, exclude_image)} foreign vectors; need {kk}"
        )
    queries = np.asarray(query.descriptors, dtype=np.float32).reshape(-1, 128)
    nq = len(queries)
    best: dict[tuple[int, int], tuple[float, int, int]] = {}
    if nq == 0:
        return {}

    fetch0 = min(n, kk + pad)
    if isinstance(index, PQBackend):
        idx0, d0 = pq_knn_search_batch(index.codebook, index.codes, queries, fetch0)
    else:
        idx0 = np.empty((nq, fetch0), dtype=np.int64)
        d0 = np.empty((nq, fetch0))
        for j in range(nq):
            idx0[j], d0[j] = _forest_fetch(index, queries[j], fetch0, max_checks)

    for j in range(nq):
        idx, d2 = idx0[j], d0[j]
        fetch = fetch0
        while True:
            if exclude_image is not None:
                keep = owner[idx, 0] != exclude_image
                fidx, fd2 = idx[keep], d2[keep]
            else:
                fidx, fd2 = idx, d2
            if len(fidx) >= kk or fetch >= n:
                break
            fetch = min(n, fetch * 2)
            if isinstance(index, PQBackend):
                ridx, rd2 = pq_knn_search_batch(
                    index.codebook, index.codes, queries[j : j + 1], fetch
                )
                idx, d2 = ridx[0], rd2[0]
            else:
                idx, d2 = _forest_fetch(index, queries[j], fetch, max_checks)
        if len(fidx) < kk:
            raise InsufficientDatabaseError(
                f"query descriptor {j}: only {len(fidx)} foreign neighbors reachable"
            )
        norm = fd2[kk - 1]
        scores = delta(fn, fd2[:k], np.full(k, norm))
        imgs = owner[fidx[:k], 0]
        locs = owner[fidx[:k], 1]
        for p in range(k):
            key = (int(imgs[p]), j)
            s = float(scores[p])
            if key not in best or s > best[key][0]:
                best[key] = (s, int(locs[p]), j)

    per_image: dict[int, list[tuple[int, int, float]]] = {}
    for (img, j), (s, i_loc, _) in best.items():
        per_image.setdefault(img, []).append((i_loc, j, s))
    out = {}
    for img in sorted(per_image):
        rows = per_image[img]
        rows.sort(key=lambda t: (t[1], t[0]))
        out[img] = MatchSet(
            image_id=img,
            i=[r[0] for r in rows],
            j=[r[1] for r in rows],
            scores=[r[2] for r in rows],
        )
    return out
