"""Image scores, spatial reranking, and label aggregation.

An image's score is the plain sum of its match scores: many distinctive
correspondences beat a few strong ones. The top-scoring images are reranked
by spatial consistency: every match proposes the affine transform implied by
its two elliptical regions, the hypothesis with the most inliers wins, and a
least-squares homography refit of those inliers produces the final match set.
Labels are scored either by their best image or by aggregating match sets
across images (keeping one match per query descriptor).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    HomographyEstimationError,
    InvalidShapeError,
    affine_hypothesis,
    count_inliers,
    estimate_homography,
)
from .matching import MatchSet

logger = logging.getLogger(__name__)

DEFAULT_K_SR = 50
DEFAULT_T_SP_FRAC = 0.10
MIN_HOMOGRAPHY_INLIERS = 4


@dataclass
class ScoredImage:
    """One database image's standing against the query.

    ``reranked_score`` and ``inlier_matches`` are set together when the image
    went through spatial verification; both stay None otherwise.
    """

    image_id: int
    initial_score: float
    reranked_score: float | None = None
    inlier_matches: MatchSet | None = None

    @property
    def score(self) -> float:
        """Effective score: reranked when available, initial otherwise."""
        return self.initial_score if self.reranked_score is None else self.reranked_score


@dataclass
class ScoredLabel:
    label_id: int
    score: float
    best_image_id: int


@dataclass
class RankedResult:
    """Final ranking: labels and images sorted by descending score,
    ties broken by ascending id. Sorting is enforced at construction.

    ``labels`` carries the aggregated (label-scoring) ranking; the
    max-over-images alternative is kept alongside for report columns that
    need both."""

    labels: list[ScoredLabel]
    images: list[ScoredImage]
    config: dict = field(default_factory=dict)
    labels_by_image_scoring: list[ScoredLabel] | None = None

    def __post_init__(self):
        self.labels = sorted(self.labels, key=lambda s: (-s.score, s.label_id))
        self.images = sorted(self.images, key=lambda s: (-s.score, s.image_id))
        if self.labels_by_image_scoring is not None:
            self.labels_by_image_scoring = sorted(
                self.labels_by_image_scoring, key=lambda s: (-s.score, s.label_id)
            )


def image_score(m: MatchSet) -> float:
    """Sum of match scores; the empty set scores 0."""
    if len(m) == 0:
        return 0.0
    return float(np.sum(m.scores))


def rank_candidates(match_sets: dict[int, MatchSet]) -> list[ScoredImage]:
    """Initial candidate list: one ScoredImage per match set, sorted by
    descending initial score, ties by ascending image id."""
    out = [
        ScoredImage(image_id=img, initial_score=image_score(ms))
        for img, ms in match_sets.items()
    ]
    out.sort(key=lambda s: (-s.initial_score, s.image_id))
    return out


def _verify_image(
    query: "FeatureSet",
    db_fs: "FeatureSet",
    ms: MatchSet,
    t_sp: float,
) -> MatchSet:
    """Spatially consistent subset of one image's matches.

    Each match proposes the affine map sending its query ellipse onto its
    database ellipse; the proposal with the most inliers wins (ties: higher
    originating match score, then lower db index, then lower query index).
    When the winning inlier set has >= 4 matches, a homography is fit to it
    and inliers are recounted against that homography over the full match
    set; estimation failure falls back to the affine inlier set.
    """
    if len(ms) == 0:
        return ms
    db_xy = db_fs.locations()
    q_xy = query.locations()

    best_positions = np.empty(0, dtype=np.intp)
    best_key = None
    for p in range(len(ms)):
        i, j = int(ms.i[p]), int(ms.j[p])
        try:
            hyp = affine_hypothesis(db_fs.keypoints[i], query.keypoints[j])
        except InvalidShapeError:
            continue
        positions = count_inliers(hyp, ms, db_xy, q_xy, t_sp)
        key = (len(positions), float(ms.scores[p]), -i, -j)
        if best_key is None or key > best_key:
            best_key = key
            best_positions = positions

    if best_key is None:
        logger.info("image %d: no valid transform hypotheses", ms.image_id)
        return ms.subset(np.empty(0, dtype=np.intp))

    inliers = ms.subset(best_positions)
    if len(inliers) >= MIN_HOMOGRAPHY_INLIERS:
        src = q_xy[inliers.j]
        dst = db_xy[inliers.i]
        try:
            hom = estimate_homography(src, dst)
        except HomographyEstimationError:
            logger.info("image %d: homography refit failed; keeping affine inliers", ms.image_id)
        else:
            positions = count_inliers(hom, ms, db_xy, q_xy, t_sp)
            return ms.subset(positions)
    return inliers


def spatial_rerank(
    query: "FeatureSet",
    candidates: list[ScoredImage],
    match_sets: dict[int, MatchSet],
    catalog,
    k_sr: int = DEFAULT_K_SR,
    t_sp_frac: float = DEFAULT_T_SP_FRAC,
) -> list[ScoredImage]:
    """Verify the top ``k_sr`` candidates spatially and re-sort.

    ``candidates`` must arrive sorted by descending initial score. The inlier
    threshold per image is ``t_sp_frac`` times the diagonal of that image's
    preprocessed ROI (matches live in post-resize coordinates). ``catalog``
    provides ``features(image_id) -> FeatureSet``. Candidates beyond the top
    ``k_sr`` keep their initial scores; k_sr = 0 verifies nothing.
    """
    out = []
    n_rerank = min(k_sr, len(candidates))
    for rank, cand in enumerate(candidates):
        if rank >= n_rerank:
            out.append(ScoredImage(cand.image_id, cand.initial_score))
            continue
        db_fs = catalog.features(cand.image_id)
        t_sp = t_sp_frac * float(np.hypot(db_fs.roi_width, db_fs.roi_height))
        kept = _verify_image(query, db_fs, match_sets[cand.image_id], t_sp)
        out.append(
            ScoredImage(
                image_id=cand.image_id,
                initial_score=cand.initial_score,
                reranked_score=image_score(kept),
                inlier_matches=kept,
            )
        )
    out.sort(key=lambda s: (-s.score, s.image_id))
    return out


def _image_triples(img: ScoredImage, match_sets) -> MatchSet | None:
    if img.inlier_matches is not None:
        return img.inlier_matches
    if match_sets is not None:
        return match_sets.get(img.image_id)
    return None


def label_score(
    reranked: list[ScoredImage],
    catalog,
    match_sets: dict[int, MatchSet] | None = None,
) -> list[ScoredLabel]:
    """Aggregate match sets per label, keeping the best match per query
    descriptor, and score the surviving set.

    Verified images contribute their inlier match sets; unverified ones fall
    back to their raw sets from ``match_sets`` when given (absent that, they
    contribute no matches). Ties for a query descriptor go to the lower
    image id, then the lower database index. ``best_image_id`` is the label's
    highest-scoring image. ``catalog`` provides ``label_of(image_id)``.
    """
    by_label: dict[int, list[ScoredImage]] = {}
    for img in reranked:
        by_label.setdefault(catalog.label_of(img.image_id), []).append(img)

    out = []
    for label_id in sorted(by_label):
        members = sorted(by_label[label_id], key=lambda s: s.image_id)
        # best[j] = (score, -image_id, -i): max() realizes the tie rules
        best: dict[int, tuple[float, int, int]] = {}
        for img in members:
            ms = _image_triples(img, match_sets)
            if ms is None:
                continue
            for p in range(len(ms)):
                j = int(ms.j[p])
                key = (float(ms.scores[p]), -img.image_id, -int(ms.i[p]))
                if j not in best or key > best[j]:
                    best[j] = key
        score = float(sum(k[0] for k in best.values()))
        best_img = min(members, key=lambda s: (-s.score, s.image_id))
        out.append(
            ScoredLabel(label_id=label_id, score=score, best_image_id=best_img.image_id)
        )
    out.sort(key=lambda s: (-s.score, s.label_id))
    return out


def image_score_labels(
    reranked: list[ScoredImage],
    catalog,
) -> list[ScoredLabel]:
    """Score each label by its best image; the top label owns the top image."""
    by_label: dict[int, list[ScoredImage]] = {}
    for img in reranked:
        by_label.setdefault(catalog.label_of(img.image_id), []).append(img)
    out = []
    for label_id in sorted(by_label):
        best = min(by_label[label_id], key=lambda s: (-s.score, s.image_id))
        out.append(
            ScoredLabel(label_id=label_id, score=best.score, best_image_id=best.image_id)
        )
    out.sort(key=lambda s: (-s.score, s.label_id))
    return out
