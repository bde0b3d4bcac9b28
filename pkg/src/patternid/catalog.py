"""Persistent catalog of images, ROIs, labels, feature sets, and indexes.

Directory layout under one root:

    manifest.json            versioned record store (atomic rewrite)
    features/<image_id>.hsft descriptor sidecars, written at ingest
    index/<generation>/      immutable index builds (pool snapshot + backend)

Features are extracted eagerly when an image is added, so index builds never
touch pixels. Every mutation marks the catalog dirty; building a new
generation snapshots the current descriptor pool and clears the flag. Old
generations stay on disk and remain queryable.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import cv2
import numpy as np

from .annindex import DescriptorPool, KdForest, build_forest, load_forest, save_forest
from .features import (
    VARIANT_ROOTSIFT,
    FeatureSet,
    InvalidRoiError,
    extract_features,
    read_features,
    write_features,
)
from .matching import PQBackend
from .pqindex import encode_pool, load_codebook, save_codebook, train_codebooks

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
BACKENDS = ("kdforest", "pq")


class CatalogError(Exception):
    """Base class for catalog failures."""


class ImageNotFoundError(CatalogError, KeyError):
    """Raised when an image id does not resolve."""


class CatalogIntegrityError(CatalogError):
    """Raised when stored references do not resolve (e.g. missing label)."""


class EmptyCatalogError(CatalogError):
    """Raised when an index build finds no descriptors."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class ImageRecord:
    image_id: int
    source_uri: str
    roi: tuple[int, int, int, int]  # x, y, w, h in source pixels
    label_id: int | None
    feature_ref: str  # sidecar path relative to the catalog root
    ingest_time: str
    extra: dict = field(default_factory=dict)  # unknown JSON fields, preserved

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(
            image_id=self.image_id,
            source_uri=self.source_uri,
            roi=list(self.roi),
            label_id=self.label_id,
            feature_ref=self.feature_ref,
            ingest_time=self.ingest_time,
        )
        return out

    @classmethod
    def from_json(cls, d: dict) -> "ImageRecord":
        known = {"image_id", "source_uri", "roi", "label_id", "feature_ref", "ingest_time"}
        return cls(
            image_id=int(d["image_id"]),
            source_uri=str(d["source_uri"]),
            roi=tuple(int(v) for v in d["roi"]),
            label_id=None if d.get("label_id") is None else int(d["label_id"]),
            feature_ref=str(d["feature_ref"]),
            ingest_time=str(d["ingest_time"]),
            extra={k: v for k, v in d.items() if k not in known},
        )


@dataclass
class LabelRecord:
    label_id: int
    name: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(label_id=self.label_id, name=self.name)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "LabelRecord":
        known = {"label_id", "name"}
        return cls(
            label_id=int(d["label_id"]),
            name=str(d["name"]),
            extra={k: v for k, v in d.items() if k not in known},
        )


@dataclass
class IndexGeneration:
    generation: int
    backend: str  # "kdforest" | "pq"
    fingerprint: str  # hex of the pool fingerprint
    params: dict
    built_time: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(
            generation=self.generation,
            backend=self.backend,
            fingerprint=self.fingerprint,
            params=self.params,
            built_time=self.built_time,
        )
        return out

    @classmethod
    def from_json(cls, d: dict) -> "IndexGeneration":
        known = {"generation", "backend", "fingerprint", "params", "built_time"}
        return cls(
            generation=int(d["generation"]),
            backend=str(d["backend"]),
            fingerprint=str(d["fingerprint"]),
            params=dict(d.get("params") or {}),
            built_time=str(d["built_time"]),
            extra={k: v for k, v in d.items() if k not in known},
        )


class Catalog:
    """Single-writer catalog rooted at a directory.

    Mutations rewrite the manifest via write-new-then-atomic-rename, so an
    interrupted write leaves the previous manifest intact. Unknown JSON
    fields, top-level or per-record, survive rewrites.
    """

    def __init__(self, root: str | Path, clock=_now):
        self.root = Path(root)
        self._clock = clock
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "features").mkdir(exist_ok=True)
        (self.root / "index").mkdir(exist_ok=True)
        self.images: dict[int, ImageRecord] = {}
        self.labels: dict[int, LabelRecord] = {}
        self.generations: dict[int, IndexGeneration] = {}
        self.dirty = False
        self._next_image_id = 1
        self._next_label_id = 1
        self._next_generation = 1
        self._extra: dict = {}
        self._fs_cache: dict[int, FeatureSet] = {}
        self._backend_cache: dict[int, object] = {}
        manifest = self.root / MANIFEST_NAME
        if manifest.exists():
            self._load(manifest)
        else:
            self._save()

    # -- persistence ------------------------------------------------------

    def _load(self, manifest: Path) -> None:
        raw = json.loads(manifest.read_text())
        if raw.get("version") != MANIFEST_VERSION:
            raise CatalogIntegrityError(
                f"manifest version {raw.get('version')!r}; expected {MANIFEST_VERSION}"
            )
        self.images = {r.image_id: r for r in map(ImageRecord.from_json, raw["images"])}
        self.labels = {r.label_id: r for r in map(LabelRecord.from_json, raw["labels"])}
        self.generations = {
            g.generation: g for g in map(IndexGeneration.from_json, raw["generations"])
        }
        self.dirty = bool(raw.get("dirty", False))
        self._next_image_id = int(raw["next_image_id"])
        self._next_label_id = int(raw["next_label_id"])
        self._next_generation = int(raw["next_generation"])
        known = {
            "version", "images", "labels", "generations", "dirty",
            "next_image_id", "next_label_id", "next_generation",
        }
        self._extra = {k: v for k, v in raw.items() if k not in known}
        self._check_integrity()

    def _save(self) -> None:
        out = dict(self._extra)
        out.update(
            version=MANIFEST_VERSION,
            dirty=self.dirty,
            next_image_id=self._next_image_id,
            next_label_id=self._next_label_id,
            next_generation=self._next_generation,
            images=[r.to_json() for r in sorted(self.images.values(), key=lambda r: r.image_id)],
            labels=[r.to_json() for r in sorted(self.labels.values(), key=lambda r: r.label_id)],
            generations=[
                g.to_json() for g in sorted(self.generations.values(), key=lambda g: g.generation)
            ],
        )
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=MANIFEST_NAME + ".tmp")
        try:
            with os.fdopen(fd, "w") as f:
                json.dump(out, f, indent=2)
                f.write("\n")
            os.replace(tmp, self.root / MANIFEST_NAME)
        except BaseException:
            os.unlink(tmp)
            raise

    def _check_integrity(self) -> None:
        for r in self.images.values():
            if r.label_id is not None and r.label_id not in self.labels:
                raise CatalogIntegrityError(
                    f"image {r.image_id} references unknown label {r.label_id}"
                )

    # -- record access ----------------------------------------------------

    def get_image(self, image_id: int) -> ImageRecord:
        try:
            return self.images[image_id]
        except KeyError:
            raise ImageNotFoundError(f"no image {image_id}") from None

    def features(self, image_id: int) -> FeatureSet:
        if image_id not in self._fs_cache:
            rec = self.get_image(image_id)
            self._fs_cache[image_id] = read_features(self.root / rec.feature_ref)
        return self._fs_cache[image_id]

    def label_of(self, image_id: int) -> int:
        rec = self.get_image(image_id)
        if rec.label_id is None or rec.label_id not in self.labels:
            raise CatalogIntegrityError(f"image {image_id} has no resolvable label")
        return rec.label_id

    def label_name(self, label_id: int) -> str:
        try:
            return self.labels[label_id].name
        except KeyError:
            raise CatalogIntegrityError(f"no label {label_id}") from None

    def _label_by_name(self, name: str) -> LabelRecord | None:
        for rec in self.labels.values():
            if rec.name == name:
                return rec
        return None

    def get_or_create_label(self, name: str) -> LabelRecord:
        name = name.strip()
        if not name:
            raise ValueError("label name must be non-empty")
        rec = self._label_by_name(name)
        if rec is None:
            rec = LabelRecord(label_id=self._next_label_id, name=name)
            self._next_label_id += 1
            self.labels[rec.label_id] = rec
        return rec

    # -- mutations --------------------------------------------------------

    def add_image(
        self,
        source: str | Path,
        roi: tuple[int, int, int, int],
        label: str | None = None,
        variant: str = VARIANT_ROOTSIFT,
    ) -> ImageRecord:
        """Ingest one image: validate the ROI, extract features to a sidecar,
        persist the record. Duplicate (source, roi) pairs are allowed but
        logged. Marks the catalog dirty.

        Raises:
            FileNotFoundError: unreadable source image.
            InvalidRoiError: ROI empty or outside the source bounds.
        """
        source = Path(source)
        img = cv2.imread(str(source), cv2.IMREAD_COLOR)
        if img is None:
            raise FileNotFoundError(f"cannot read image {source}")
        x, y, w, h = (int(v) for v in roi)
        ih, iw = img.shape[:2]
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > iw or y + h > ih:
            raise InvalidRoiError(f"roi {roi} invalid for {iw}x{ih} source")
        for other in self.images.values():
            if other.source_uri == str(source) and other.roi == (x, y, w, h):
                logger.warning("duplicate ingest of %s roi=%s", source, roi)
                break

        image_id = self._next_image_id
        self._next_image_id += 1
        fs = extract_features(img, (x, y, w, h), variant=variant)
        feature_ref = f"features/{image_id}.hsft"
        write_features(self.root / feature_ref, fs)
        label_id = None if label is None else self.get_or_create_label(label).label_id
        rec = ImageRecord(
            image_id=image_id,
            source_uri=str(source),
            roi=(x, y, w, h),
            label_id=label_id,
            feature_ref=feature_ref,
            ingest_time=self._clock(),
        )
        self.images[image_id] = rec
        self._fs_cache[image_id] = fs
        self.dirty = True
        self._save()
        return rec

    def assign_label(self, image_id: int, name: str) -> ImageRecord:
        """Point an image at a label, creating the label when new."""
        rec = self.get_image(image_id)
        rec.label_id = self.get_or_create_label(name).label_id
        self.dirty = True
        self._save()
        return rec

    def remove_image(self, image_id: int) -> None:
        rec = self.get_image(image_id)
        del self.images[image_id]
        self._fs_cache.pop(image_id, None)
        sidecar = self.root / rec.feature_ref
        if sidecar.exists():
            sidecar.unlink()
        self.dirty = True
        self._save()

    # -- index generations ------------------------------------------------

    def build_pool(self) -> DescriptorPool:
        """Aggregate all current feature sets, ascending by image id.

        Raises:
            EmptyCatalogError: no descriptors in the catalog.
        """
        items = [
            (image_id, self.features(image_id)) for image_id in sorted(self.images)
        ]
        pool = DescriptorPool.from_feature_sets(items)
        if len(pool) == 0:
            raise EmptyCatalogError("catalog holds no descriptors")
        return pool

    def build_generation(
        self, backend: str = "kdforest", params: dict | None = None, seed: int = 0
    ) -> IndexGeneration:
        """Snapshot the descriptor pool and build an immutable index.

        The generation directory holds pool.npz (vectors + ownership) plus
        backend files, so the build stays queryable after later catalog
        mutations. Publication is atomic: the directory is assembled under a
        temporary name and renamed into place before the manifest mentions it.
        """
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
        params = dict(params or {})
        pool = self.build_pool()
        generation = self._next_generation

        gen_dir = self.root / "index" / str(generation)
        tmp_dir = self.root / "index" / f".tmp-{generation}"
        if tmp_dir.exists():
            for p in tmp_dir.iterdir():
                p.unlink()
            tmp_dir.rmdir()
        tmp_dir.mkdir()
        np.savez(tmp_dir / "pool.npz", vectors=pool.vectors, owner=pool.owner)
        if backend == "kdforest":
            num_trees = int(params.setdefault("num_trees", 4))
            forest = build_forest(pool, num_trees=num_trees, seed=seed)
            save_forest(tmp_dir / "forest.hskd", forest)
        else:
            cb = train_codebooks(pool, seed=seed)
            save_codebook(tmp_dir / "codebook.hspq", cb)
            np.save(tmp_dir / "codes.npy", encode_pool(cb, pool.vectors))
        params["seed"] = seed
        os.replace(tmp_dir, gen_dir)

        gen = IndexGeneration(
            generation=generation,
            backend=backend,
            fingerprint=pool.fingerprint().hex(),
            params=params,
            built_time=self._clock(),
        )
        self._next_generation += 1
        self.generations[generation] = gen
        self.dirty = False
        self._save()
        return gen

    @property
    def current_generation(self) -> IndexGeneration | None:
        if not self.generations:
            return None
        return self.generations[max(self.generations)]

    def load_backend(self, generation: int | None = None) -> KdForest | PQBackend:
        """Reopen a generation's search backend from its snapshot.

        Raises:
            CatalogIntegrityError: unknown or damaged generation.
        """
        gen = (
            self.current_generation
            if generation is None
            else self.generations.get(generation)
        )
        if gen is None:
            raise CatalogIntegrityError(f"no such generation {generation!r}")
        if gen.generation in self._backend_cache:
            return self._backend_cache[gen.generation]
        gen_dir = self.root / "index" / str(gen.generation)
        try:
            snap = np.load(gen_dir / "pool.npz")
            pool = DescriptorPool(vectors=snap["vectors"], owner=snap["owner"])
        except (OSError, KeyError) as e:
            raise CatalogIntegrityError(f"generation {gen.generation}: {e}") from e
        if pool.fingerprint().hex() != gen.fingerprint:
            raise CatalogIntegrityError(
                f"generation {gen.generation}: pool snapshot does not match manifest"
            )
        if gen.backend == "kdforest":
            backend = load_forest(gen_dir / "forest.hskd", pool)
            if backend is None:
                raise CatalogIntegrityError(
                    f"generation {gen.generation}: forest cache does not match pool"
                )
        else:
            cb = load_codebook(gen_dir / "codebook.hspq")
            codes = np.load(gen_dir / "codes.npy")
            backend = PQBackend(codebook=cb, codes=codes, owner=pool.owner)
        self._backend_cache[gen.generation] = backend
        return backend
