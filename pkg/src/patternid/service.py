"""HTTP facade over the catalog and query pipeline.

One FastAPI app per catalog. Mutations (register, label, rebuild) serialize
through a single writer lock; queries never take it and run against whatever
generation is newest when they start, so a rebuild in flight does not block
or corrupt reads. The same routes are mounted under /api and /api/v1, and a
built review UI can be served from / when a static directory is supplied.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from pathlib import Path

import cv2
import numpy as np
from fastapi import APIRouter, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, ConfigDict
from starlette.concurrency import run_in_threadpool

from .catalog import (
    BACKENDS,
    Catalog,
    CatalogError,
    CatalogIntegrityError,
    EmptyCatalogError,
    ImageNotFoundError,
)
from .features import EllipseKeypoint, InvalidRoiError, extract_features
from .harness import QueryConfig, run_query_features
from .matching import MatchSet
from .scoring import ScoredImage

DEFAULT_PORT = 8000
PORT_ENV_VAR = "HS_PORT"

_INT_FIELDS = {"k", "k_sr", "num_trees", "max_checks", "seed"}
_FLOAT_FIELDS = {"t_ratio", "t_sp_frac"}
_CONFIG_FIELDS = set(QueryConfig().to_json())


def resolve_port(cli_port: int | None = None) -> int:
    """--port wins, then the HS_PORT environment variable, then the default."""
    if cli_port is not None:
        return cli_port
    env = os.environ.get(PORT_ENV_VAR)
    return int(env) if env else DEFAULT_PORT


class LabelAssignment(BaseModel):
    """``expect_new`` guards the mint-a-new-label flow: the assignment is
    rejected instead of silently reusing an existing label of that name."""

    model_config = ConfigDict(extra="forbid")
    name: str
    expect_new: bool = False


class RebuildRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    backend: str = "kdforest"
    num_trees: int = 4
    seed: int = 0


def _parse_roi(text: str) -> tuple[int, int, int, int]:
    parts = text.replace(" ", "").split(",")
    if len(parts) != 4:
        raise HTTPException(400, f"roi must be 'x,y,w,h', got {text!r}")
    try:
        x, y, w, h = (int(p) for p in parts)
    except ValueError:
        raise HTTPException(400, f"roi fields must be integers, got {text!r}")
    return x, y, w, h


def _parse_config(fields: dict[str, str]) -> QueryConfig:
    kwargs: dict = {}
    for name, raw in fields.items():
        try:
            if name in _INT_FIELDS:
                kwargs[name] = int(raw)
            elif name in _FLOAT_FIELDS:
                kwargs[name] = float(raw)
            else:
                kwargs[name] = raw
        except ValueError:
            raise HTTPException(400, f"config field {name}: bad value {raw!r}")
    try:
        return QueryConfig(**kwargs)
    except ValueError as e:
        raise HTTPException(400, str(e))


def _decode_upload(data: bytes) -> np.ndarray:
    if not data:
        raise HTTPException(400, "empty image upload")
    img = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_COLOR)
    if img is None:
        raise HTTPException(400, "cannot decode uploaded image")
    return img


def _ellipse(kp: EllipseKeypoint) -> dict:
    return {
        "x": float(kp.x[0]),
        "y": float(kp.x[1]),
        "a": float(kp.shape.a),
        "b": float(kp.shape.b),
        "c": float(kp.shape.c),
    }


def _overlay_pairs(ms: MatchSet, fs_q, fs_db) -> list[dict]:
    return [
        {
            "query": _ellipse(fs_q.keypoints[int(j)]),
            "db": _ellipse(fs_db.keypoints[int(i)]),
            "score": float(score),
        }
        for i, j, score in ms.triples
    ]


def _image_entry(catalog: Catalog, scored: ScoredImage, fs_q) -> dict:
    rec = catalog.images[scored.image_id]
    entry = {
        "image_id": scored.image_id,
        "label_id": rec.label_id,
        "label_name": (
            catalog.labels[rec.label_id].name if rec.label_id is not None else None
        ),
        "roi": list(rec.roi),
        "score": scored.score,
        "initial_score": scored.initial_score,
        "reranked": scored.reranked_score is not None,
        "matches": [],
    }
    if scored.inlier_matches is not None and len(scored.inlier_matches):
        fs_db = catalog.features(scored.image_id)
        entry["matches"] = _overlay_pairs(scored.inlier_matches, fs_q, fs_db)
        entry["roi_size"] = [fs_db.roi_width, fs_db.roi_height]
    return entry


def _newest_generation(catalog: Catalog, backend: str) -> int:
    gens = [g for g, rec in catalog.generations.items() if rec.backend == backend]
    if not gens:
        raise HTTPException(409, f"no built generation for backend {backend!r}")
    return max(gens)


async def _strict_form(request: Request, allowed: set[str]) -> dict:
    form = await request.form()
    unknown = set(form) - allowed
    if unknown:
        raise HTTPException(400, f"unknown request fields: {sorted(unknown)}")
    return {k: form[k] for k in form}


def _record_json(catalog: Catalog, image_id: int) -> dict:
    rec = catalog.get_image(image_id)
    return {
        "image_id": rec.image_id,
        "source_uri": rec.source_uri,
        "roi": list(rec.roi),
        "label_id": rec.label_id,
        "label_name": (
            catalog.labels[rec.label_id].name if rec.label_id is not None else None
        ),
        "ingest_time": rec.ingest_time,
        "num_keypoints": len(catalog.features(image_id)),
    }


def create_app(catalog_root: str | Path, static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="pattern identification service")
    catalog = Catalog(catalog_root)
    uploads = Path(catalog_root) / "uploads"
    write_lock = threading.Lock()
    app.state.catalog = catalog

    router = APIRouter()

    @router.get("/config")
    def config_defaults() -> dict:
        return QueryConfig().to_json()

    @router.get("/status")
    def status() -> dict:
        gen = catalog.current_generation
        return {
            "num_images": len(catalog.images),
            "num_labels": len(catalog.labels),
            "generation": gen.generation if gen else None,
            "backend": gen.backend if gen else None,
            "dirty": catalog.dirty,
        }

    @router.get("/labels")
    def list_labels() -> dict:
        members: dict[int, list[int]] = {lid: [] for lid in catalog.labels}
        for rec in catalog.images.values():
            if rec.label_id is not None:
                members[rec.label_id].append(rec.image_id)
        return {
            "labels": [
                {
                    "label_id": lid,
                    "name": catalog.labels[lid].name,
                    "image_ids": sorted(members[lid]),
                }
                for lid in sorted(catalog.labels)
            ]
        }

    @router.get("/images/{image_id}")
    def get_image(image_id: int) -> dict:
        return _record_json(catalog, image_id)

    @router.get("/images/{image_id}/file")
    def get_image_file(image_id: int) -> FileResponse:
        rec = catalog.get_image(image_id)
        path = Path(rec.source_uri)
        if not path.is_file():
            raise HTTPException(404, f"source file missing for image {image_id}")
        return FileResponse(path)

    @router.post("/images")
    async def register_image(request: Request) -> dict:
        fields = await _strict_form(request, {"image", "roi", "label"})
        if "image" not in fields or "roi" not in fields:
            raise HTTPException(400, "multipart fields 'image' and 'roi' required")
        data = await fields["image"].read()
        roi = _parse_roi(str(fields["roi"]))
        label = str(fields["label"]) if "label" in fields else None
        _decode_upload(data)  # reject undecodable payloads before persisting
        uploads.mkdir(parents=True, exist_ok=True)
        path = uploads / f"{hashlib.sha1(data).hexdigest()[:16]}.png"
        path.write_bytes(data)

        def _add():
            with write_lock:
                return catalog.add_image(path, roi, label=label)

        rec = await run_in_threadpool(_add)
        return _record_json(catalog, rec.image_id)

    @router.post("/images/{image_id}/label")
    def assign_label(image_id: int, body: LabelAssignment) -> dict:
        if body.expect_new and any(
            lab.name == body.name for lab in catalog.labels.values()
        ):
            raise HTTPException(400, f"label name already exists: {body.name!r}")
        with write_lock:
            rec = catalog.assign_label(image_id, body.name)
        return {
            "image_id": rec.image_id,
            "label_id": rec.label_id,
            "name": catalog.labels[rec.label_id].name,
        }

    @router.post("/rebuild")
    def rebuild(body: RebuildRequest | None = None) -> dict:
        body = body or RebuildRequest()
        if body.backend not in BACKENDS:
            raise HTTPException(400, f"backend must be one of {BACKENDS}")
        with write_lock:
            gen = catalog.build_generation(
                body.backend,
                params={"num_trees": body.num_trees},
                seed=body.seed,
            )
        return {
            "generation": gen.generation,
            "backend": gen.backend,
            "fingerprint": gen.fingerprint,
        }

    @router.post("/query")
    async def query(request: Request) -> dict:
        fields = await _strict_form(request, {"image", "roi"} | _CONFIG_FIELDS)
        if "image" not in fields or "roi" not in fields:
            raise HTTPException(400, "multipart fields 'image' and 'roi' required")
        data = await fields["image"].read()
        roi = _parse_roi(str(fields["roi"]))
        cfg = _parse_config(
            {k: str(v) for k, v in fields.items() if k in _CONFIG_FIELDS}
        )
        img = _decode_upload(data)
        generation = _newest_generation(catalog, cfg.backend)

        def _run():
            t0 = time.perf_counter()
            fs_q = extract_features(img, roi, variant=cfg.descriptor_variant)
            rr = run_query_features(catalog, fs_q, cfg)
            return fs_q, rr, time.perf_counter() - t0

        fs_q, rr, seconds = await run_in_threadpool(_run)
        return {
            "generation": generation,
            "timing_seconds": seconds,
            # overlay ellipses live in preprocessed-ROI coordinates; the
            # client needs the working size to map them onto source pixels
            "query_roi_size": [fs_q.roi_width, fs_q.roi_height],
            "config": rr.config,
            "labels": [
                {
                    "label_id": sl.label_id,
                    "name": catalog.labels[sl.label_id].name,
                    "score": sl.score,
                    "best_image_id": sl.best_image_id,
                }
                for sl in rr.labels
            ],
            "candidates": [_image_entry(catalog, s, fs_q) for s in rr.images],
        }

    app.include_router(router, prefix="/api")
    app.include_router(router, prefix="/api/v1")

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.exception_handler(InvalidRoiError)
    async def bad_roi(request: Request, exc: InvalidRoiError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(ImageNotFoundError)
    async def missing_image(request: Request, exc: ImageNotFoundError):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(EmptyCatalogError)
    async def empty_catalog(request: Request, exc: EmptyCatalogError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(CatalogIntegrityError)
    async def damaged_catalog(request: Request, exc: CatalogIntegrityError):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.exception_handler(CatalogError)
    async def catalog_conflict(request: Request, exc: CatalogError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(ValueError)
    async def bad_value(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
