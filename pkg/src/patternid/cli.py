"""Command-line front end: ingest, index, query, eval, synth, serve.

Every query-shaped subcommand exposes the QueryConfig fields as flags with
identical names and defaults, so a config can be replayed verbatim from any
report's echo. Eval reports print as an aligned text table and can be saved
as JSON.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import cv2

from .catalog import BACKENDS, Catalog, CatalogError
from .features import VARIANTS
from .harness import (
    ALGORITHMS,
    SYNTH_INDIVIDUALITY,
    SYNTH_NOISE,
    SYNTH_SIZE,
    QueryConfig,
    format_report,
    gen_synthetic,
    run_eval,
    run_query,
    save_report,
)
from .matching import SCORING_FNS
from .service import create_app, resolve_port

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

_CHOICES = {
    "algorithm": ALGORITHMS,
    "delta": SCORING_FNS,
    "descriptor_variant": VARIANTS,
    "backend": BACKENDS,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = QueryConfig()
    for f in dataclass_fields(QueryConfig):
        kwargs: dict = {
            "default": getattr(defaults, f.name),
            "dest": f.name,
            "help": f"QueryConfig.{f.name} (default %(default)s)",
        }
        if f.name in _CHOICES:
            kwargs["choices"] = _CHOICES[f.name]
        else:
            kwargs["type"] = type(getattr(defaults, f.name))
        parser.add_argument(f"--{f.name}", **kwargs)


def _config_from_args(args: argparse.Namespace) -> QueryConfig:
    names = [f.name for f in dataclass_fields(QueryConfig)]
    return QueryConfig(**{n: getattr(args, n) for n in names})


def _parse_roi(text: str) -> tuple[int, int, int, int]:
    parts = [int(p) for p in text.replace(" ", "").split(",")]
    if len(parts) != 4:
        raise ValueError(f"roi must be x,y,w,h, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _full_image_roi(path: Path) -> tuple[int, int, int, int]:
    img = cv2.imread(str(path))
    if img is None:
        raise CatalogError(f"cannot read image {path}")
    return (0, 0, img.shape[1], img.shape[0])


def cmd_ingest(args: argparse.Namespace) -> int:
    catalog = Catalog(args.catalog)
    source = Path(args.source)
    added = labeled = 0
    if source.is_dir():
        for path in sorted(source.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            label = None
            if args.label_from_stem and "_" in path.stem:
                label = path.stem.rsplit("_", 1)[0]
            catalog.add_image(path, _full_image_roi(path), label=label)
            added += 1
            labeled += label is not None
    else:
        entries = json.loads(source.read_text())
        for entry in entries:
            path = Path(entry["source"])
            if not path.is_absolute():
                path = source.parent / path
            roi = tuple(entry["roi"]) if entry.get("roi") else _full_image_roi(path)
            label = entry.get("label")
            catalog.add_image(path, roi, label=label)
            added += 1
            labeled += label is not None
    print(f"ingested {added} images ({labeled} labeled) into {catalog.root}")
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    catalog = Catalog(args.catalog)
    params = {"num_trees": args.trees}
    if args.checks:
        params["default_checks"] = args.checks
    gen = catalog.build_generation(args.backend, params=params, seed=args.seed)
    print(f"built generation {gen.generation} ({gen.backend}, "
          f"fingerprint {gen.fingerprint[:12]})")
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    catalog = Catalog(args.catalog)
    config = _config_from_args(args)
    rr = run_query(catalog, args.image, _parse_roi(args.roi), config)
    out = {
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
        "images": [
            {
                "image_id": s.image_id,
                "score": s.score,
                "initial_score": s.initial_score,
                "reranked": s.reranked_score is not None,
            }
            for s in rr.images
        ],
    }
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    catalog = Catalog(args.catalog)
    config = _config_from_args(args)
    report = run_eval(catalog, config, limit=args.limit)
    print(format_report(report))
    if args.out:
        save_report(report, args.out)
        print(f"report written to {args.out}")
    else:
        print(json.dumps(report.to_json(), indent=2))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    catalog = gen_synthetic(
        args.out,
        n_labels=args.labels,
        images_per_label=args.per_label,
        warp_magnitude=args.warp_magnitude,
        noise=args.noise,
        seed=args.seed,
        size=args.size,
        individuality=args.individuality,
    )
    print(f"rendered {args.labels} labels x {args.per_label} images "
          f"into {catalog.root}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    app = create_app(args.catalog, static_dir=args.ui)
    uvicorn.run(app, host=args.host, port=resolve_port(args.port))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patternid",
        description="Instance recognition for patterned animals.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="add a directory or JSON manifest of images")
    p.add_argument("source", help="image directory or manifest.json")
    p.add_argument("--catalog", default="catalog")
    p.add_argument("--label-from-stem", action="store_true",
                   help="derive labels from file names (text before the last _)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build a search generation")
    p.add_argument("--catalog", default="catalog")
    p.add_argument("--backend", choices=BACKENDS, default="kdforest")
    p.add_argument("--trees", type=int, default=4)
    p.add_argument("--checks", type=int, default=0,
                   help="advisory search budget recorded with the generation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank catalog labels for one image region")
    p.add_argument("image")
    p.add_argument("--roi", required=True, help="x,y,w,h in source pixels")
    p.add_argument("--catalog", default="catalog")
    p.add_argument("--out", default=None, help="also write the JSON result here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="leave-one-out evaluation over the catalog")
    p.add_argument("--catalog", default="catalog")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--limit", type=int, default=None,
                   help="evaluate only the first N eligible queries")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic labeled catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", type=int, default=50)
    p.add_argument("--per-label", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=SYNTH_NOISE)
    p.add_argument("--warp-magnitude", type=float, default=1.0)
    p.add_argument("--size", type=int, default=SYNTH_SIZE)
    p.add_argument("--individuality", type=float, default=SYNTH_INDIVIDUALITY)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--catalog", default="catalog")
    p.add_argument("--port", type=int, default=None,
                   help="defaults to $HS_PORT or 8000")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui", default=None, help="static directory for the review UI")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CatalogError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
