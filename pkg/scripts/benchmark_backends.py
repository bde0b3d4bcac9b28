"""Backend comparison on a synthetic catalog.

Generates a labeled catalog, builds both search backends over the same
descriptor pool, and evaluates every database image whose label has a second
sighting. Rows share one aligned table so the backends line up visually:

    python3 scripts/benchmark_backends.py --out runs/backends --fresh
"""

import argparse
import shutil
import sys
import time
from pathlib import Path

from patternid.harness import (
    SYNTH_INDIVIDUALITY,
    SYNTH_NOISE,
    SYNTH_SIZE,
    QueryConfig,
    gen_synthetic,
    run_eval,
)


def print_table(reports) -> None:
    headers = ["configuration", "#queries", "Rank>1 (LS)", "Rank>5 (LS)",
               "Rank>1 (IS)", "Rank>5 (IS)", "top-1", "TPQ (sec)"]
    rows = []
    for rep in reports:
        cfg = rep.config
        checks = "exact" if cfg["max_checks"] == 0 else f'checks={cfg["max_checks"]}'
        name = "{algorithm} k={k} {delta} {backend} ".format(**cfg) + checks
        n = len(rep.rows)
        rows.append([name, str(n), str(rep.gt1_label), str(rep.gt5_label),
                     str(rep.gt1_image), str(rep.gt5_image),
                     f"{1 - rep.gt1_label / n:.3f}", f"{rep.tpq:.3f}"])
    widths = [max(len(h), *(len(r[i]) for r in rows))
              for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/backends"))
    ap.add_argument("--fresh", action="store_true",
                    help="wipe --out before generating")
    ap.add_argument("--labels", type=int, default=50)
    ap.add_argument("--per-label", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=SYNTH_SIZE)
    ap.add_argument("--noise", type=float, default=SYNTH_NOISE)
    ap.add_argument("--individuality", type=float, default=SYNTH_INDIVIDUALITY)
    ap.add_argument("--limit", type=int, default=None,
                    help="evaluate only the first N eligible queries")
    args = ap.parse_args(argv)

    if args.out.exists():
        if not args.fresh:
            print(f"error: {args.out} exists; pass --fresh to overwrite",
                  file=sys.stderr)
            return 2
        shutil.rmtree(args.out)

    t0 = time.perf_counter()
    catalog = gen_synthetic(
        args.out, n_labels=args.labels, images_per_label=args.per_label,
        seed=args.seed, size=args.size, noise=args.noise,
        individuality=args.individuality,
    )
    print(f"generated {args.labels}x{args.per_label} catalog "
          f"in {time.perf_counter() - t0:.0f}s")

    for backend in ("kdforest", "pq"):
        t0 = time.perf_counter()
        gen = catalog.build_generation(backend, seed=args.seed)
        print(f"built {backend} generation {gen.generation} "
              f"in {time.perf_counter() - t0:.0f}s")

    configs = [
        QueryConfig(backend="kdforest", k=1),
        QueryConfig(backend="kdforest", k=5),
        QueryConfig(backend="kdforest", k=1, max_checks=0),  # exact search
        QueryConfig(backend="pq", k=1),
        QueryConfig(backend="pq", k=5),
    ]
    reports = []
    for cfg in configs:
        reports.append(run_eval(catalog, cfg, limit=args.limit))
        print(f"  evaluated {cfg.backend} k={cfg.k} "
              f"checks={cfg.max_checks or 'exact'}")
    print()
    print_table(reports)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
