"""Query-time scaling: one-vs-many versus one-vs-one.

Times both algorithms at increasing database sizes. The one-vs-one pass walks
every database image per query, so it is sampled on a few queries only; the
one-vs-many pass runs the full eligible set. Prints mean TPQ per size plus
the speedup:

    python3 scripts/speed_curve.py --sizes 10 25 50
"""

import argparse
import shutil
import sys
import tempfile
from pathlib import Path

from patternid.harness import QueryConfig, gen_synthetic, run_eval


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=None,
                    help="workdir (default: a temporary directory)")
    ap.add_argument("--sizes", type=int, nargs="+", default=[10, 25, 50],
                    help="label counts to test, 3 images each")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--slow-queries", type=int, default=2,
                    help="queries to sample for the one-vs-one mean")
    args = ap.parse_args(argv)

    workdir = args.out or Path(tempfile.mkdtemp(prefix="speed_curve_"))
    if args.out and args.out.exists():
        print(f"error: {args.out} exists", file=sys.stderr)
        return 2

    headers = ["#labels", "#images", "TPQ 1vM (s)", "TPQ 1v1 (s)", "speedup"]
    rows = []
    for n_labels in args.sizes:
        out = workdir / f"n{n_labels}"
        catalog = gen_synthetic(out, n_labels=n_labels, images_per_label=3,
                                seed=args.seed)
        catalog.build_generation("kdforest", seed=args.seed)
        fast = run_eval(catalog, QueryConfig())
        slow = run_eval(catalog, QueryConfig(algorithm="1v1"),
                        limit=args.slow_queries)
        rows.append([str(n_labels), str(3 * n_labels), f"{fast.tpq:.3f}",
                     f"{slow.tpq:.1f}", f"{slow.tpq / fast.tpq:.0f}x"])
        print(f"  n={n_labels}: 1vM {fast.tpq:.3f}s, 1v1 {slow.tpq:.1f}s")

    print()
    widths = [max(len(h), *(len(r[i]) for r in rows))
              for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))

    if not args.out:
        shutil.rmtree(workdir, ignore_errors=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
