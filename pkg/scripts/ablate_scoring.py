"""Scoring ablation: delta function x neighborhood size.

Sweeps the four match-score functions against k on one catalog and prints a
single table, optionally with spatial verification disabled (k_sr=0) for an
initial-ranking-only column:

    python3 scripts/ablate_scoring.py --out runs/ablation --fresh
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
from patternid.matching import SCORING_FNS


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--fresh", action="store_true",
                    help="wipe --out before generating")
    ap.add_argument("--labels", type=int, default=20)
    ap.add_argument("--per-label", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=SYNTH_SIZE)
    ap.add_argument("--noise", type=float, default=SYNTH_NOISE)
    ap.add_argument("--individuality", type=float, default=SYNTH_INDIVIDUALITY)
    ap.add_argument("--ks", type=int, nargs="+", default=[1, 5])
    ap.add_argument("--no-rerank", action="store_true",
                    help="also run each cell with k_sr=0")
    ap.add_argument("--limit", type=int, default=None)
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
    catalog.build_generation("kdforest", seed=args.seed)
    print(f"catalog ready in {time.perf_counter() - t0:.0f}s")

    headers = ["delta", "k", "k_sr", "#queries", "Rank>1 (LS)",
               "Rank>5 (LS)", "top-1", "TPQ (sec)"]
    rows = []
    for delta in SCORING_FNS:
        for k in args.ks:
            variants = [50] + ([0] if args.no_rerank else [])
            for k_sr in variants:
                cfg = QueryConfig(delta=delta, k=k, k_sr=k_sr)
                rep = run_eval(catalog, cfg, limit=args.limit)
                n = len(rep.rows)
                rows.append([delta, str(k), str(k_sr), str(n),
                             str(rep.gt1_label), str(rep.gt5_label),
                             f"{1 - rep.gt1_label / n:.3f}",
                             f"{rep.tpq:.3f}"])
                print(f"  done delta={delta} k={k} k_sr={k_sr}")

    print()
    widths = [max(len(h), *(len(r[i]) for r in rows))
              for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
