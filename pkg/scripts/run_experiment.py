"""Full pipeline on one config: generate, chart, db, GAT localizer, evaluate against WKNN.

    python3 scripts/run_experiment.py --config configs/default.cfg --seed 0
"""

import argparse
import json
import logging
from pathlib import Path

from chartloc.experiment import load_configs, run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    overrides = {k: v for k, v in (("seed", args.seed), ("out", args.out)) if v is not None}
    exp, scen = load_configs(args.config, overrides)

    res = run_pipeline(exp, scen)
    g, w = res.gat, res.wknn
    print(f"CC-GAT ({exp.chart_variant}) mae={g['mae']:.3f} p50={g['p50']:.3f} p90={g['p90']:.3f}")
    print(f"WKNN               mae={w['mae']:.3f} p50={w['p50']:.3f} p90={w['p90']:.3f}")
    print(f"ratio gat/wknn = {g['mae'] / w['mae']:.3f}")
    print("timings [s]: " + ", ".join(f"{k}={v:.1f}" for k, v in res.timings.items()))

    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"gat": {k: g[k] for k in ("mae", "p50", "p90", "n_test", "K")},
           "wknn": {k: w[k] for k in ("mae", "p50", "p90", "n_test")},
           "timings_s": res.timings, "seed": exp.seed}
    (out / "experiment.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
