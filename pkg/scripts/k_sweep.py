"""MAE versus the number of retrieved reference points K (one localizer per K).

    python3 scripts/k_sweep.py --config configs/default.cfg --ks 5 20 50
"""

import argparse
from dataclasses import replace
from pathlib import Path

from chartloc.experiment import fit_chart, load_configs, make_dataset, split_indices
from chartloc.gat_loc import evaluate, train_localizer
from chartloc.retrieval import build_db


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--ks", type=int, nargs="+", default=[5, 20, 50])
    args = ap.parse_args()
    exp, scen = load_configs(args.config, {} if args.seed is None else {"seed": args.seed})
    ds = make_dataset(exp, scen)
    lab, test = split_indices(exp)
    chart = fit_chart(exp, ds.csi)
    db = build_db(ds[lab], chart)
    for k in args.ks:
        e = replace(exp, k=k)
        model = train_localizer(db, chart, e.loc_config(scen.csi_shape))
        r = evaluate(model, chart, db, ds[test], k)
        print(f"K={k:3d}  mae={r['mae']:.3f}  p50={r['p50']:.3f}  p90={r['p90']:.3f}", flush=True)


if __name__ == "__main__":
    main()
