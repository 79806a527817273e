"""Latent vs brute-force ADP retrieval timing, plus scaling sweeps over N_SC and N_lab.

    python3 scripts/bench_retrieval.py                # (4, 8, 1024), N_lab = 1000
    python3 scripts/bench_retrieval.py --sweep        # also N_SC and N_lab scaling
"""

import argparse

import numpy as np

from chartloc.bench import run_bench
from chartloc.channel_sim import ScenarioConfig, generate_dataset
from chartloc.charting import EncoderConfig, new_chart

FOUR_BS = dict(n_bs=4, bs_positions=[(-20, 10), (10, -20), (40, 10), (10, 40)],
               bs_orientations=[0.0, np.pi / 2, np.pi, -np.pi / 2])


def bench(n_sc: int, n_lab: int, n_queries: int, four_bs: bool = True):
    cfg = ScenarioConfig(n_sc=n_sc, **(FOUR_BS if four_bs else {}))
    ds = generate_dataset(cfg, n_lab + n_queries, seed=11)
    # timing does not depend on trained weights, so a fresh encoder is enough
    chart = new_chart(EncoderConfig(input_shape=cfg.csi_shape), "siamese")
    return run_bench(ds.csi[:n_lab], ds.positions[:n_lab], ds.csi[n_lab:], chart)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-queries", type=int, default=100)
    ap.add_argument("--sweep", action="store_true")
    args = ap.parse_args()

    r = bench(1024, 1000, args.n_queries)
    for name, m in r.methods.items():
        print(f"{name:>7}: construct {m.construct_s * 1e3:9.2f} ms  query {m.per_query_ms:8.3f} "
              f"+- {m.per_query_ms_std:.3f} ms")
    print(f"speedup adp/latent at {r.csi_shape}, N_lab={r.n_lab}: {r.speedup:.1f}x")
    if not args.sweep:
        return
    print("\nN_SC sweep (N_lab=1000):")
    for n_sc in (64, 256, 1024):
        r = bench(n_sc, 1000, args.n_queries)
        print(f"  n_sc={n_sc:5d} latent={r.methods['latent'].per_query_ms:.3f} ms "
              f"adp={r.methods['adp'].per_query_ms:.3f} ms")
    print("\nN_lab sweep (n_sc=256):")
    for n_lab in (250, 500, 1000, 2000):
        r = bench(256, n_lab, args.n_queries)
        print(f"  n_lab={n_lab:5d} latent={r.methods['latent'].per_query_ms:.3f} ms "
              f"adp={r.methods['adp'].per_query_ms:.3f} ms")


if __name__ == "__main__":
    main()
