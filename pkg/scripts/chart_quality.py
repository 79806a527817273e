"""Siamese / triplet chart quality on a 500-sample LOS scene (400 train, 100 held out).

    python3 scripts/chart_quality.py --bs-distance 120
"""

import argparse

import numpy as np

from chartloc.channel_sim import generate_dataset, los_scenario
from chartloc.charting import (EncoderConfig, distance_correlation, mine_triplets, train_siamese,
                               train_triplet, triplet_satisfaction)
from chartloc.csi_features import pairwise_dissimilarity


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bs-distance", type=float, default=120.0)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    cfg = los_scenario(args.bs_distance)
    ds = generate_dataset(cfg, 500, seed=args.seed)
    d = pairwise_dissimilarity(ds.csi)
    tr, ho = np.arange(400), np.arange(400, 500)
    dh = d[np.ix_(ho, ho)]
    ec = EncoderConfig(input_shape=cfg.csi_shape, epochs=60, pairs_per_epoch=4000, lr=2e-3)

    trip = mine_triplets(dh, 4000, np.random.default_rng(9))
    print(f"true positions: pearson={distance_correlation(ds.positions[ho], dh):.3f} "
          f"triplet-sat={triplet_satisfaction(ds.positions[ho], trip):.3f}")
    sia = train_siamese(ds.csi[tr], d[np.ix_(tr, tr)], ec)
    print(f"siamese held-out pearson = {distance_correlation(sia.encode_many(ds.csi[ho]), dh):.3f}")
    tri = train_triplet(ds.csi[tr], d[np.ix_(tr, tr)], ec)
    print(f"triplet held-out satisfaction = {triplet_satisfaction(tri.encode_many(ds.csi[ho]), trip):.3f}")


if __name__ == "__main__":
    main()
