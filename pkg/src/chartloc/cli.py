"""chartloc command line: generate | train-chart | build-index | train-loc | evaluate | bench.

Every command takes ``--config PATH --seed N --out DIR`` and reads / writes
fixed artifact names inside ``DIR``. Exit codes: 0 ok, 2 config error,
3 data error (missing or corrupt artifacts), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .channel_sim import ConfigError, GeometryError
from .nn.checkpoint import CheckpointError

log = logging.getLogger("chartloc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATASET = "dataset.csids"
CHART = "chart.nnck"
EMBEDDINGS = "embeddings.csv"
DB_MANIFEST = "db_manifest.json"
DB_DATASET = "db.csids"
DB_EMBEDDINGS = "db_embeddings.csv"
LOC = "loc.nnck"
METRICS = "metrics.json"
PER_SAMPLE = "per_sample.csv"
BENCH = "bench.json"


class StageError(RuntimeError):
    """A required upstream artifact is missing."""


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path}; run `chartloc {stage}` first")
    return path


def _context(args):
    from .experiment import load_configs

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    exp, scen = load_configs(args.config, overrides)
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    return exp, scen, out


def _load_dataset(out: Path, exp):
    from .io import read_dataset

    ds = read_dataset(_require(out / DATASET, "generate"))
    if len(ds) != exp.n_total:
        raise ConfigError(f"dataset has {len(ds)} samples but config n_total={exp.n_total}")
    return ds


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    from .experiment import make_dataset
    from .io import dump_scenario, read_dataset, write_dataset

    exp, scen, out = _context(args)
    ds = make_dataset(exp, scen)
    write_dataset(out / DATASET, ds)
    (out / "scenario.cfg").write_text(dump_scenario(scen))
    # report stats of what was written (f32-rounded) so they match downstream stages
    ds = read_dataset(out / DATASET)
    power = float(np.mean(np.abs(ds.csi) ** 2))
    noise = scen.noise_std ** 2
    snr = 10 * np.log10(max(power - noise, 1e-300) / noise) if noise > 0 else float("inf")
    print(f"wrote {out / DATASET}: n={len(ds)} csi_shape={tuple(ds.csi.shape[1:])} snr_db={snr:.1f}")
    return EXIT_OK


def cmd_train_chart(args) -> int:
    from .charting import save_chart
    from .experiment import fit_chart
    from .io import write_embeddings

    exp, scen, out = _context(args)
    ds = _load_dataset(out, exp)
    chart = fit_chart(exp, ds.csi)
    save_chart(out / CHART, chart)
    write_embeddings(out / EMBEDDINGS, chart.encode_many(ds.csi))
    hist = getattr(chart, "history", None)
    tail = f" final_loss={hist[-1]:.6g}" if hist else ""
    print(f"wrote {out / CHART}: variant={chart.variant}{tail}")
    return EXIT_OK


def cmd_build_index(args) -> int:
    from .charting import load_chart
    from .experiment import split_indices
    from .io import write_dataset, write_embeddings, write_manifest
    from .retrieval import build_db

    exp, scen, out = _context(args)
    ds = _load_dataset(out, exp)
    chart = load_chart(_require(out / CHART, "train-chart"))
    lab, _ = split_indices(exp)
    db = build_db(ds[lab], chart)
    write_dataset(out / DB_DATASET, ds[lab])
    write_embeddings(out / DB_EMBEDDINGS, db.embeddings)
    write_manifest(out / DB_MANIFEST, {"dataset": out / DB_DATASET, "embeddings": out / DB_EMBEDDINGS,
                                       "encoder": out / CHART},
                   {"encoder_id": db.encoder_id, "n_entries": len(db), "source_indices": lab.tolist()})
    print(f"wrote {out / DB_MANIFEST}: n_entries={len(db)}")
    return EXIT_OK


def _load_db(out: Path):
    from .charting import load_chart
    from .io import DataError, read_dataset, read_embeddings, read_manifest
    from .retrieval import FingerprintDb

    files = read_manifest(_require(out / DB_MANIFEST, "build-index"))
    chart = load_chart(files["encoder"])
    ds = read_dataset(files["dataset"])
    emb = read_embeddings(files["embeddings"])
    if emb.shape != (len(ds), chart.config.dim):
        raise DataError(f"embedding table shape {emb.shape} does not match db of {len(ds)} entries")
    doc = json.loads((out / DB_MANIFEST).read_text())
    if doc.get("encoder_id") != chart.fingerprint():
        raise DataError("db manifest encoder_id does not match the chart checkpoint")
    return chart, FingerprintDb(ds.csi, ds.positions, emb, chart.fingerprint())


def cmd_train_loc(args) -> int:
    from .gat_loc import save_loc, train_localizer

    exp, scen, out = _context(args)
    _require(out / CHART, "train-chart")
    chart, db = _load_db(out)
    model = train_localizer(db, chart, exp.loc_config(tuple(db.csi.shape[1:])))
    save_loc(out / LOC, model)
    print(f"wrote {out / LOC}: final_mse={model.history[-1]:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiment import split_indices
    from .gat_loc import error_metrics, evaluate, load_loc
    from .retrieval import wknn_batch

    exp, scen, out = _context(args)
    ds = _load_dataset(out, exp)
    chart, db = _load_db(out)
    model = load_loc(_require(out / LOC, "train-loc"))
    split = getattr(args, "split", "test")
    lab, test = split_indices(exp)
    idx = test if split == "test" else lab
    if len(idx) == 0:
        raise ConfigError(f"{split} split is empty (n_total={exp.n_total}, n_labeled={exp.n_labeled})")
    # db rows are the labeled samples in sorted order, so train queries leave out row i
    exclude = np.arange(len(lab)) if split == "train" else None
    res = evaluate(model, chart, db, ds[idx], exp.k, exp.retrieval, exclude)
    wk = error_metrics(wknn_batch(db, ds.csi[idx], exp.k, exclude), ds.positions[idx])
    variant = chart.variant if exp.retrieval == "latent" else exp.retrieval
    doc = {key: res[key] for key in ("mae", "p50", "p90", "n_test", "K")}
    doc["retrieval_variant"] = variant
    doc["split"] = split
    doc["leave_one_out"] = split == "train"
    doc["wknn"] = {key: wk[key] for key in ("mae", "p50", "p90", "n_test")}
    doc["wknn"]["K"] = exp.k
    (out / METRICS).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(out / PER_SAMPLE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x_true", "y_true", "x_hat", "y_hat", "error"])
        for i, t, p, e in zip(idx, ds.positions[idx], res["predictions"], res["errors"]):
            w.writerow([int(i), *(repr(float(v)) for v in (t[0], t[1], p[0], p[1], e))])
    print(f"{split}: gat mae={res['mae']:.4f} p50={res['p50']:.4f} p90={res['p90']:.4f} | "
          f"wknn mae={wk['mae']:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import MIN_QUERIES, run_bench
    from .charting import load_chart
    from .experiment import split_indices

    exp, scen, out = _context(args)
    if exp.n_queries < MIN_QUERIES:
        raise ConfigError(f"n_queries must be >= {MIN_QUERIES}, got {exp.n_queries}")
    ds = _load_dataset(out, exp)
    chart = load_chart(_require(out / CHART, "train-chart"))
    if chart.variant == "isomap":
        raise ConfigError("bench needs an inductive chart; isomap cannot embed unseen queries")
    lab, test = split_indices(exp)
    pool = test if len(test) else lab
    q = pool[np.arange(exp.n_queries) % len(pool)]
    report = run_bench(ds.csi[lab], ds.positions[lab], ds.csi[q], chart, exp.k, threads=1)
    (out / BENCH).write_text(report.to_json())
    for name, m in report.methods.items():
        print(f"{name:>7}: construct {m.construct_s * 1e3:9.2f} ms | query {m.per_query_ms:8.3f} "
              f"+- {m.per_query_ms_std:.3f} ms (n={m.n_queries})")
    print(f"speedup adp/latent: {report.speedup:.1f}x")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train-chart": cmd_train_chart,
    "build-index": cmd_build_index,
    "train-loc": cmd_train_loc,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chartloc", description="Channel-chart retrieval + GAT localization.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, default=None, help="key=value experiment/scenario file")
        s.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        s.add_argument("--out", type=str, default=None, help="artifact directory (overrides the config)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            s.add_argument("--split", choices=("test", "train"), default="test")
    return p


def _threads() -> int | None:
    raw = os.environ.get("CHARTLOC_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CHARTLOC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CHARTLOC_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .io import DataError

    try:
        with threadpool_limits(limits=_threads()):
            return COMMANDS[args.command](args)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, StageError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
