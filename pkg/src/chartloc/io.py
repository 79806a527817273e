"""On-disk artifacts: CSIDS1 datasets, key=value scenario files, embedding CSVs, db manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .channel_sim import ConfigError, CsiDataset, ScenarioConfig

CSIDS_MAGIC = b"CSIDS1"
_HEADER = struct.Struct("<6sIIII")


class DataError(ValueError):
    """Malformed or inconsistent artifact on disk."""


# ---------------------------------------------------------------- CSIDS1


def write_dataset(path, ds: CsiDataset) -> None:
    csi = np.asarray(ds.csi)
    n, n_bs, n_rx, n_sc = csi.shape
    pos = np.asarray(ds.positions, dtype="<f4").reshape(n, 2)
    iq = np.empty((n, n_bs, n_rx, n_sc, 2), dtype="<f4")
    iq[..., 0] = csi.real
    iq[..., 1] = csi.imag
    body = np.concatenate([pos.view(np.uint8).reshape(n, -1), iq.view(np.uint8).reshape(n, -1)], axis=1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CSIDS_MAGIC, n, n_bs, n_rx, n_sc))
        fh.write(body.tobytes())


def read_header(path) -> tuple[int, int, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated CSIDS1 header")
    magic, *dims = _HEADER.unpack(raw)
    if magic != CSIDS_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {CSIDS_MAGIC!r}")
    return tuple(dims)


def read_dataset(path) -> CsiDataset:
    n, n_bs, n_rx, n_sc = read_header(path)
    buf = Path(path).read_bytes()[_HEADER.size:]
    per = 2 + 2 * n_bs * n_rx * n_sc
    if len(buf) != 4 * n * per:
        raise DataError(f"{path}: payload has {len(buf)} bytes, header implies {4 * n * per}")
    rec = np.frombuffer(buf, dtype="<f4").reshape(n, per)
    iq = rec[:, 2:].reshape(n, n_bs, n_rx, n_sc, 2).astype(np.float64)
    return CsiDataset(iq[..., 0] + 1j * iq[..., 1], rec[:, :2].astype(np.float64))


# ---------------------------------------------------------------- key=value scenario files


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str):
        return raw
    # tuples / lists of numbers or of pairs: "0,0,20,20" or "-20 10; 10 -20"
    if ";" in raw or (isinstance(current, list) and current and isinstance(current[0], tuple)):
        return [tuple(float(v) for v in part.replace(",", " ").split()) for part in raw.split(";") if part.strip()]
    return [float(v) for v in raw.replace(",", " ").split()]


def parse_kv(text: str, defaults=None, source: str = "<config>") -> dict:
    """Parse ``key=value`` lines (``#`` comments) into typed overrides of ``defaults``."""
    defaults = ScenarioConfig() if defaults is None else defaults
    known = {f.name: getattr(defaults, f.name) for f in fields(defaults)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _parse_value(value, known[key])
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for key {key!r}") from None
    return out


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario config {path}: {exc}") from exc
    return ScenarioConfig(**parse_kv(text, source=str(path)))


def dump_scenario(cfg: ScenarioConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, (list, tuple)) and v and isinstance(v[0], tuple):
            s = "; ".join(" ".join(repr(float(c)) for c in p) for p in v)
        elif isinstance(v, (list, tuple)):
            s = ", ".join(repr(float(c)) for c in v)
        else:
            s = repr(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- embeddings + manifest


def write_embeddings(path, z: np.ndarray) -> None:
    z = np.asarray(z, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"z{i}" for i in range(z.shape[1])])
        for i, row in enumerate(z):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_embeddings(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "index":
        raise DataError(f"{path}: missing embedding CSV header")
    body = rows[1:]
    idx = [int(r[0]) for r in body]
    if idx != list(range(len(body))):
        raise DataError(f"{path}: embedding indices are not 0..{len(body) - 1}")
    return np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), -1)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, entries: dict[str, str | Path], extra: dict | None = None) -> dict:
    """Record each artifact by (relative) file name and content hash."""
    path = Path(path)
    files = {}
    for role, p in entries.items():
        p = Path(p)
        files[role] = {"file": p.name if p.parent == path.parent else str(p), "sha256": sha256_file(p)}
    doc = {"files": files, **(extra or {})}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def read_manifest(path, verify: bool = True) -> dict[str, Path]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    out = {}
    for role, ent in doc.get("files", {}).items():
        p = Path(ent["file"])
        p = p if p.is_absolute() else path.parent / p
        if verify:
            if not p.exists():
                raise DataError(f"manifest {path}: missing {role} file {p}")
            if sha256_file(p) != ent["sha256"]:
                raise DataError(f"manifest {path}: content hash mismatch for {role} ({p})")
        out[role] = p
    return out
