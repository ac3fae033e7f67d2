"""LIBSVM ingestion, subsetting and run-record persistence.

Run records are CSV files with header ``k,gamma,mu,f,f_reg,dir_norm`` and reals
written with 17 significant digits, so every binary64 value reads back
exactly. Each CSV has a ``.meta`` sidecar of ``key=value`` lines and a ``.timing``
sidecar holding the wall time.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optimizers import IterationRecord
from .problems import Dataset

CSV_HEADER = ("k", "gamma", "mu", "f", "f_reg", "dir_norm")


class LibsvmParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class RecordFormatError(ValueError):
    pass


def _parse_label(tok: str, lineno: int) -> int:
    try:
        v = float(tok)
    except ValueError:
        raise LibsvmParseError(lineno, f"invalid label {tok!r}") from None
    if v == 1:
        return 1
    if v in (-1, 0):
        return -1
    raise LibsvmParseError(lineno, f"unknown label {tok!r}")


def read_libsvm(path, dimension: int | None = None) -> Dataset:
    """Parse ``<label> <idx>:<val> ...`` lines (1-based indices) into a Dataset.

    Labels 0/1 are mapped to -1/+1. Blank lines and ``#`` comments are skipped.
    """
    indptr, indices, data, labels = [0], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            labels.append(_parse_label(toks[0], lineno))
            prev = 0
            for tok in toks[1:]:
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise LibsvmParseError(lineno, f"malformed token {tok!r}")
                try:
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise LibsvmParseError(lineno, f"malformed token {tok!r}") from None
                if idx <= prev:
                    raise LibsvmParseError(lineno, f"index {idx} is not increasing")
                prev = idx
                indices.append(idx - 1)
                data.append(val)
            indptr.append(len(indices))
    if not labels:
        raise LibsvmParseError(0, "no examples")
    indices_a = np.array(indices, dtype=np.int64)
    max_dim = int(indices_a.max()) + 1 if len(indices_a) else 1
    if dimension is None:
        dimension = max_dim
    elif dimension < max_dim:
        raise LibsvmParseError(0, f"dimension {dimension} below largest index {max_dim}")
    from .problems import _row_norm_bound
    indptr_a = np.array(indptr, dtype=np.int64)
    data_a = np.array(data, dtype=np.float64)
    return Dataset(indptr_a, indices_a, data_a, np.array(labels, dtype=np.float64),
                   int(dimension), _row_norm_bound(indptr_a, data_a) / 4.0)


def write_libsvm(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(ds.n_samples):
            idx, val = ds.row(i)
            feats = " ".join(f"{j + 1}:{v!r}" for j, v in zip(idx.tolist(), val.tolist()))
            lab = "+1" if ds.labels[i] > 0 else "-1"
            fh.write(f"{lab} {feats}".rstrip() + "\n")


def subset(ds: Dataset, n_sub: int, seed: int) -> Dataset:
    """Uniform sample of ``n_sub`` examples without replacement."""
    if not 1 <= n_sub <= ds.n_samples:
        raise ValueError(f"subset size must lie in [1, {ds.n_samples}], got {n_sub}")
    rows = np.random.default_rng(seed).permutation(ds.n_samples)[:n_sub]
    return ds.take(rows)


@dataclass
class RunRecord:
    config: dict
    seed: int
    algorithm: str
    records: list = field(default_factory=list)
    wall_time_seconds: float = 0.0
    error: str | None = None
    converged: bool = False
    final_x: np.ndarray | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def ks(self) -> np.ndarray:
        return np.array([r.k for r in self.records], dtype=np.int64)


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta")


def _timing_path(path) -> Path:
    return Path(str(path) + ".timing")


def _meta_value(v) -> str:
    if isinstance(v, float):
        return _fmt(v)
    s = str(v)
    if "\n" in s:
        raise RecordFormatError("metadata values must be single-line")
    return s


def write_meta(meta: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(meta):
            if "=" in key or "\n" in key:
                raise RecordFormatError(f"invalid metadata key {key!r}")
            fh.write(f"{key}={_meta_value(meta[key])}\n")


def read_meta(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, val = line.partition("=")
                out[key] = val
    return out


def write_run_csv(rr: RunRecord, path) -> None:
    """Write records plus the ``.meta`` (config, seed, algorithm) and ``.timing`` sidecars."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prev = -1
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for r in rr.records:
            if r.k <= prev:
                raise RecordFormatError("records must be sorted by strictly increasing k")
            prev = r.k
            fh.write(",".join([str(int(r.k)), _fmt(r.gamma), _fmt(r.mu), _fmt(r.f),
                               _fmt(r.f_reg), _fmt(r.dir_norm)]) + "\n")
    meta = {f"config.{k}": v for k, v in rr.config.items()}
    meta.update(seed=rr.seed, algorithm=rr.algorithm, converged=rr.converged)
    if rr.error:
        meta["error"] = rr.error
    write_meta(meta, _meta_path(path))
    # timing lives apart so reruns reproduce the CSV and metadata byte for byte
    write_meta({"wall_time_seconds": rr.wall_time_seconds}, _timing_path(path))


def read_run_csv(path) -> RunRecord:
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise RecordFormatError(f"{path}: unexpected header {header!r}")
        prev = -1
        for row in reader:
            if len(row) != len(CSV_HEADER):
                raise RecordFormatError(f"{path}: row has {len(row)} fields")
            k = int(row[0])
            if k <= prev:
                raise RecordFormatError(f"{path}: k column is not strictly increasing")
            prev = k
            g, mu, f, fr, dn = (float(v) for v in row[1:])
            records.append(IterationRecord(k, g, mu, f, fr, dn))
    meta = read_meta(_meta_path(path)) if _meta_path(path).exists() else {}
    if _timing_path(path).exists():
        meta.update(read_meta(_timing_path(path)))
    config = {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")}
    return RunRecord(config=config, seed=int(meta.get("seed", 0)),
                     algorithm=meta.get("algorithm", config.get("algorithm", "")),
                     records=records,
                     wall_time_seconds=float(meta.get("wall_time_seconds", 0.0)),
                     error=meta.get("error"),
                     converged=meta.get("converged") == "True")


def run_label(rr: RunRecord) -> str:
    label = rr.config.get("label")
    return str(label) if label else rr.algorithm or os.path.basename(str(rr.seed))
