"""Directory format for datasets shared by the generators, the ingester and the CLI.

Files (headered CSV, UTF-8):

* ``features.csv``: ``content_id,seen,x_1..x_Q``
* ``requests.csv``: ``content_id,slot,count`` for seen contents, every slot listed
* ``catalog.csv``: ``content_id,size``
* ``truth.csv``: ``content_id,lambda,popularity`` (only when ground truth exists)
* ``eval.csv``: ``content_id,count`` held-out request totals (only when present)
* ``meta.json``: generator settings and provenance of the dataset
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from pgpcache.cache import ContentCatalog
from pgpcache.datagen import SyntheticDataset
from pgpcache.errors import InvalidInputError
from pgpcache.posterior import RequestMatrix


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None or [h.strip() for h in got[: len(header)]] != header:
            raise InvalidInputError(f"{path.name}: expected header starting {','.join(header)}, got {got}")
        return got, [row for row in reader if row]


def save_dataset(ds: SyntheticDataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ids = ds.content_ids
    q = ds.features.shape[1]
    _write_rows(out / "features.csv", ["content_id", "seen"] + [f"x_{j + 1}" for j in range(q)],
                ([int(i), int(s)] + [_fmt(v) for v in row]
                 for i, s, row in zip(ids, ds.seen_mask, ds.features)))
    seen_ids = ids[ds.seen_mask]
    counts = ds.requests.counts
    _write_rows(out / "requests.csv", ["content_id", "slot", "count"],
                ([int(seen_ids[m]), n + 1, int(counts[m, n])]
                 for m in range(counts.shape[0]) for n in range(counts.shape[1])))
    _write_rows(out / "catalog.csv", ["content_id", "size"],
                ([int(i), _fmt(s)] for i, s in zip(ids, ds.catalog.sizes)))
    if ds.true_lambdas is not None:
        _write_rows(out / "truth.csv", ["content_id", "lambda", "popularity"],
                    ([int(i), _fmt(lam), _fmt(r)]
                     for i, lam, r in zip(ids, ds.true_lambdas, ds.true_popularities)))
    if ds.future_counts is not None:
        _write_rows(out / "eval.csv", ["content_id", "count"],
                    ([int(i), int(c)] for i, c in zip(ids, ds.future_counts)))
    meta = dict(ds.meta)
    meta["n_slots"] = ds.n_slots
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_dataset(directory) -> SyntheticDataset:
    src = Path(directory)
    if not src.is_dir():
        raise FileNotFoundError(f"dataset directory {src} not found")
    header, rows = _read_rows(src / "features.csv", ["content_id", "seen"])
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    seen = np.array([int(r[1]) for r in rows], dtype=bool)
    q = len(header) - 2
    features = np.array([[float(v) for v in r[2:]] for r in rows], dtype=float).reshape(len(rows), q)
    pos = {int(i): k for k, i in enumerate(ids)}

    meta = {}
    if (src / "meta.json").exists():
        with open(src / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)

    _, req_rows = _read_rows(src / "requests.csv", ["content_id", "slot", "count"])
    seen_ids = ids[seen]
    seen_pos = {int(i): k for k, i in enumerate(seen_ids)}
    n_slots = int(meta.get("n_slots", 0)) or max((int(r[1]) for r in req_rows), default=0)
    if n_slots < 1:
        raise InvalidInputError("requests.csv lists no slots")
    counts = np.zeros((seen_ids.size, n_slots), dtype=np.int64)
    for cid, slot, cnt in req_rows:
        cid, slot = int(cid), int(slot)
        if cid not in seen_pos or not 1 <= slot <= n_slots:
            raise InvalidInputError(f"requests.csv row ({cid}, {slot}) outside the seen contents or slot range")
        counts[seen_pos[cid], slot - 1] = int(cnt)

    _, cat_rows = _read_rows(src / "catalog.csv", ["content_id", "size"])
    sizes = np.empty(ids.size)
    for cid, size in cat_rows:
        sizes[pos[int(cid)]] = float(size)

    true_lam = true_pop = future = None
    if (src / "truth.csv").exists():
        _, rows = _read_rows(src / "truth.csv", ["content_id", "lambda", "popularity"])
        true_lam = np.empty(ids.size)
        true_pop = np.empty(ids.size)
        for cid, lam, pop in rows:
            true_lam[pos[int(cid)]] = float(lam)
            true_pop[pos[int(cid)]] = float(pop)
    if (src / "eval.csv").exists():
        _, rows = _read_rows(src / "eval.csv", ["content_id", "count"])
        future = np.zeros(ids.size, dtype=np.int64)
        for cid, cnt in rows:
            future[pos[int(cid)]] = int(cnt)

    # seen contents first, matching the in-memory layout of the generators
    order = np.concatenate([np.flatnonzero(seen), np.flatnonzero(~seen)])
    pick = (lambda a: None if a is None else a[order])
    return SyntheticDataset(
        features=features[order],
        requests=RequestMatrix(counts),
        catalog=ContentCatalog(sizes[order], seen[order]),
        true_lambdas=pick(true_lam),
        true_popularities=pick(true_pop),
        future_counts=pick(future),
        content_ids=ids[order],
        meta=meta,
    )
