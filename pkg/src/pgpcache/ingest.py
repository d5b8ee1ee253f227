"""MovieLens ratings to windowed request matrices.

Every rating counts as one request.  The span is cut into bimonthly
calendar intervals (UTC).  Each interval trains on its first 30 days (one
slot per day) and evaluates on the following 30 days, clipped at the end of
the interval.  Features are 18 binary genre indicators.
"""

from __future__ import annotations

import csv
import logging
import math
from array import array
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from pgpcache.cache import ContentCatalog
from pgpcache.datagen import SyntheticDataset
from pgpcache.errors import InvalidInputError
from pgpcache.posterior import RequestMatrix

log = logging.getLogger(__name__)

GENRES = (
    "Action", "Adventure", "Animation", "Children", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)
_GENRE_INDEX = {g: i for i, g in enumerate(GENRES)}
_GENRE_INDEX["Children's"] = _GENRE_INDEX["Children"]

RATINGS_HEADER = ["userId", "movieId", "rating", "timestamp"]
MOVIES_HEADER = ["movieId", "title", "genres"]
DAY = 86400
MAX_BAD_FRACTION = 0.01


@dataclass
class MovieTable:
    movie_ids: np.ndarray
    titles: list
    features: np.ndarray

    def __post_init__(self):
        self._row = {int(m): k for k, m in enumerate(self.movie_ids)}

    def __contains__(self, movie_id) -> bool:
        return int(movie_id) in self._row

    def features_for(self, movie_ids) -> np.ndarray:
        return self.features[[self._row[int(m)] for m in movie_ids]].reshape(-1, len(GENRES))


@dataclass
class RatingsLog:
    user_ids: np.ndarray
    movie_ids: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    source_path: str = ""
    n_skipped: int = 0

    @property
    def n_records(self) -> int:
        return self.timestamps.size

    @property
    def n_rows(self) -> int:
        """Data rows read, malformed ones included."""
        return self.n_records + self.n_skipped


def genre_vector(genres: str) -> np.ndarray:
    """Indicator vector for a pipe-separated genre string; unknown tags are ignored."""
    vec = np.zeros(len(GENRES))
    for tag in genres.split("|"):
        k = _GENRE_INDEX.get(tag.strip())
        if k is not None:
            vec[k] = 1.0
    return vec


def _open_checked(path, header):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    fh = open(path, newline="", encoding="utf-8-sig")
    reader = csv.reader(fh)
    got = next(reader, None)
    if got is None or [h.strip() for h in got] != header:
        fh.close()
        raise InvalidInputError(f"{path.name}: malformed header {got!r}, expected {','.join(header)}")
    return fh, reader


def parse_movies(movies_path) -> MovieTable:
    fh, reader = _open_checked(movies_path, MOVIES_HEADER)
    ids, titles, feats = [], [], []
    with fh:
        for row in reader:
            if len(row) != 3:
                raise InvalidInputError(f"movies file line {reader.line_num}: expected 3 fields")
            try:
                ids.append(int(row[0]))
            except ValueError as exc:
                raise InvalidInputError(f"movies file line {reader.line_num}: bad movieId") from exc
            titles.append(row[1])
            feats.append(genre_vector(row[2]))
    order = np.argsort(ids, kind="stable")
    feats = np.array(feats).reshape(-1, len(GENRES))
    return MovieTable(np.array(ids, dtype=np.int64)[order], [titles[k] for k in order], feats[order])


def parse_ratings(ratings_path, movies_path, max_bad_fraction: float = MAX_BAD_FRACTION):
    """Read ratings and the movie table; returns ``(RatingsLog, MovieTable)``.

    Rows with the wrong field count, unparsable values, negative timestamps
    or unknown movies are skipped; more than ``max_bad_fraction`` of them
    aborts the parse.
    """
    movies = parse_movies(movies_path)
    fh, reader = _open_checked(ratings_path, RATINGS_HEADER)
    users, items, stamps = array("q"), array("q"), array("q")
    values = array("d")
    bad = 0
    with fh:
        for row in reader:
            try:
                if len(row) != 4:
                    raise ValueError
                u, m, r, t = int(row[0]), int(row[1]), float(row[2]), int(row[3])
                if t < 0 or m not in movies or not math.isfinite(r):
                    raise ValueError
            except ValueError:
                bad += 1
                continue
            users.append(u)
            items.append(m)
            values.append(r)
            stamps.append(t)
    total = len(stamps) + bad
    if total and bad > max_bad_fraction * total:
        raise InvalidInputError(f"{bad} of {total} rating rows malformed (limit {max_bad_fraction:.0%})")
    if bad:
        log.warning("skipped %d malformed rating rows", bad)
    rlog = RatingsLog(np.frombuffer(users, dtype=np.int64).copy(),
                      np.frombuffer(items, dtype=np.int64).copy(),
                      np.frombuffer(values, dtype=float).copy(),
                      np.frombuffer(stamps, dtype=np.int64).copy(),
                      str(ratings_path), bad)
    return rlog, movies


def _epoch(year, month) -> int:
    return int(datetime(year, month, 1, tzinfo=timezone.utc).timestamp())


def bimonthly_intervals(year_span=(2010, 2011)):
    """``(start, end)`` epoch seconds of each two-month interval, half-open."""
    first, last = year_span
    if last < first:
        raise InvalidInputError("year span must be increasing")
    out = []
    for year in range(first, last + 1):
        for month in range(1, 13, 2):
            end = _epoch(year + 1, 1) if month == 11 else _epoch(year, month + 2)
            out.append((_epoch(year, month), end))
    return out


@dataclass
class WindowedDataset:
    train: RequestMatrix
    eval_counts: np.ndarray
    features: np.ndarray
    movie_ids: np.ndarray
    seen_mask: np.ndarray
    window_index: int
    start: int
    eval_end: int

    def to_dataset(self, sizes=None) -> SyntheticDataset:
        """Package as the shared dataset container (unit sizes unless given)."""
        n = self.movie_ids.size
        sizes = np.ones(n) if sizes is None else np.asarray(sizes, dtype=float)
        return SyntheticDataset(
            features=self.features,
            requests=self.train,
            catalog=ContentCatalog(sizes, self.seen_mask),
            future_counts=self.eval_counts,
            content_ids=self.movie_ids,
            meta={"mode": "movielens", "window": self.window_index,
                  "start": self.start, "eval_end": self.eval_end},
        )


@dataclass
class WindowReport:
    windows: list
    n_rows: int
    n_skipped: int
    n_out_of_window: int
    train_events: np.ndarray
    eval_events: np.ndarray
    skipped_windows: list = field(default_factory=list)

    def conserved(self) -> bool:
        used = int(self.train_events.sum() + self.eval_events.sum())
        return self.n_rows == used + self.n_out_of_window + self.n_skipped


def window(rlog: RatingsLog, movies: MovieTable, year_span=(2010, 2011), max_contents: int = 500,
           train_days: int = 30, eval_days: int = 30, unseen_fraction: float = 0.25) -> WindowReport:
    """Cut the log into per-interval training matrices and evaluation totals.

    Seen contents are the ``max_contents`` movies with the most training
    requests (ties to the lower id).  Unseen candidates are movies requested
    only in the evaluation part, at most ``ceil(unseen_fraction * M)`` of
    them, newest ids first.  Seen contents come first, each group in
    ascending movie id.
    """
    if rlog.n_records == 0:
        raise InvalidInputError("ratings log is empty")
    if max_contents < 1 or train_days < 1 or eval_days < 0:
        raise InvalidInputError("need max_contents >= 1, train_days >= 1, eval_days >= 0")
    intervals = bimonthly_intervals(year_span)
    ts = rlog.timestamps
    mids = rlog.movie_ids
    train_events = np.zeros(len(intervals), dtype=np.int64)
    eval_events = np.zeros(len(intervals), dtype=np.int64)
    windows, skipped = [], []
    for k, (start, end) in enumerate(intervals):
        train_end = min(start + train_days * DAY, end)
        eval_end = min(train_end + eval_days * DAY, end)
        in_train = (ts >= start) & (ts < train_end)
        in_eval = (ts >= train_end) & (ts < eval_end)
        train_events[k] = in_train.sum()
        eval_events[k] = in_eval.sum()
        if not in_train.any():
            log.warning("interval %d has no training requests; skipped", k)
            skipped.append(k)
            continue
        t_ids, t_counts = np.unique(mids[in_train], return_counts=True)
        top = np.lexsort((t_ids, -t_counts))[:max_contents]
        seen_ids = np.sort(t_ids[top])
        e_ids = np.unique(mids[in_eval])
        fresh = np.setdiff1d(e_ids, t_ids)
        n_unseen = min(fresh.size, math.ceil(unseen_fraction * seen_ids.size))
        unseen_ids = np.sort(fresh[::-1][:n_unseen])
        content_ids = np.concatenate([seen_ids, unseen_ids])

        n_days = (train_end - start) // DAY
        counts = np.zeros((seen_ids.size, n_days), dtype=np.int64)
        pick = in_train & np.isin(mids, seen_ids)
        rows = np.searchsorted(seen_ids, mids[pick])
        days = (ts[pick] - start) // DAY
        np.add.at(counts, (rows, days), 1)

        eval_counts = np.zeros(content_ids.size, dtype=np.int64)
        order = np.argsort(content_ids)
        pick = in_eval & np.isin(mids, content_ids)
        pos = order[np.searchsorted(content_ids[order], mids[pick])]
        np.add.at(eval_counts, pos, 1)

        windows.append(WindowedDataset(
            train=RequestMatrix(counts),
            eval_counts=eval_counts,
            features=movies.features_for(content_ids),
            movie_ids=content_ids,
            seen_mask=np.arange(content_ids.size) < seen_ids.size,
            window_index=k,
            start=start,
            eval_end=eval_end,
        ))
    used = int(train_events.sum() + eval_events.sum())
    return WindowReport(windows, rlog.n_rows, rlog.n_skipped, rlog.n_records - used,
                        train_events, eval_events, skipped)
