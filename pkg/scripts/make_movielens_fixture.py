"""Write the small MovieLens-format fixture and its golden summary.

The golden values are computed here with calendar-date arithmetic, separately
from the ingester's epoch-offset arithmetic, so the two act as mutual checks.

    python3 scripts/make_movielens_fixture.py tests/data/movielens
"""

import csv
import json
import random
import sys
from collections import Counter, defaultdict
from datetime import date, datetime, timezone
from pathlib import Path

N_ROWS = 1000
GENRE_POOL = ["Action", "Adventure", "Animation", "Children", "Comedy", "Crime", "Documentary",
              "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance",
              "Sci-Fi", "Thriller", "War", "Western"]


def movies(rng):
    ids = sorted(rng.sample(range(1, 200), 40))
    rows = []
    for k, mid in enumerate(ids):
        if k == 0:
            genres = "(no genres listed)"
        elif k == 1:
            genres = "Action|Comedy"
        elif k == 2:
            genres = "Children's|IMAX"
        else:
            genres = "|".join(sorted(rng.sample(GENRE_POOL, rng.randint(1, 3))))
        rows.append([mid, f"Movie {mid}, The ({1990 + k % 20})", genres])
    return rows


def ts(y, mo, d, h=0, mi=0, s=0):
    return int(datetime(y, mo, d, h, mi, s, tzinfo=timezone.utc).timestamp())


def ratings(rng, movie_ids):
    lo, hi = ts(2010, 1, 1), ts(2012, 1, 1)
    # popularity skew so that the top-M cap is meaningful
    weights = [1.0 / (k + 1) for k in range(len(movie_ids))]
    rows = []
    special = [
        (movie_ids[1], ts(2010, 1, 31)),            # first second of eval day 1, window 0
        (movie_ids[1], ts(2010, 1, 30, 23, 59, 59)),  # last second of training, window 0
        (movie_ids[2], ts(2011, 12, 31, 12)),       # day 61 of Nov/Dec: outside both parts
        (movie_ids[3], ts(2010, 3, 1)),             # first second of window 1
        (movie_ids[4], ts(2009, 6, 1)),             # before the span
        (movie_ids[4], ts(2012, 2, 1)),             # after the span
    ]
    for mid, t in special:
        rows.append([rng.randint(1, 300), mid, 4.0, t])
    for _ in range(20):
        rows.append([rng.randint(1, 300), rng.choice(movie_ids), 3.5,
                     rng.randint(ts(2008, 1, 1), lo - 1)])
    # a movie that only shows up in the evaluation half of window 2
    rows.append([7, movie_ids[-1], 5.0, ts(2010, 6, 10)])
    n_malformed = 5
    while len(rows) < N_ROWS - n_malformed:
        mid = rng.choices(movie_ids[:-1], weights=weights[:-1])[0]
        rows.append([rng.randint(1, 300), mid, rng.choice([0.5, 1.0, 2.5, 3.0, 4.5, 5.0]),
                     rng.randint(lo, hi - 1)])
    rng.shuffle(rows)
    rows = [[str(v) for v in r] for r in rows]
    malformed = [["12", "notanid", "3.0", str(lo + 5)], ["13", str(movie_ids[0]), "4.0"],
                 ["14", str(movie_ids[0]), "4.0", "-5"], ["15", "999", "2.0", str(lo + 9)],
                 ["16", str(movie_ids[5]), "abc", str(lo + 11)]]
    for k, row in enumerate(malformed):
        rows.insert(100 * (k + 1), row)
    return rows


def golden(rating_rows, movie_ids):
    """Per-interval event summary from calendar dates."""
    known = set(movie_ids)
    skipped = 0
    out_of_window = 0
    train = defaultdict(lambda: defaultdict(Counter))
    evals = defaultdict(Counter)
    for row in rating_rows:
        try:
            if len(row) != 4:
                raise ValueError
            u, mid, r, t = int(row[0]), int(row[1]), float(row[2]), int(row[3])
            if t < 0 or mid not in known:
                raise ValueError
        except ValueError:
            skipped += 1
            continue
        d = datetime.fromtimestamp(t, tz=timezone.utc).date()
        if not 2010 <= d.year <= 2011:
            out_of_window += 1
            continue
        k = (d.year - 2010) * 6 + (d.month - 1) // 2
        offset = (d - date(d.year, 2 * ((d.month - 1) // 2) + 1, 1)).days
        if offset < 30:
            train[k][mid][offset] += 1
        elif offset < 60:
            evals[k][mid] += 1
        else:
            out_of_window += 1
    windows = []
    for k in range(12):
        seen = sorted(train[k])
        unseen = sorted(m for m in evals[k] if m not in train[k])
        windows.append({
            "index": k,
            "train_events": sum(sum(c.values()) for c in train[k].values()),
            "eval_events": sum(evals[k].values()),
            "seen_ids": seen,
            "unseen_candidates": unseen,
            "train_totals": {str(m): sum(train[k][m].values()) for m in seen},
            "eval_totals": {str(m): evals[k][m] for m in sorted(evals[k])},
        })
    first = windows[0]
    return {
        "n_rows": len(rating_rows),
        "n_skipped": skipped,
        "n_out_of_window": out_of_window,
        "windows": windows,
        "window0_matrix": {str(m): {str(d): c for d, c in sorted(train[0][m].items())}
                           for m in first["seen_ids"]},
    }


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20100101)
    movie_rows = movies(rng)
    movie_ids = [r[0] for r in movie_rows]
    rating_rows = ratings(rng, movie_ids)
    with open(out / "movies.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["movieId", "title", "genres"])
        w.writerows(movie_rows)
    with open(out / "ratings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["userId", "movieId", "rating", "timestamp"])
        w.writerows(rating_rows)
    with open(out / "golden.json", "w", encoding="utf-8") as fh:
        json.dump(golden(rating_rows, movie_ids), fh, indent=1, sort_keys=True)
        fh.write("\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data/movielens")
