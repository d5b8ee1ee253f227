import csv
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from pgpcache.cache import ContentCatalog
from pgpcache.cli import (
    build_config,
    main,
    parameter_table,
    parse_config_text,
    rep_seeds,
)
from pgpcache.datagen import SyntheticDataset
from pgpcache.dump import save_dataset
from pgpcache.errors import InvalidInputError
from pgpcache.posterior import RequestMatrix

FIXTURE = Path(__file__).parent / "data" / "movielens"


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())}


@pytest.fixture
def one_content(tmp_path):
    counts = np.array([[3, 1, 4, 1, 5, 2, 2, 3]])
    ds = SyntheticDataset(features=np.zeros((1, 1)), requests=RequestMatrix(counts),
                          catalog=ContentCatalog([1.0], [True]), meta={"mode": "fixture"})
    return save_dataset(ds, tmp_path / "one"), counts[0]


def test_config_parsing(tmp_path):
    raw = parse_config_text("# comment\nseed = 5  # trailing\n\nm_grid=10, 20\n")
    assert raw == {"seed": "5", "m_grid": "10, 20"}
    path = tmp_path / "c.cfg"
    path.write_text("seed = 5\nm_grid = 10,20\nsweep = yes\n")
    cfg = build_config(path, {"seed": "9"})
    assert cfg["seed"] == 9 and cfg["m_grid"] == (10, 20) and cfg["sweep"] is True
    assert cfg["n_future"] is None and cfg["alpha0_grid"] == (0.001, 0.5, 1.0, 2.5, 5.0)
    for bad in ({"nope": "1"}, {"seed": "x"}, {"replications": "0"}, {"mode": "movie"}):
        with pytest.raises(InvalidInputError):
            build_config(None, bad)
    with pytest.raises(InvalidInputError):
        parse_config_text("just words\n")


def test_rep_seeds_deterministic_and_distinct():
    a, b = rep_seeds(3, 5), rep_seeds(3, 5)
    assert a == b and len(set(a)) == 5 and len(a[0]) == 4
    assert rep_seeds(4, 5) != a


def test_exit_codes(tmp_path, capsys):
    assert main(["gen", "--set", "bogus=1", "--out", str(tmp_path / "x")]) == 2
    assert main(["fit", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "f")]) == 4
    assert main(["fit", "--out", str(tmp_path / "f")]) == 2


def test_gen_cell_layout_and_reproducible(tmp_path):
    argv = ["gen", "--mode", "cell", "--m", "100", "--n", "20", "--seed", "7"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    files = dir_bytes(tmp_path / "a")
    assert sorted(n for n in files if n.endswith(".csv")) == [
        "catalog.csv", "features.csv", "requests.csv", "truth.csv"]
    _, rows = read_csv(tmp_path / "a" / "features.csv")
    assert len(rows) == 125 and sum(int(r[1]) for r in rows) == 100
    assert files == dir_bytes(tmp_path / "b")


def test_gen_user_sizes(tmp_path):
    assert main(["gen", "--mode", "user", "--omega", "1", "--alpha0", "2.5", "--m", "40",
                 "--n", "5", "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "catalog.csv")
    sizes = [float(r[1]) for r in rows]
    assert len(sizes) == 50 and all(0 < s < 100 for s in sizes)


def test_fit_vb_one_content_matches_quadrature(tmp_path, one_content):
    data, counts = one_content
    out = tmp_path / "fit"
    assert main(["fit", "--data", str(data), "--backend", "vb", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    s = summary["theta"][0] + summary["theta"][1]
    _, rows = read_csv(out / "posterior.csv")
    mean, var = float(rows[0][2]), float(rows[0][3])
    # invert the lognormal-Poisson moments to recover q's parameters
    sigma = math.log1p((var - mean) / mean ** 2)
    mu = math.log(mean) - sigma / 2
    logpost = lambda t: counts.sum() * t - counts.size * math.exp(t) - t * t / (2 * s)
    peak = max(np.linspace(-5, 5, 10001), key=logpost)
    dens = lambda t, k: t ** k * math.exp(logpost(t) - logpost(peak))
    z0, z1 = (integrate.quad(dens, peak - 10, peak + 10, args=(k,), epsrel=1e-12)[0] for k in (0, 1))
    assert mu == pytest.approx(z1 / z0, abs=0.05)
    assert summary["backend"] == "vb" and summary["M"] == 1 and summary["N"] == 8
    header, _ = read_csv(out / "trace.csv")
    assert header[:3] == ["outer_iter", "block", "L"]


def test_fit_reproducible(tmp_path, one_content):
    data, _ = one_content
    for backend in ("vb", "hmc"):
        argv = ["fit", "--data", str(data), "--backend", backend, "--seed", "3",
                "--num-samples", "50", "--burn-in", "20"]
        assert main(argv + ["--out", str(tmp_path / f"{backend}1")]) == 0
        assert main(argv + ["--out", str(tmp_path / f"{backend}2")]) == 0
        assert dir_bytes(tmp_path / f"{backend}1") == dir_bytes(tmp_path / f"{backend}2")
    header, rows = read_csv(tmp_path / "hmc1" / "draws.csv")
    assert len(rows) == 50 and header[0] == "draw"


def test_fit_hmc_huge_step_fails(tmp_path, one_content, capsys):
    data, _ = one_content
    code = main(["fit", "--data", str(data), "--backend", "hmc", "--step-size", "10",
                 "--num-samples", "200", "--burn-in", "200", "--out", str(tmp_path / "h")])
    assert code == 3
    assert "acceptance collapsed" in capsys.readouterr().err


def test_rmse_truth_backend_and_row_count(tmp_path):
    out = tmp_path / "rmse"
    assert main(["rmse", "--backends", "mle,truth", "--replications", "2", "--m-grid", "8",
                 "--n-grid", "5,10", "--out", str(out)]) == 0
    header, rows = read_csv(out / "rmse.csv")
    assert header == ["backend", "M", "N", "replication", "rmse_type1", "rmse_type2"]
    assert len(rows) == 2 * 2 * 2
    for r in rows:
        if r[0] == "truth":
            assert float(r[4]) == 0.0 and float(r[5]) == 0.0
        else:
            assert float(r[4]) > 0 and math.isnan(float(r[5]))
    _, summary = read_csv(out / "rmse_summary.csv")
    assert len(summary) == 4
    assert (out / "rmse_type1.dat").exists() and (out / "rmse.gp").exists()


def test_rmse_vb_writes_thetas(tmp_path):
    out = tmp_path / "rmse"
    assert main(["rmse", "--backends", "vb", "--replications", "1", "--m-grid", "10",
                 "--n-grid", "10", "--out", str(out)]) == 0
    header, rows = read_csv(out / "thetas.csv")
    assert header == ["backend", "M", "N", "replication", "eta"] + [f"alpha_{k}" for k in range(5)]
    assert len(rows) == 1
    assert main(["tables", "--out", str(tmp_path / "tab"), str(out / "thetas.csv")]) == 0
    theader, trows = read_csv(tmp_path / "tab" / "parameters.csv")
    assert theader == ["parameter", "M10_N10_vb", "true_value"]
    assert [r[1] for r in trows] == rows[0][4:]


@pytest.mark.parametrize("fraction,expected", [(0.0, 0.0), (1.0, 1.0)])
def test_chr_capacity_extremes(tmp_path, fraction, expected):
    out = tmp_path / "chr"
    assert main(["chr", "--mode", "user", "--m", "12", "--n", "5", "--replications", "2",
                 "--policies", "pgp-vb,mle,mle-rand", "--capacity-grid", str(fraction),
                 "--out", str(out)]) == 0
    header, rows = read_csv(out / "chr.csv")
    assert header == ["policy", "capacity_fraction", "replication", "chr"]
    assert len(rows) == 3 * 2
    assert all(float(r[3]) == expected for r in rows)


def test_chr_sweep_columns(tmp_path):
    out = tmp_path / "sweep"
    assert main(["chr", "--mode", "user", "--m", "10", "--n", "4", "--replications", "1",
                 "--policies", "mle,mle-rand", "--capacity-grid", "0.3",
                 "--set", "sweep=true", "--set", "alpha0_grid=0.5,2.5", "--set", "omega_grid=1",
                 "--out", str(out)]) == 0
    header, rows = read_csv(out / "chr.csv")
    assert header[:2] == ["omega", "alpha0"] and len(rows) == 2 * 2
    assert (out / "chr_sweep.dat").exists()


def test_ingest_then_chr_on_windows(tmp_path):
    windows = tmp_path / "windows"
    assert main(["ingest", "--ratings", str(FIXTURE / "ratings.csv"),
                 "--movies", str(FIXTURE / "movies.csv"), "--out", str(windows)]) == 0
    report = json.loads((windows / "ingest_report.json").read_text())
    assert report["conserved"] and report["n_rows"] == 1000
    assert len([p for p in windows.iterdir() if p.is_dir()]) == 12
    out = tmp_path / "chr"
    assert main(["chr", "--data", str(windows), "--policies", "pgp-vb,mle-rand",
                 "--capacity-grid", "0.3", "--out", str(out)]) == 0
    _, rows = read_csv(out / "chr.csv")
    for policy in ("pgp-vb", "mle-rand"):
        assert len([r for r in rows if r[0] == policy]) == 12


def test_parameter_table_layout():
    truth = [1e-4, 0.1, 0.25, 0.0, 0.1, 0.5]
    records = [("vb", 100, 20, [1, 2, 3, 4, 5, 6]), ("hmc", 100, 80, [2, 2, 2, 2, 2, 2]),
               ("hmc", 100, 20, [0, 0, 0, 0, 0, 0]), ("hmc", 100, 20, [2, 4, 6, 8, 10, 12])]
    header, rows = parameter_table(records, truth)
    assert header == ["parameter", "M100_N20_hmc", "M100_N80_hmc", "M100_N20_vb", "true_value"]
    assert [r[0] for r in rows] == ["eta", "alpha_0", "alpha_1", "alpha_2", "alpha_3", "alpha_4"]
    assert [r[-1] for r in rows] == [repr(v) for v in truth]
    assert [float(r[1]) for r in rows] == [1, 2, 3, 4, 5, 6]
    single, srows = parameter_table(records[:1], None)
    assert [float(r[1]) for r in srows] == [1, 2, 3, 4, 5, 6] and srows[0][-1] == ""


def test_tables_from_fit_directory(tmp_path, one_content):
    data, _ = one_content
    fit = tmp_path / "fit"
    assert main(["fit", "--data", str(data), "--backend", "vb", "--out", str(fit)]) == 0
    assert main(["tables", "--out", str(tmp_path / "t.csv"), str(fit)]) == 0
    header, rows = read_csv(tmp_path / "t.csv")
    theta = json.loads((fit / "summary.json").read_text())["theta"]
    assert header == ["parameter", "M1_N8_vb", "true_value"]
    assert [float(r[1]) for r in rows] == theta
    assert main(["tables", "--out", str(tmp_path / "t2.csv"), str(tmp_path / "nope")]) == 4


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pgpcache", "gen", "--m", "4", "--n", "2",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "features.csv").exists()
