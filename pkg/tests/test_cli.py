import json

import numpy as np
import pytest
from scipy import stats

from rqle import cli
from rqle.cli import (convert_tsv, gene_to_line, main, record_to_gene, spearman, truncate_gene)
from rqle.model import RobustConfig, make_gene
from rqle.estimator import rqle_estimate
from rqle.score import score_vector
from rqle.sim import rng_for, sample_nb, simulate_cohort


def write_genes(path, genes, extra_lines=()):
    path.write_text("".join(gene_to_line(g) + "\n" for g in genes) + "".join(extra_lines))
    return str(path)


def read_tsv(path):
    lines = path.read_text().splitlines()
    return lines[0].split("\t"), [line.split("\t") for line in lines[1:]]


def single_gene(gene_id="g1", J=10, count=10, rate=5.0):
    return make_gene(np.full((1, J), rate), [count] * J, gene_id=gene_id)


# --- ingestion ------------------------------------------------------------------

def test_roundtrip_record():
    g = make_gene([[1.0, 0.5, 0.0], [0.2, 0.0, 3.0]], [4, 0, 7], gene_id="x", isoform_ids=["a", "b"])
    assert record_to_gene(json.loads(gene_to_line(g))) == g


@pytest.mark.parametrize("obj,msg", [
    ([], "JSON object"),
    ({"gene_id": "g"}, "missing"),
    ({"gene_id": 3, "isoform_ids": ["a"], "A": [[1]], "counts": [1]}, "gene_id"),
    ({"gene_id": "g", "isoform_ids": ["a"], "A": [[1, 2], [1]], "counts": [1, 2]}, "different lengths"),
    ({"gene_id": "g", "isoform_ids": ["a"], "A": [[1, 2]], "counts": [1, 2.5]}, "integers"),
    ({"gene_id": "g", "isoform_ids": ["a"], "A": [[1, 2]], "counts": [1]}, "expected 2 counts"),
])
def test_bad_records(obj, msg):
    with pytest.raises(ValueError, match=msg):
        record_to_gene(obj)


def test_convert_tsv(tmp_path):
    src = tmp_path / "genes.tsv"
    src.write_text("g1\tiso1\t1\t2\t0\n"
                   "g1\tiso2\t0\t1\t1\n"
                   "g1\t#counts\t3\t5\t2\n"
                   "g2\tonly\t1\t1\n"
                   "g2\t#counts\t4\t4\n")
    genes = list(convert_tsv(src.open()))
    assert [g.gene_id for g in genes] == ["g1", "g2"]
    assert genes[0].isoform_ids == ("iso1", "iso2")
    np.testing.assert_array_equal(genes[0].counts, [3, 5, 2])
    out = tmp_path / "genes.jsonl"
    assert main(["convert", str(src), "-o", str(out)]) == 0
    assert [record_to_gene(json.loads(x)) for x in out.read_text().splitlines()] == genes


def test_convert_rejects_unterminated_block(tmp_path):
    src = tmp_path / "bad.tsv"
    src.write_text("g1\tiso1\t1\t2\ng2\tiso\t1\t1\ng2\t#counts\t1\t1\n")
    assert main(["convert", str(src), "-o", str(tmp_path / "o")]) == cli.EXIT_USAGE


# --- estimate -------------------------------------------------------------------

def test_estimate_single_isoform(tmp_path, capsys):
    src = write_genes(tmp_path / "in.jsonl", [single_gene()])
    out = tmp_path / "out.tsv"
    assert main(["estimate", src, "--threads", "1", "-o", str(out)]) == 0
    header, rows = read_tsv(out)
    assert header == ["gene_id", "isoform_id", "theta_hat", "gene_total", "method", "converged"]
    theta = {r[4]: float(r[2]) for r in rows}
    assert all(r[5] == "true" for r in rows)
    assert theta["MLE"] == pytest.approx(2.0, rel=1e-6)
    # the bias correction E[nu] is not zero at mu = n, so RQLE sits slightly off 2
    assert theta["RQLE"] == pytest.approx(2.0, rel=5e-3)
    g = single_gene()
    cfg = RobustConfig()
    est = rqle_estimate(g, cfg).theta[0]
    assert abs(score_vector(g, [est], cfg)[0]) < 1e-6
    assert theta["RQLE"] == float(f"{est:.6g}")


def test_estimate_skips_low_read_genes_and_bad_lines(tmp_path, capsys):
    genes = [single_gene("keep"), single_gene("low", J=9)]   # 90 reads
    src = write_genes(tmp_path / "in.jsonl", genes, ["{not json\n", "\n"])
    out = tmp_path / "out.tsv"
    assert main(["estimate", src, "--threads", "1", "--methods", "MLE", "-o", str(out)]) == 0
    _, rows = read_tsv(out)
    assert [r[0] for r in rows] == ["keep"]
    err = capsys.readouterr().err
    assert "line 3" in err and "skipped 1" in err and "1 malformed" in err


def test_estimate_nothing_processable(tmp_path):
    src = write_genes(tmp_path / "in.jsonl", [single_gene("low", J=9)])
    assert main(["estimate", src, "--threads", "1", "-o", str(tmp_path / "o")]) == cli.EXIT_EMPTY


def test_estimate_io_error(tmp_path):
    assert main(["estimate", str(tmp_path / "missing.jsonl")]) == cli.EXIT_IO


def test_usage_errors(monkeypatch):
    assert main(["estimate"]) == cli.EXIT_USAGE
    assert main(["bogus"]) == cli.EXIT_USAGE
    assert main(["simulate", "--scheme", "7", "--b", "1", "--phi", "0", "--side", "left"]) == cli.EXIT_USAGE
    assert main(["simulate", "--b", "10"]) == cli.EXIT_USAGE
    monkeypatch.setenv("RQLE_C", "2.5x")
    assert main(["estimate", "x.jsonl"]) == cli.EXIT_USAGE


def test_env_precedence(tmp_path, monkeypatch):
    g = single_gene("g", J=20, count=10)
    src = write_genes(tmp_path / "in.jsonl", [g])
    monkeypatch.setenv("RQLE_MIN_READS", "500")
    assert main(["estimate", src, "--threads", "1", "-o", str(tmp_path / "a")]) == cli.EXIT_EMPTY
    assert main(["estimate", src, "--threads", "1", "--min-reads", "10", "-o", str(tmp_path / "b")]) == 0


def test_estimate_parallel_matches_serial(tmp_path):
    genes = simulate_cohort(12, seed=4)
    src = write_genes(tmp_path / "in.jsonl", genes)
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"o{threads}.tsv"
        assert main(["estimate", src, "--phi", "0.3", "--min-reads", "0", "--threads", threads,
                     "-o", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    _, rows = read_tsv(tmp_path / "o1.tsv")
    seen = list(dict.fromkeys(r[0] for r in rows))
    assert seen == [g.gene_id for g in genes]


# --- dispersion -----------------------------------------------------------------

def test_dispersion_command(tmp_path, capsys):
    genes = []
    for k in range(40):
        rng = rng_for(6, k)
        a = rng.uniform(0.1, 2.0, 50) * 20
        genes.append(make_gene(a[None, :], sample_nb(rng, a, 0.4), gene_id=f"s{k}"))
    genes.append(make_gene(np.ones((2, 30)), [20] * 30, gene_id="multi"))
    genes.append(make_gene(np.ones((1, 30)), [3] * 30, gene_id="shallow"))
    src = write_genes(tmp_path / "in.jsonl", genes)
    out = tmp_path / "phi.tsv"
    assert main(["dispersion", src, "-o", str(out)]) == 0
    header, rows = read_tsv(out)
    assert header == ["gene_id", "theta_hat", "phi_hat"]
    assert rows[-1][0] == "__cohort_mean__" and len(rows) == 41
    assert float(rows[-1][2]) == pytest.approx(0.4, abs=0.1)
    err = capsys.readouterr().err
    assert "multi_isoform=1" in err and "low_median_count=1" in err


def test_dispersion_no_qualifying_genes(tmp_path, capsys):
    src = write_genes(tmp_path / "in.jsonl", [make_gene(np.ones((2, 30)), [20] * 30)])
    assert main(["dispersion", src]) == cli.EXIT_EMPTY
    assert "single-isoform" in capsys.readouterr().err


# --- robustness -----------------------------------------------------------------

def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_matches_rank_pearson(rng):
    for _ in range(100):
        x = rng.integers(0, 8, size=30).astype(float)   # ties on purpose
        y = x + rng.normal(size=30)
        rx, ry = stats.rankdata(x), stats.rankdata(y)
        assert spearman(x, y) == pytest.approx(np.corrcoef(rx, ry)[0, 1], abs=1e-12)


def test_truncate_gene():
    g = make_gene(np.ones((1, 9)), np.arange(9))
    np.testing.assert_array_equal(truncate_gene(g, 0.25).counts, np.arange(2, 9))
    assert truncate_gene(make_gene(np.ones((1, 1)), [3]), 1.0) is None


def test_robustness_identical_data_gives_one(tmp_path):
    genes = [make_gene(np.full((1, 20), 2.0), np.full(20, 10 * (k + 1)), gene_id=f"g{k}") for k in range(6)]
    src = write_genes(tmp_path / "in.jsonl", genes)
    out = tmp_path / "rho.tsv"
    assert main(["robustness", src, "--phi", "0", "--threads", "1", "-o", str(out)]) == 0
    header, rows = read_tsv(out)
    assert header == ["method", "n_genes", "phi", "fraction_removed", "spearman"]
    assert all(float(r[4]) == pytest.approx(1.0) for r in rows)


def test_robustness_estimates_phi(tmp_path, capsys):
    src = write_genes(tmp_path / "in.jsonl", simulate_cohort(40, seed=3))
    assert main(["robustness", src, "--threads", "1", "--min-reads", "0", "-o", str(tmp_path / "r")]) == 0
    assert "cohort dispersion" in capsys.readouterr().err


# --- simulate -------------------------------------------------------------------

def test_simulate_single_cell(tmp_path):
    out = tmp_path / "s.tsv"
    assert main(["simulate", "--scheme", "1", "--b", "10", "--phi", "0", "--side", "left",
                 "--reps", "5", "--seed", "1", "--threads", "1", "-o", str(out)]) == 0
    header, rows = read_tsv(out)
    assert header[:6] == ["scheme", "b", "phi_true", "phi_used", "side", "method"]
    assert [r[5] for r in rows] == ["RQLE", "MLE"]


def test_simulate_phi_used(tmp_path):
    out = tmp_path / "s.tsv"
    assert main(["simulate", "--scheme", "4", "--b", "100", "--phi", "1", "--side", "right",
                 "--phi-used", "0.3", "--reps", "3", "--threads", "1", "-o", str(out)]) == 0
    _, rows = read_tsv(out)
    assert rows[0][2:4] == ["1", "0.3"]


def test_simulate_dispersion_cell(tmp_path):
    out = tmp_path / "d.tsv"
    assert main(["simulate-dispersion", "--b", "10", "--phi", "0.4", "--genes", "10", "--groups", "5",
                 "--threads", "1", "-o", str(out)]) == 0
    header, rows = read_tsv(out)
    assert header[-2:] == ["phi_mean", "phi_se"] and len(rows) == 1


def test_all_cells_covers_every_table():
    cells = cli.all_cell_specs(reps=100, seed=1)
    assert len(cells) == 5 * 18
    misspecified = [spec for spec, used in cells if used == 0.3]
    assert len(misspecified) == 18 and all(int(s.scheme) == 4 for s in misspecified)
