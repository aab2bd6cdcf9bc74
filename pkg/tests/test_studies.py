import math

import numpy as np
import pytest

from gmmil import studies
from gmmil.cli import main
from gmmil.errors import InvalidConfig, NotFactorizable
from gmmil.studies import BLOCKS, STUDIES, default_study, pair_within, run_study


def small(name, **kw):
    base = default_study(name).base.with_(mu1=np.array([1.5, 1.5]), mu0=np.zeros(2), sigma=np.eye(2),
                                          bag_size=40, n_bags=30)
    return default_study(name, base=base, **kw)


@pytest.mark.parametrize("name", STUDIES)
def test_row_count(name):
    grid = {"Study1Sigma": (1.0, 2.0), "Study2Fraction": (0.0, 0.3, 1.0), "Study4Pilot": (0.0, 0.5, math.inf)}
    cfg = small(name, replications=2, grid=grid.get(name, (20, 30)))
    rep = run_study(cfg)
    assert len(rep.rows) == len(cfg.grid) * 2 * len(cfg.estimators) * len(BLOCKS)
    assert len(rep.plot_rows) == len(cfg.grid) * len(cfg.estimators) * len(BLOCKS)
    assert rep.n_failures == 0


def test_estimator_sets():
    assert default_study("Study1Sigma").estimators == ("IMLE", "BMLE")
    assert default_study("Study4Pilot").estimators == ("SMLE",)
    assert default_study("RobHeteroPi").estimators == ("IMLE", "BMLE", "SMLE")


def test_deterministic_and_thread_independent():
    a = run_study(small("Study2Fraction", replications=3, threads=1))
    b = run_study(small("Study2Fraction", replications=3, threads=2))
    assert a.n_failures == 0 and a.rows == b.rows


def test_common_dataset_across_grid():
    # IMLE does not depend on the subsample fraction, so its rows repeat across the grid
    rep = run_study(small("Study2Fraction", replications=2))
    f = rep.squared_errors("IMLE", "mu1")
    assert np.all(f == f[0])


def test_failures_recorded_not_raised(monkeypatch):
    def boom(*args, **kwargs):
        raise NotFactorizable("synthetic")

    monkeypatch.setattr(studies, "fit_bmle", boom)
    rep = run_study(small("Study1Sigma", replications=2, grid=(1.0,)))
    assert rep.n_failures == 2 and rep.failure_rate == 0.5
    bad = [r for r in rep.rows if r["estimator"] == "BMLE"]
    assert all(r["status"] == "failed:NotFactorizable" and math.isnan(r["mse"]) for r in bad)


def test_cli_exit_on_failure_rate(monkeypatch, tmp_path):
    monkeypatch.setattr(studies, "fit_bmle", lambda *a, **k: (_ for _ in ()).throw(NotFactorizable("x")))
    code = main(["study", "Study1Sigma", "--output-dir", str(tmp_path), "--study.replications", "1",
                 "--study.grid", "1", "--sim.p", "2", "--sim.bag_size", "20", "--sim.n_bags", "20"])
    assert code == 4


def test_report_files_embed_manifest(tmp_path):
    cfg = small("Study3SampleSize", replications=2, grid=(20, 30), output_dir=str(tmp_path))
    run_study(cfg)
    text = (tmp_path / "study3samplesize_rows.csv").read_text()
    assert "# study.name=Study3SampleSize" in text and "# sim.mu1=1.5,1.5" in text
    assert (tmp_path / "study3samplesize_plot.csv").exists()


def test_manifest_reruns_identically(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["study", "Study3SampleSize", "--output-dir", str(first), "--study.replications", "2",
                 "--study.grid", "20,30", "--sim.p", "2", "--sim.bag_size", "30", "--study.seed", "4"]) == 0
    assert main(["study", "Study3SampleSize", "--config", str(first / "manifest.txt"),
                 "--output-dir", str(second)]) == 0
    for name in ("study3samplesize_rows.csv", "study3samplesize_plot.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_config_validation():
    with pytest.raises(InvalidConfig):
        default_study("Study1Sigma", replications=0)
    with pytest.raises(InvalidConfig):
        default_study("Study1Sigma", grid=())
    with pytest.raises(InvalidConfig):
        default_study("Study3SampleSize", grid=(10.5,))
    with pytest.raises(InvalidConfig):
        default_study("Study4Pilot", grid=(2.0,))
    with pytest.raises(InvalidConfig):
        default_study("Nope")


def test_paper_scale_shape():
    cfg = default_study("Study3SampleSize", paper_scale=True)
    assert (cfg.base.p, cfg.base.bag_size, cfg.replications) == (50, 1000, 500)


def test_pair_within():
    assert pair_within(0.0, 0.3, 0.8, 0.3)
    assert not pair_within(0.0, 0.1, 0.8, 0.1)
