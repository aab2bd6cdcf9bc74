import csv
import json

import numpy as np
import pytest

from gmmil.cli import main
from gmmil.errors import InvalidConfig, ParseError, SchemaError
from gmmil.io import (build_em_options, build_sim_config, parse_config_text, read_dataset, read_params,
                      write_dataset, write_params)
from gmmil.model import Bag, BagDataset, Instance, flatten, validate
from gmmil.simulate import default_config, simulate


def assert_same(a, b):
    np.testing.assert_array_equal(a.x, b.x)
    for name in ("bag", "y", "a", "bag_ids", "instance_ids"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    for name in ("s", "loc"):
        u, v = getattr(a, name), getattr(b, name)
        assert (u is None) == (v is None)
        if u is not None:
            np.testing.assert_array_equal(u, v)


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        d = simulate(default_config(4, n_bags=12, bag_size=9, seed=5))
        write_dataset(d, tmp_path / "d.csv")
        assert_same(read_dataset(tmp_path / "d.csv"), d)

    def test_round_trip_with_s_and_loc(self, tmp_path):
        cfg = default_config(2, n_bags=6, bag_size=16, seed=2).with_(regime="SpatialLabels")
        d = simulate(cfg)
        d = d.replace(s=(np.arange(d.n_instances) % 3 == 0).astype(np.int8) * (d.instance_y == 1))
        write_dataset(d, tmp_path / "d.csv")
        back = read_dataset(tmp_path / "d.csv")
        assert back.loc is not None
        assert_same(back, d)

    def test_line_endings_and_header(self, tmp_path):
        write_dataset(simulate(default_config(2, n_bags=2, bag_size=2)), tmp_path / "d.csv")
        raw = (tmp_path / "d.csv").read_bytes()
        assert b"\r" not in raw
        assert raw.startswith(b"bag_id,instance_id,y,a,s,loc_x,loc_y,x0,x1\n")

    def test_violation_loads_then_validates(self, tmp_path):
        (tmp_path / "d.csv").write_text("bag_id,instance_id,y,a,x0\n0,0,0,1,0.5\n0,1,0,0,0.1\n")
        d = read_dataset(tmp_path / "d.csv")
        assert len(validate(d)) == 1

    def test_missing_x_columns(self, tmp_path):
        (tmp_path / "d.csv").write_text("bag_id,instance_id,y,a\n0,0,1,1\n")
        with pytest.raises(SchemaError) as err:
            read_dataset(tmp_path / "d.csv")
        assert "x0" in err.value.missing

    def test_missing_required(self, tmp_path):
        (tmp_path / "d.csv").write_text("bag_id,instance_id,x0\n0,0,1.0\n")
        with pytest.raises(SchemaError) as err:
            read_dataset(tmp_path / "d.csv")
        assert list(err.value.missing) == ["y"]

    def test_parse_error_line(self, tmp_path):
        (tmp_path / "d.csv").write_text("bag_id,instance_id,y,a,x0\n0,0,1,1,0.5\n0,1,1,0,abc\n")
        with pytest.raises(ParseError) as err:
            read_dataset(tmp_path / "d.csv")
        assert err.value.line == 3

    def test_conflicting_bag_labels(self, tmp_path):
        (tmp_path / "d.csv").write_text("bag_id,instance_id,y,a,x0\n0,0,1,1,0.5\n0,1,0,0,0.1\n")
        with pytest.raises(ParseError):
            read_dataset(tmp_path / "d.csv")

    def test_string_ids_keep_order(self, tmp_path):
        (tmp_path / "d.csv").write_text(
            "bag_id,instance_id,y,a,x0\nslideB,t1,1,-1,0.5\nslideA,t9,0,0,0.1\nslideB,t2,1,-1,0.2\n")
        d = read_dataset(tmp_path / "d.csv")
        assert list(d.bag_ids) == ["slideB", "slideA"]
        assert list(d.instance_ids) == ["t1", "t2", "t9"]


class TestConfig:
    def test_parse(self):
        cfg = parse_config_text("# c\nsim.n_bags = 40  # trailing\n\nem.rel_tol=1e-6\n")
        assert cfg == {"sim.n_bags": "40", "em.rel_tol": "1e-6"}

    def test_bad_line(self):
        with pytest.raises(InvalidConfig):
            parse_config_text("sim.n_bags\n")

    def test_sim_config(self):
        sim = build_sim_config({"sim.p": "2", "sim.mu1": "1,2", "sim.sigma": "2,0,0,2", "sim.n_bags": "7"})
        assert sim.n_bags == 7 and sim.mu1.tolist() == [1.0, 2.0] and sim.sigma[0, 0] == 2.0

    def test_sim_config_errors(self):
        with pytest.raises(InvalidConfig):
            build_sim_config({"sim.n_bags": "many"})
        with pytest.raises(InvalidConfig):
            build_sim_config({"sim.p": "2", "sim.sigma": "1,0,1"})

    def test_em_options(self):
        assert build_em_options({"em.max_iters": "17"}).max_iters == 17
        with pytest.raises(InvalidConfig):
            build_em_options({"em.max_iters": "0"})


def test_params_round_trip(tmp_path):
    t = default_config(3).truth()
    write_params(t, tmp_path / "t.json")
    back = read_params(tmp_path / "t.json")
    np.testing.assert_array_equal(flatten(back), flatten(t))
    assert back.alpha == t.alpha


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


class TestCli:
    def test_pipeline(self, tmp_path, capsys):
        sim, fit, pred = tmp_path / "sim", tmp_path / "fit", tmp_path / "pred"
        assert main(["simulate", "--output-dir", str(sim), "--sim.p", "3", "--sim.n_bags=40",
                     "--sim.bag_size", "60", "--sim.separation", "8", "--seed", "3"]) == 0
        assert main(["fit", str(sim / "dataset.csv"), "--estimator", "imle", "--output-dir", str(fit)]) == 0
        doc = json.loads((fit / "fit.json").read_text())
        truth = read_params(sim / "truth.json")
        assert abs(doc["params"]["pi"] - truth.pi) < 0.03
        assert main(["predict", str(sim / "truth.json"), str(sim / "dataset.csv"), "--output-dir", str(pred)]) == 0
        post = [float(r["posterior"]) for r in _read_csv(pred / "posteriors.csv")]
        assert all(0.0 <= v <= 1.0 for v in post)
        metrics = {(r["level"], r["metric"]): float(r["value"]) for r in _read_csv(pred / "metrics.csv")}
        assert metrics[("bag", "auc")] >= 0.99
        assert "# command=predict" in (pred / "metrics.csv").read_text()

    def test_bmle_and_smle_fits(self, tmp_path):
        sim = tmp_path / "sim"
        main(["simulate", "--output-dir", str(sim), "--sim.p", "2", "--sim.n_bags", "40", "--sim.bag_size", "60"])
        assert main(["fit", str(sim / "dataset.csv"), "--output-dir", str(tmp_path / "b")]) == 0
        assert main(["fit", str(sim / "dataset.csv"), "--estimator", "smle", "--fraction", "0.2",
                     "--output-dir", str(tmp_path / "s"), "--precision", "--asym.mc_samples", "5000"]) == 0
        assert (tmp_path / "s" / "precision.csv").exists()
        assert (tmp_path / "s" / "subsample.csv").exists()

    def test_smle_without_s_is_data_error(self, tmp_path):
        write_dataset(simulate(default_config(2, n_bags=10, bag_size=5)).replace(s=None), tmp_path / "d.csv")
        assert main(["fit", str(tmp_path / "d.csv"), "--estimator", "smle", "--output-dir", str(tmp_path)]) == 3

    def test_all_negative_flags_single_class(self, tmp_path):
        d = BagDataset.from_bags([Bag(i, 0, [Instance(0, [float(i)], 0)]) for i in range(3)])
        write_dataset(d, tmp_path / "d.csv")
        write_params(default_config(1).truth(), tmp_path / "t.json")
        assert main(["predict", str(tmp_path / "t.json"), str(tmp_path / "d.csv"), "--output-dir",
                     str(tmp_path / "o")]) == 0
        rows = _read_csv(tmp_path / "o" / "metrics.csv")
        assert all("SingleClass" in r["flags"] for r in rows if r["level"] == "bag")

    def test_dimension_mismatch_is_data_error(self, tmp_path):
        write_dataset(simulate(default_config(2, n_bags=3, bag_size=3)), tmp_path / "d.csv")
        write_params(default_config(3).truth(), tmp_path / "t.json")
        assert main(["predict", str(tmp_path / "t.json"), str(tmp_path / "d.csv"), "--output-dir",
                     str(tmp_path)]) == 3

    def test_config_errors(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("sim.n_bags=lots\n")
        assert main(["simulate", "--config", str(bad), "--output-dir", str(tmp_path)]) == 2
        assert main(["simulate", "--config", str(tmp_path / "nope.cfg"), "--output-dir", str(tmp_path)]) == 2
        assert main(["study", "Study9", "--output-dir", str(tmp_path)]) == 2

    def test_missing_dataset(self, tmp_path):
        assert main(["fit", str(tmp_path / "none.csv"), "--output-dir", str(tmp_path)]) == 3

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("sim.p=2\nsim.n_bags=5\nsim.bag_size=4\n")
        main(["simulate", "--config", str(cfg), "--sim.n_bags", "7", "--output-dir", str(tmp_path)])
        assert read_dataset(tmp_path / "dataset.csv").n_bags == 7
        assert "sim.n_bags=7" in (tmp_path / "manifest.txt").read_text()

    def test_study_identical_across_threads(self, tmp_path):
        outs = []
        for threads in (1, 3):
            out = tmp_path / f"t{threads}"
            args = ["study", "Study3SampleSize", "--output-dir", str(out), "--threads", str(threads),
                    "--study.replications", "3", "--study.grid", "30,60", "--sim.p", "2", "--sim.bag_size", "40"]
            assert main(args) == 0
            outs.append({f.name: f.read_bytes() for f in sorted(out.iterdir()) if f.suffix == ".csv"})
        assert outs[0] and outs[0] == outs[1]

    def test_asymptotics_command(self, tmp_path):
        assert main(["asymptotics", "--output-dir", str(tmp_path), "--sim.p", "1", "--sim.n_bags", "30",
                     "--sim.bag_size", "20", "--asym.replications", "100"]) == 0
        doc = json.loads((tmp_path / "studentized.json").read_text())
        assert doc["replications"] == 100 and doc["failures"] == 0
