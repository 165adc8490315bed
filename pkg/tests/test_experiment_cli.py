import csv
import json

import numpy as np
import pytest

from conftest import make_net
from dtdaudit import rules
from dtdaudit.cli import main
from dtdaudit.experiment import (
    ExperimentConfig,
    generate_network,
    run_verification,
    sample_inputs,
)
from dtdaudit.network import forward, save_network

SMALL = ["--dims", "5,5,5", "--samples", "20", "--min-output", "0.0", "--seed", "3"]


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.dims == (10, 10, 10, 10)
        assert cfg.bias_mode == "nonpositive"
        assert cfg.n_samples == 1000 and cfg.min_output == 0.1
        assert cfg.rules == ("lrp0", "gamma:1", "w2", "zplus")

    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig(seed=4, dims=(3, 4, 2), rules=("w2", "eps:0.1"))
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        assert ExperimentConfig.load(path) == cfg

    @pytest.mark.parametrize("bad", [
        {"dims": [3]}, {"bias_mode": "positive"}, {"n_samples": 0}, {"min_output": -1},
        {"fd_step": 0}, {"xi": 10}, {"rules": ["nope"]}, {"colour": "red"},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict(bad)


class TestGeneration:
    def test_default_shape(self):
        net = generate_network(ExperimentConfig())
        assert net.depth == 3
        assert [L.weights.shape for L in net.layers] == [(10, 10)] * 3

    def test_nonpositive_bias(self):
        net = generate_network(ExperimentConfig(seed=1))
        assert max(L.bias.max() for L in net.layers) <= 0

    def test_zero_bias(self):
        net = generate_network(ExperimentConfig(bias_mode="zero"))
        assert all(np.all(L.bias == 0) for L in net.layers)

    def test_deterministic(self):
        a = generate_network(ExperimentConfig(seed=8))
        b = generate_network(ExperimentConfig(seed=8))
        c = generate_network(ExperimentConfig(seed=9))
        assert a.to_dict() == b.to_dict() != c.to_dict()

    def test_sampling_threshold(self):
        cfg = ExperimentConfig(n_samples=50)
        net = generate_network(cfg)
        xs = sample_inputs(net, cfg)
        assert len(xs) == 50
        assert all(forward(net, x).output[0] > 0.1 for x in xs)

    def test_zero_threshold_accepts_positive_nets(self):
        cfg = ExperimentConfig(n_samples=10, min_output=0.0, dims=(3, 1))
        net = make_net(([[0.0, 0.0, 0.0]], [1.0], "relu"))
        rng_first = np.random.SeedSequence(cfg.seed).spawn(2)[1]
        expected = np.random.default_rng(rng_first).standard_normal((10, 3))
        np.testing.assert_array_equal(np.array(sample_inputs(net, cfg)), expected)


class TestVerification:
    def test_all_checks_pass(self):
        results = run_verification(ExperimentConfig(), trials=3)
        failed = [(r.name, r.measured, r.error) for r in results if not r.passed]
        assert not failed

    def test_unknown_check(self):
        with pytest.raises(KeyError):
            run_verification(ExperimentConfig(), only=["nope"])

    def test_lrp0_without_bias_is_caught(self, monkeypatch):
        monkeypatch.setattr(rules, "lrp_denominator",
                            lambda rule, W, a, b: rules.stabilized_denominator(rule, W @ a))
        (result,) = run_verification(ExperimentConfig(), only=["grad_x_input"], trials=5)
        assert not result.passed
        assert result.measured["gap"] > 1e-8


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


class TestTable1Command:
    def test_csv_and_sidecar(self, tmp_path, capsys):
        out = tmp_path / "t1.csv"
        code, io = _run(capsys, "table1", *SMALL, "--out", out)
        assert code == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["rule", "samples", "frac_same_region", "frac_same_output", "seed"]
        assert [r[0] for r in rows[1:]] == ["lrp0", "gamma:1", "w2", "zplus"]
        assert all(r[1] == "20" and r[4] == "3" for r in rows[1:])
        meta = json.loads((tmp_path / "t1.csv.meta.json").read_text())
        assert meta["config"]["seed"] == 3 and "N(0,1)" in meta["init"]
        assert "same linear region" in io.out

    def test_byte_identical(self, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        _run(capsys, "table1", *SMALL, "--out", a)
        _run(capsys, "table1", *SMALL, "--out", b)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.csv.meta.json").read_bytes() == (tmp_path / "b.csv.meta.json").read_bytes()

    def test_linear_override(self, tmp_path, capsys):
        out = tmp_path / "lin.csv"
        assert _run(capsys, "table1", *SMALL, "--activation", "identity", "--out", out)[0] == 0
        for row in list(csv.reader(out.open()))[1:]:
            assert float(row[2]) == 1.0

    def test_stdout(self, capsys):
        code, io = _run(capsys, "table1", *SMALL, "--rules", "w2")
        assert code == 0 and io.out.startswith("rule,samples")

    def test_bad_paths(self, tmp_path, capsys):
        code, io = _run(capsys, "table1", *SMALL, "--network", tmp_path / "missing.json")
        assert code == 2 and "error" in io.err
        code, _ = _run(capsys, "table1", *SMALL, "--out", tmp_path / "no" / "dir.csv")
        assert code == 2

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dims": [4, 4, 4], "n_samples": 5, "min_output": 0.0, "rules": ["zplus"]}))
        code, io = _run(capsys, "table1", "--config", cfg, "--samples", "7")
        assert code == 0
        assert io.out.splitlines()[1].startswith("zplus,7,")
        cfg.write_text("{not json")
        assert _run(capsys, "table1", "--config", cfg)[0] == 2

    def test_invalid_flag_values(self, capsys):
        assert _run(capsys, "table1", "--rules", "bogus")[0] == 2
        assert _run(capsys, "table1", "--samples", "0")[0] == 2


@pytest.fixture
def identity_file(tmp_path):
    path = tmp_path / "id.json"
    save_network(make_net((np.eye(2), [0, 0], "relu")), path)
    return path


class TestExplainCommand:
    def test_identity_zplus(self, identity_file, tmp_path, capsys):
        out = tmp_path / "trace.json"
        code, _ = _run(capsys, "explain", "--network", identity_file, "--input", "5,2",
                       "--rule", "zplus", "--class", "0", "--out", out)
        assert code == 0
        data = json.loads(out.read_text())
        assert data["relevances"][0] == [5.0, 0.0]
        assert data["rule"] == "zplus" and data["class"] == 0

    def test_recursive_with_root_checks(self, identity_file, capsys):
        code, io = _run(capsys, "explain", "--network", identity_file, "--input", "5,2",
                        "--algorithm", "recursive", "--rule", "w2", "--check-roots")
        assert code == 0
        data = json.loads(io.out)
        assert data["algorithm"] == "recursive"
        assert sum(data["relevances"][0]) == pytest.approx(5.0)
        assert len(data["root_checks"]) == len(data["roots"])

    def test_seeded_and_file_inputs(self, identity_file, tmp_path, capsys):
        a = _run(capsys, "explain", "--network", identity_file, "--seed", "4")[1].out
        b = _run(capsys, "explain", "--network", identity_file, "--seed", "4")[1].out
        assert a == b
        inp = tmp_path / "x.json"
        inp.write_text("[1, 2]")
        code, io = _run(capsys, "explain", "--network", identity_file, "--input-file", inp)
        assert code == 0 and json.loads(io.out)["input"] == [1.0, 2.0]

    def test_errors(self, identity_file, capsys):
        assert _run(capsys, "explain", "--network", identity_file, "--rule", "zz+")[0] == 2
        assert _run(capsys, "explain", "--network", identity_file, "--input", "1,2,3")[0] == 2
        assert _run(capsys, "explain", "--network", identity_file, "--class", "7")[0] == 2


class TestRegionMap:
    def _regions(self, tmp_path, capsys, net, *extra):
        path = tmp_path / "net.json"
        save_network(net, path)
        out = tmp_path / "map.csv"
        code, _ = _run(capsys, "region-map", "--network", path, "--resolution", "11", "--out", out, *extra)
        assert code == 0
        return list(csv.DictReader(out.open()))

    def test_linear_net_single_region(self, tmp_path, capsys, rng):
        net = make_net((rng.standard_normal((3, 2)), rng.standard_normal(3), "identity"),
                       (rng.standard_normal((1, 3)), [0.0], "identity"))
        rows = self._regions(tmp_path, capsys, net)
        assert len(rows) == 121
        assert len({r["region_id"] for r in rows}) == 1

    def test_single_unit_splits_at_zero(self, tmp_path, capsys):
        rows = self._regions(tmp_path, capsys, make_net(([[1.0, 0.0]], [0.0], "relu")),
                             "--bounds=-1,1.2")
        ids = {r["region_id"] for r in rows}
        assert len(ids) == 2
        left = {r["region_id"] for r in rows if float(r["x"]) < 0}
        right = {r["region_id"] for r in rows if float(r["x"]) >= 0}
        assert len(left) == len(right) == 1 and left != right
        assert all(float(r["grad_x"]) == (1.0 if float(r["x"]) >= 0 else 0.0) for r in rows)

    def test_many_regions(self, tmp_path, capsys, rng):
        from dtdaudit.experiment import random_network

        rows = self._regions(tmp_path, capsys, random_network((2, 10, 10, 1), rng, "unrestricted"),
                             "--resolution", "41")
        assert len({r["region_id"] for r in rows}) > 5

    def test_wrong_input_dim(self, tmp_path, capsys):
        path = tmp_path / "net.json"
        save_network(make_net((np.eye(3), np.zeros(3), "relu")), path)
        assert _run(capsys, "region-map", "--network", path)[0] == 2

    def test_bad_bounds(self, identity_file, capsys):
        assert _run(capsys, "region-map", "--network", identity_file, "--bounds", "1,0")[0] == 2


class TestVerifyCommand:
    def test_subset(self, tmp_path, capsys):
        out = tmp_path / "v.json"
        code, io = _run(capsys, "verify", "--only", "closed_form,forgery", "--trials", "3", "--out", out)
        assert code == 0
        report = json.loads(out.read_text())
        assert [c["name"] for c in report["checks"]] == ["closed_form", "forgery"]
        assert io.out.count("PASS") == 2

    def test_deterministic_report(self, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        _run(capsys, "verify", "--only", "prop2", "--trials", "2", "--out", a)
        _run(capsys, "verify", "--only", "prop2", "--trials", "2", "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_failure_exit_code(self, monkeypatch, capsys):
        monkeypatch.setattr(rules, "lrp_denominator",
                            lambda rule, W, a, b: rules.stabilized_denominator(rule, W @ a))
        code, io = _run(capsys, "verify", "--only", "grad_x_input", "--trials", "3")
        assert code == 1 and "FAIL" in io.out

    def test_unknown_check(self, capsys):
        assert _run(capsys, "verify", "--only", "nope")[0] == 2


def test_gen_net_round_trip(tmp_path, capsys):
    out = tmp_path / "net.json"
    assert _run(capsys, "gen-net", "--seed", "5", "--dims", "3,4,2", "--out", out)[0] == 0
    code, io = _run(capsys, "gen-net", "--seed", "5", "--dims", "3,4,2")
    assert code == 0
    assert json.loads(io.out) == json.loads(out.read_text())


def test_no_command(capsys):
    assert _run(capsys)[0] == 2
