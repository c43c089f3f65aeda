import json

import numpy as np
import pytest

from gapmcdm import formats
from gapmcdm.cli import irf_lattice, main, truth_from_dict
from gapmcdm.exceptions import InvalidDesignError
from gapmcdm.fit import PosteriorMoments
from gapmcdm.model import ApmParams, GapmParams, KnotGrid, QMatrix, identity_theta


class TestFormats:
    def test_knot_presets(self):
        assert formats.parse_knots("k1").interior.tolist() == pytest.approx([0.05 * i for i in range(1, 20)])
        assert formats.parse_knots("k0").interior[[0, -1]].tolist() == [0.05, 0.95]
        assert formats.parse_knots("k2").S == 10
        assert formats.parse_knots("ecpe").interior[:2].tolist() == [0.025, 0.05]
        assert formats.parse_knots("0.3, 0.6").breakpoints.tolist() == [0.0, 0.3, 0.6, 1.0]
        with pytest.raises(InvalidDesignError):
            formats.parse_knots("0.3,abc")

    def test_digest_ignores_key_order(self):
        assert formats.config_digest({"a": 1, "b": 2}) == formats.config_digest({"b": 2, "a": 1})
        assert formats.config_digest({"a": 1}) != formats.config_digest({"a": 2})
        assert len(formats.config_digest({})) == 16

    def test_csv_round_trip(self, tmp_path):
        x = np.random.default_rng(0).random((4, 3))
        p = tmp_path / "x.csv"
        formats.write_float_csv(p, x, formats.meta(3, {}), columns=["a", "b", "c"])
        assert p.read_text().startswith("# seed=3 config_digest=")
        np.testing.assert_array_equal(formats.read_csv(p), x)

    def test_csv_errors(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("1,0\n0,x\n")
        with pytest.raises(InvalidDesignError):
            formats.read_csv(p)
        p.write_text("1,0\n0\n")
        with pytest.raises(InvalidDesignError):
            formats.read_csv(p)
        p.write_text("0.5,1\n")
        with pytest.raises(InvalidDesignError):
            formats.read_responses(p)

    def test_params_round_trip(self):
        grid = KnotGrid.from_interior([0.5])
        q = QMatrix(np.array([[1, 0], [1, 1]], dtype=np.int8))
        g = GapmParams(np.array([[1.0, 0.0], [0.3, 0.7]]), identity_theta(grid, 2, 2), np.eye(2), grid)
        a = ApmParams(np.array([[0.1, 0.8, 0.0], [0.2, 0.3, 0.4]]), np.array([0.1, 0.2]), np.eye(2))
        for params in (g, a):
            d = formats.params_to_dict(params, q, formats.meta(0, {}))
            back, q2 = formats.params_from_dict(json.loads(formats.dumps(d)))
            back.validate(q2)
            assert formats.dumps(formats.params_to_dict(back, q2, d["meta"])) == formats.dumps(d)
        assert set(formats.params_to_dict(a, q)) >= {"delta", "mean", "cov_chol", "sigma"}
        with pytest.raises(InvalidDesignError):
            formats.params_from_dict({"q": [[1]], "model": "gapm"})

    def test_moments_round_trip(self):
        m = PosteriorMoments(np.random.default_rng(0).normal(size=(3, 2)), np.zeros((3, 2, 2)), 7)
        back = formats.moments_from_dict(json.loads(formats.dumps(formats.moments_to_dict(m))))
        np.testing.assert_array_equal(back.mean, m.mean)
        assert back.count == 7


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--q", "builtin:Q3", "--n", "150", "--sigma", "0.7", "--seed", "1",
                 "--out", str(d / "sim")]) == 0
    assert main(["fit", "--responses", str(d / "sim/responses.csv"), "--q", str(d / "sim/q.csv"),
                 "--knots", "k2", "--iterations", "120", "--seed", "2", "--validate",
                 "--out", str(d / "fit")]) == 0
    return d


class TestSimulate:
    def test_outputs(self, workdir):
        Y = formats.read_csv(workdir / "sim/responses.csv", dtype=int)
        assert Y.shape == (150, 20) and set(np.unique(Y)) <= {0, 1}
        assert formats.read_csv(workdir / "sim/u_true.csv").shape == (150, 3)
        truth = truth_from_dict(formats.read_json(workdir / "sim/truth.json"))
        assert truth.q.J == 20
        assert formats.read_json(workdir / "sim/truth.json")["meta"]["seed"] == 1

    def test_byte_identical(self, workdir, tmp_path):
        argv = ["simulate", "--n", "150", "--sigma", "0.7", "--seed", "1"]
        assert main(argv + ["--out", str(tmp_path)]) == 0
        for name in ("responses.csv", "q.csv", "u_true.csv", "truth.json"):
            assert (tmp_path / name).read_bytes() == (workdir / "sim" / name).read_bytes()

    def test_full_size(self, tmp_path):
        assert main(["simulate", "--q", "builtin:Q3", "--n", "1000", "--sigma", "0.7", "--seed", "1",
                     "--out", str(tmp_path)]) == 0
        assert formats.read_csv(tmp_path / "responses.csv", dtype=int).shape == (1000, 20)

    def test_bad_sigma(self, tmp_path, capsys):
        assert main(["simulate", "--sigma", "1.2", "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err


class TestFit:
    def test_outputs(self, workdir, capsys):
        params, q = formats.params_from_dict(formats.read_json(workdir / "fit/params.json"))
        params.validate(q)
        scores = formats.read_csv(workdir / "fit/scores.csv")
        assert scores.shape == (150, 3) and np.all((scores > 0) & (scores < 1))
        log = (workdir / "fit/fit_log.txt").read_text().splitlines()
        assert log[0].startswith("# seed=2 config_digest=")
        assert log[1].startswith("iter=1 accept=") and "loglik=" in log[1]

    def test_apm_layout(self, workdir, tmp_path):
        assert main(["fit", "--responses", str(workdir / "sim/responses.csv"), "--q", "builtin:Q3",
                     "--model", "apm", "--iterations", "40", "--out", str(tmp_path)]) == 0
        d = formats.read_json(tmp_path / "params.json")
        assert d["model"] == "apm"
        assert np.array(d["delta"]).shape == (20, 4)
        assert len(d["mean"]) == 3 and np.array(d["sigma"]).shape == (3, 3)

    def test_exploratory(self, workdir, tmp_path):
        assert main(["fit", "--responses", str(workdir / "sim/responses.csv"), "--exploratory", "--k", "3",
                     "--knots", "k2", "--iterations", "40", "--out", str(tmp_path)]) == 0
        alpha = np.array(formats.read_json(tmp_path / "params.json")["alpha"])
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(alpha > 0)

    def test_shape_mismatch(self, workdir, tmp_path):
        formats.write_int_csv(tmp_path / "q.csv", np.ones((5, 3)))
        assert main(["fit", "--responses", str(workdir / "sim/responses.csv"), "--q", str(tmp_path / "q.csv"),
                     "--iterations", "5", "--out", str(tmp_path)]) == 2

    def test_missing_input(self, tmp_path):
        assert main(["fit", "--responses", str(tmp_path / "nope.csv"), "--q", "builtin:Q3",
                     "--out", str(tmp_path)]) == 2

    def test_threads_do_not_change_output(self, workdir, tmp_path):
        assert main(["fit", "--responses", str(workdir / "sim/responses.csv"), "--q", str(workdir / "sim/q.csv"),
                     "--knots", "k2", "--iterations", "120", "--seed", "2", "--threads", "3",
                     "--out", str(tmp_path)]) == 0
        for name in ("params.json", "scores.csv", "moments.json", "fit_log.txt"):
            assert (tmp_path / name).read_bytes() == (workdir / "fit" / name).read_bytes()


class TestDownstream:
    def test_marglik(self, workdir, tmp_path):
        out = tmp_path / "ml.json"
        assert main(["marglik", "--responses", str(workdir / "sim/responses.csv"),
                     "--params", str(workdir / "fit/params.json"), "--moments", str(workdir / "fit/moments.json"),
                     "--m-draws", "200", "--out", str(out)]) == 0
        d = formats.read_json(out)
        assert np.isfinite(d["loglik"]) and len(d["per_unit_se"]) == 150

    def test_eval(self, workdir, tmp_path):
        out = tmp_path / "metrics.json"
        assert main(["eval", "--params", str(workdir / "fit/params.json"), "--truth", str(workdir / "sim/truth.json"),
                     "--scores", str(workdir / "fit/scores.csv"), "--u-true", str(workdir / "sim/u_true.csv"),
                     "--n-mc", "1024", "--out", str(out)]) == 0
        d = formats.read_json(out)
        assert len(d["ise"]) == 20 and min(d["ise"]) >= 0
        assert -1 <= d["avc"] <= 1 and d["corr_mse"] >= 0

    def test_irf_grid_identity_item(self, tmp_path):
        grid = KnotGrid.from_interior([0.5])
        q = QMatrix(np.array([[1]], dtype=np.int8))
        params = GapmParams(np.ones((1, 1)), identity_theta(grid, 1, 1), np.eye(1), grid)
        formats.write_json(tmp_path / "p.json", formats.params_to_dict(params, q))
        assert main(["irf-grid", "--params", str(tmp_path / "p.json"), "--out", str(tmp_path / "irf")]) == 0
        table = formats.read_csv(tmp_path / "irf/irf_item001.csv")
        assert table.shape == (41, 2)
        np.testing.assert_allclose(table[:, 1], table[:, 0], atol=1e-15)

    def test_irf_profiles_above_two_attributes(self, workdir):
        params, q = formats.params_from_dict(formats.read_json(workdir / "fit/params.json"))
        cols, table = irf_lattice(params, q, 0, 5)
        assert cols == ["attribute", "U1", "U2", "U3", "pi"] and table.shape == (15, 5)

    def test_cv(self, workdir, tmp_path):
        out = tmp_path / "cve.json"
        assert main(["cv", "--responses", str(workdir / "sim/responses.csv"), "--k-candidates", "1,2",
                     "--splits", "2", "--iterations", "30", "--posterior-iterations", "40", "--m-draws", "100",
                     "--out", str(out)]) == 0
        d = formats.read_json(out)
        assert sorted(d["cve"]) == ["1", "2"] and d["k_hat"] in (1, 2)

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["fit"])
        assert exc.value.code == 2
