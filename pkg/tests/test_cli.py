import json

import numpy as np

import dirichlet_p.cli as cli
from dirichlet_p.report import CheckReport, all_finite


def write_config(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def base_domain_1d():
    return {"dim": 1, "extent": [[0.0, 1.0]], "shape": [17]}


def base_domain_2d(n=17):
    return {"dim": 2, "extent": [[0.0, 1.0], [0.0, 1.0]], "shape": [n, n]}


class TestSolveCommand:
    def test_affine_boundary_success(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_2d(),
            "p": 3.0,
            "solve": {"boundary": {"mask": "domain_boundary",
                                   "values": {"affine": {"linear": [2.0, -1.0],
                                                         "constant": 0.5}}}},
        })
        out = tmp_path / "out.json"
        assert cli.main(["solve", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
        rep = json.loads(out.read_text())
        assert rep["results"]["residual_norm"] <= 1e-8

    def test_nonconvergence_exit_two_with_trace(self, tmp_path):
        vals = (np.sin(7 * np.linspace(0, 1, 17))[:, None]
                * np.cos(5 * np.linspace(0, 1, 17))[None, :])
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_2d(),
            "p": 4.0,
            "solver": {"grad_tol": 1e-13, "max_iter": 1},
            "solve": {"boundary": {"mask": "domain_boundary",
                                   "values": {"shape": [17, 17],
                                              "values": vals.reshape(-1).tolist()}}},
        })
        out = tmp_path / "out.json"
        assert cli.main(["solve", "--config", cfg, "--out", str(out)]) == cli.EXIT_COMPUTE
        rep = json.loads(out.read_text())
        assert rep["trace"]

    def test_missing_p_names_the_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(),
            "solve": {"boundary": {"values": 0.0}},
        })
        assert cli.main(["solve", "--config", cfg]) == cli.EXIT_CONFIG
        assert "'p'" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(), "p": 2.0, "frobnicate": 1,
            "solve": {"boundary": {"values": 0.0}},
        })
        assert cli.main(["solve", "--config", cfg]) == cli.EXIT_CONFIG
        assert "frobnicate" in capsys.readouterr().err

    def test_obstacle_block(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(),
            "p": 2.0,
            "solve": {
                "boundary": {"mask": "domain_boundary", "values": 0.0},
                "obstacle": {"region": {"type": "interval", "a": 0.25, "b": 0.75},
                             "level": 1.0},
            },
        })
        out = tmp_path / "out.json"
        assert cli.main(["solve", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
        rep = json.loads(out.read_text())
        sol = np.asarray(rep["results"]["solution"]["values"])
        x = np.linspace(0, 1, 17)
        exact = np.minimum(np.minimum(4 * x, 1.0), 4 * (1 - x))
        assert np.max(np.abs(sol - exact)) <= 1e-8


class TestCapacityCommand:
    def test_1d_closed_form_value(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(),
            "p": 2.0,
            "capacity": {"condenser": {
                "inner": {"type": "interval", "a": 0.25, "b": 0.75},
                "outer": "domain_boundary"}},
        })
        out = tmp_path / "out.json"
        assert cli.main(["capacity", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
        rep = json.loads(out.read_text())
        assert abs(rep["results"]["value"] - 16.0) <= 1e-8

    def test_determinism_across_thread_hints(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_2d(9),
            "p": 3.0,
            "seed": 17,
            "capacity": {"condenser": {
                "inner": {"type": "rect", "min": [0.375, 0.375], "max": [0.625, 0.625]},
                "outer": "domain_boundary"}},
        })
        out1 = tmp_path / "a.json"
        out2 = tmp_path / "b.json"
        assert cli.main(["capacity", "--config", cfg, "--out", str(out1),
                         "--threads", "1"]) == cli.EXIT_OK
        assert cli.main(["capacity", "--config", cfg, "--out", str(out2),
                         "--threads", "7"]) == cli.EXIT_OK
        assert out1.read_bytes() == out2.read_bytes()


class TestCheckCommand:
    def test_full_suite_passes(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_2d(9),
            "p": 3.0,
            "seed": 5,
            "check": {"suites": ["sector", "monotone", "contraction", "d1d2",
                                 "choquet", "union_diff"], "trials": 8},
        })
        out = tmp_path / "out.json"
        assert cli.main(["check", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
        rep = json.loads(out.read_text())
        assert rep["results"]["failed"] == 0

    def test_seeded_rerun_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(),
            "p": 2.5, "eps": 0.0,
            "seed": 99,
            "check": {"suites": ["sector", "contraction"], "trials": 6},
        })
        out1 = tmp_path / "a.json"
        out2 = tmp_path / "b.json"
        cli.main(["check", "--config", cfg, "--out", str(out1), "--threads", "2"])
        cli.main(["check", "--config", cfg, "--out", str(out2), "--threads", "5"])
        assert out1.read_bytes() == out2.read_bytes()

    def test_unknown_suite_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(), "p": 2.0,
            "check": {"suites": ["sector", "bogus"]},
        })
        assert cli.main(["check", "--config", cfg]) == cli.EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err

    def test_property_failure_exit_three(self, tmp_path, monkeypatch):
        failing = CheckReport(check="sector", p=2.0, grid="1d 17", passed=False,
                              lhs=1.0, rhs=0.0, slack=-1.0, tolerance=0.0)
        monkeypatch.setattr(cli, "check_sector", lambda *a, **k: failing)
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(), "p": 2.0,
            "check": {"suites": ["sector"], "trials": 1},
        })
        out = tmp_path / "out.json"
        assert cli.main(["check", "--config", cfg, "--out", str(out)]) == cli.EXIT_PROPERTY
        rep = json.loads(out.read_text())
        assert rep["results"]["failed"] == 1

    def test_csv_flattening(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(), "p": 2.0, "seed": 1,
            "check": {"suites": ["sector"], "trials": 3},
        })
        out = tmp_path / "out.json"
        assert cli.main(["check", "--config", cfg, "--out", str(out), "--csv"]) == cli.EXIT_OK
        csv_path = tmp_path / "out.csv"
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0].startswith("check,")
        assert len(lines) == 4


class TestQrCommand:
    def test_power_two_summary(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": {"dim": 2, "extent": [[-1.0, 1.0], [-1.0, 1.0]],
                       "shape": [33, 33]},
            "qr": {"mapping": {"kind": "power", "k": 2, "puncture": 0.3},
                   "min_order": 1.0, "include_log": True},
        })
        out = tmp_path / "out.json"
        assert cli.main(["qr", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
        rep = json.loads(out.read_text())["results"]
        assert abs(rep["K_O"] - 1.0) <= 1e-10
        assert abs(rep["K_I"] - 1.0) <= 1e-10
        assert rep["theta_identity_deviation"] <= 1e-10
        assert rep["harmonicity"]["passed"]


class TestMetricCommand:
    def test_distances_and_certificates(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_2d(33),
            "metric": {"source": [0.5, 0.5], "neighborhood": 16,
                       "targets": [[1.0, 0.5]],
                       "cutoff": {"r": 0.3},
                       "truncation": {"r": 0.15, "R": 0.3}},
        })
        out = tmp_path / "out.json"
        assert cli.main(["metric", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
        rep = json.loads(out.read_text())["results"]
        assert abs(rep["distances"][0]["distance"] - 0.5 / np.sqrt(2)) <= 0.02
        assert rep["cutoff"]["certificate"]["passed"]
        assert rep["truncation"]["certificate"]["passed"]


class TestCaccioppoliCommand:
    def test_ball_variant(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_2d(33),
            "p": 2.0,
            "caccioppoli": {"u": {"affine": {"linear": [2.0, -1.0]}},
                            "balls": [{"center": [0.5, 0.5], "r": 0.1, "R": 0.25}],
                            "variant": "ball"},
        })
        out = tmp_path / "out.json"
        assert cli.main(["caccioppoli", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
        rep = json.loads(out.read_text())["results"]
        assert rep["checks"][0]["passed"]

    def test_cutoff_and_euclidean_variants(self, tmp_path):
        for variant in ("cutoff", "euclidean"):
            cfg = write_config(tmp_path, f"{variant}.json", {
                "domain": base_domain_2d(33),
                "p": 2.0,
                "caccioppoli": {"u": {"affine": {"linear": [1.0, 1.0]}},
                                "balls": [{"center": [0.5, 0.5], "r": 0.1, "R": 0.25}],
                                "variant": variant},
            })
            out = tmp_path / f"{variant}_out.json"
            assert cli.main(["caccioppoli", "--config", cfg,
                             "--out", str(out)]) == cli.EXIT_OK
            rep = json.loads(out.read_text())["results"]
            assert rep["variant"] == variant
            assert rep["checks"][0]["passed"]

    def test_log_abs_needs_punctured_domain(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "c.json", {
            "domain": {"dim": 2, "extent": [[-1.0, 1.0], [-1.0, 1.0]],
                       "shape": [17, 17]},
            "p": 2.0,
            "caccioppoli": {"u": "log_abs",
                            "balls": [{"center": [0.0, 0.0], "r": 0.1, "R": 0.2}]},
        })
        assert cli.main(["caccioppoli", "--config", cfg]) == cli.EXIT_CONFIG
        assert "origin" in capsys.readouterr().err


class TestFlags:
    def test_tol_override_changes_solver_target(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_2d(),
            "p": 3.0,
            "solver": {"grad_tol": 1e-4},
            "solve": {"boundary": {"mask": "domain_boundary",
                                   "values": {"affine": {"linear": [1.0, 1.0]}}}},
        })
        out = tmp_path / "out.json"
        assert cli.main(["solve", "--config", cfg, "--out", str(out),
                         "--tol", "1e-10"]) == cli.EXIT_OK
        rep = json.loads(out.read_text())
        assert rep["results"]["diagnostics"]["grad_tol"] == 1e-10

    def test_seed_override_recorded(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(), "p": 2.0, "seed": 1,
            "check": {"suites": ["sector"], "trials": 2},
        })
        out = tmp_path / "out.json"
        assert cli.main(["check", "--config", cfg, "--out", str(out),
                         "--seed", "33"]) == cli.EXIT_OK
        assert json.loads(out.read_text())["seed"] == 33

    def test_nonfinite_report_exits_two(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setitem(cli._COMMANDS, "solve",
                            lambda cfg, seed, tol: {"value": float("nan")})
        cfg = write_config(tmp_path, "c.json", {
            "domain": base_domain_1d(), "p": 2.0,
            "solve": {"boundary": {"values": 0.0}},
        })
        assert cli.main(["solve", "--config", cfg]) == cli.EXIT_COMPUTE
        assert "non-finite" in capsys.readouterr().err


class TestReportHelpers:
    def test_all_finite_flags_nan(self):
        assert all_finite({"a": [1.0, 2.0], "b": {"c": 3}})
        assert not all_finite({"a": [1.0, float("nan")]})
        assert not all_finite({"a": float("inf")})
        assert all_finite({"note": "text", "flag": True, "none": None})
