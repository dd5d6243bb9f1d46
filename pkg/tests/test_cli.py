import numpy as np
import pytest

from daeopt import cli
from daeopt import problems as pr
from daeopt import surrogate as sg

TINY = ["--pop", "4", "--per-gen", "20", "--max-gen", "1", "--epochs", "20", "--hidden", "8,8", "--n-colloc", "50",
        "--alpha", "1e-9"]


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.toml"
    path.write_text("[ga]\nmonitor_points = 4\nexact_points = 11\nerror_points = 11\n\n[gamma]\nparams = 3\n")
    return str(path)


@pytest.fixture(scope="module")
def scalar_run(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("scalar")
    code = cli.main(["train-constraint", "--problem", "scalar", "--seed", "0", "--out", str(out),
                     "--config", tiny_config, *TINY])
    return out, code


def test_training_writes_artifacts(scalar_run):
    out, code = scalar_run
    assert code == cli.EXIT_NOT_CONVERGED
    for name in (cli.CHECKPOINT, cli.DATASET, cli.HISTORY, cli.CURVES):
        assert (out / name).exists()
    surr = sg.ConstraintSurrogate.load(out / cli.CHECKPOINT)
    assert surr.problem_name == "scalar" and surr.gamma.shape == (1,) and surr.gamma[0] > 0
    assert sg.TrainingDataset.read_csv(out / cli.DATASET).B_x.shape[1] == 1


def test_rerun_history_is_byte_identical(scalar_run, tmp_path, tiny_config):
    out, _ = scalar_run
    cli.main(["train-constraint", "--problem", "scalar", "--seed", "0", "--out", str(tmp_path),
              "--config", tiny_config, *TINY])
    assert (tmp_path / cli.HISTORY).read_bytes() == (out / cli.HISTORY).read_bytes()
    assert (tmp_path / cli.DATASET).read_bytes() == (out / cli.DATASET).read_bytes()


def test_curves_round_trip(scalar_run):
    out, _ = scalar_run
    curves = cli.read_curves(out / cli.CURVES)
    hist = sg.read_history(out / cli.HISTORY)
    np.testing.assert_array_equal(curves["loss"], [h["loss"] for h in hist])


def test_unknown_problem_is_usage_error(tmp_path):
    out = tmp_path / "never"
    assert cli.main(["train-constraint", "--problem", "pendulum", "--out", str(out)]) == cli.EXIT_USAGE
    assert not out.exists()


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[ga]\nmutation_rate = 3\n")
    assert cli.main(["train-constraint", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE


def test_missing_checkpoint(tmp_path):
    code = cli.main(["optimize", "--problem", "scalar", "--out", str(tmp_path), "--checkpoint",
                     str(tmp_path / "none.json")])
    assert code == cli.EXIT_MISSING


def test_checkpoint_without_gamma_is_missing_artifact(tmp_path):
    from daeopt import neural

    problem, _ = pr.make_scalar_problem()
    neural.save(sg.make_network(problem, (4,), 0), tmp_path / "net.json")
    code = cli.main(["optimize", "--problem", "scalar", "--out", str(tmp_path), "--checkpoint",
                     str(tmp_path / "net.json")])
    assert code == cli.EXIT_MISSING


def test_checkpoint_problem_mismatch(scalar_run, tmp_path):
    out, _ = scalar_run
    code = cli.main(["optimize", "--problem", "cantilever", "--out", str(tmp_path), "--checkpoint",
                     str(out / cli.CHECKPOINT)])
    assert code == cli.EXIT_USAGE


def test_output_directory_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env-out"))
    assert cli.RunConfig().out == tmp_path / "env-out"
    assert cli.RunConfig(output_dir="x").out.name == "x"


def test_flags_override_config(tiny_config):
    args = cli.build_parser().parse_args(["train-constraint", "--config", tiny_config, "--pop", "7"])
    cfg = cli.config_from_args(args)
    assert cfg.ga.population == 7
    assert cfg.ga.monitor_points == 4


# -- optimize and refine ----------------------------------------------------------


def run_optimize(scalar_run, tmp_path, *extra):
    out, _ = scalar_run
    dest = tmp_path / "opt"
    code = cli.main(["optimize", "--problem", "scalar", "--checkpoint", str(out / cli.CHECKPOINT), "--out", str(dest),
                     "--n-seeds", "10", "--max-iter", "5", *extra])
    return dest, code


def test_refine_none_passes_through(scalar_run, tmp_path):
    dest, code = run_optimize(scalar_run, tmp_path, "--refine", "none")
    assert code in (cli.EXIT_OK, cli.EXIT_NOT_CONVERGED)
    meta, cands = cli.read_candidates(dest / cli.CANDIDATES)
    assert meta["refine"] == "none"
    for c in cands:
        np.testing.assert_array_equal(c.p_refined, c.p_pred)
        assert -1.2 <= c.p_pred[0] <= -0.2


def test_walk_settings_recorded(scalar_run, tmp_path):
    dest, _ = run_optimize(scalar_run, tmp_path, "--refine", "walk", "--walk-iters", "300", "--walk-step", "0.10")
    meta, cands = cli.read_candidates(dest / cli.CANDIDATES)
    assert meta["refine"] == "walk"
    assert meta["walk_iters"] == "300"
    assert float(meta["walk_step"]) == 0.10
    assert all(c.method == "walk" and c.iterations == 300 for c in cands)
    assert [c.J_refined for c in cands] == sorted(c.J_refined for c in cands)


def test_candidate_report_round_trip(tmp_path):
    from daeopt.optimize import CandidateResult

    cands = [CandidateResult(np.array([0.1, 0.2]), -1.5, np.array([0.11, 0.19]), -1.75, "newton", 4, 37, 0.5, 1.25,
                             "")]
    cli.write_candidates(tmp_path / "c.csv", cands, 2, {"problem": "bidiag:2"})
    header = [ln for ln in (tmp_path / "c.csv").read_text().splitlines() if not ln.startswith("#")][0]
    assert header.startswith("rank,p1,p2,J_pred,p_refined1,p_refined2,J_refined,method,iters,seconds")
    meta, back = cli.read_candidates(tmp_path / "c.csv")
    assert meta == {"problem": "bidiag:2"}
    for a, b in zip(cands, back):
        for k in vars(a):
            np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_landscape_written_and_readable(scalar_run, tmp_path):
    dest, _ = run_optimize(scalar_run, tmp_path, "--refine", "none")
    P, cols = cli.read_landscape(dest / cli.LANDSCAPE)
    assert P.shape == (201, 1)
    assert np.all(cols["J_low"] <= cols["J_surrogate"] + 1e-15)
    assert np.all(cols["J_surrogate"] <= cols["J_high"] + 1e-15)


def test_refine_command_on_direct_objective(tmp_path):
    code = cli.main(["refine", "--problem", "scalar", "--p0", "-0.5706", "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    meta, header, rows = cli.read_table(tmp_path / cli.REFINE)
    assert abs(float(rows[0]["p1"]) - -0.570610626948189) < 1e-8
    assert abs(float(rows[0]["J"]) - -0.060686510583486) < 1e-10


def test_refine_rejects_wrong_dimension(tmp_path):
    assert cli.main(["refine", "--problem", "bidiag:2", "--p0", "0.5", "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_measurement_file_round_trip(tmp_path):
    problem, _ = pr.make_bidiagonal_problem(2)
    cli.write_measurements(tmp_path / "m.csv", [0.2, 0.6], [[1.1, 2.0], [0.9, 1.5]], (0, 1), problem)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "t,x_i,target"
    obj = cli.read_measurements(tmp_path / "m.csv", problem)
    np.testing.assert_array_equal(obj.times, [0.2, 0.6])
    np.testing.assert_array_equal(obj.targets, [[1.1, 2.0], [0.9, 1.5]])


def test_measurement_file_with_gap_rejected(tmp_path):
    problem, _ = pr.make_bidiagonal_problem(2)
    (tmp_path / "m.csv").write_text("t,x_i,target\n0.2,x1,1.0\n0.4,x2,1.0\n")
    with pytest.raises(cli.ConfigError):
        cli.read_measurements(tmp_path / "m.csv", problem)


# -- error bound ----------------------------------------------------------------------


def test_scalar_bound_row(scalar_run, tmp_path):
    out, _ = scalar_run
    code = cli.main(["error-bound", "--problem", "scalar", "--checkpoint", str(out / cli.CHECKPOINT), "--out",
                     str(tmp_path), "--p", "-0.6", "--p", "-0.4"])
    assert code == cli.EXIT_OK
    meta, rows = cli.read_bound(tmp_path / cli.BOUND)
    assert meta["problem"] == "scalar" and len(rows) == 2
    for r in rows:
        assert r["status"] == "ok"
        assert np.isfinite(r["bound"]) and r["bound"] > 0
        assert r["delta_max"] == pytest.approx(sg.ConstraintSurrogate.load(out / cli.CHECKPOINT).gamma[0])


def test_zero_residual_bound(scalar_run, tmp_path):
    out, _ = scalar_run
    cli.main(["error-bound", "--problem", "scalar", "--checkpoint", str(out / cli.CHECKPOINT), "--out",
              str(tmp_path), "--delta-max", "0"])
    _, rows = cli.read_bound(tmp_path / cli.BOUND)
    assert rows[0]["bound"] == 0.0 and rows[0]["horizon_bound"] == 0.0


def test_bidiagonal_bound_falls_back_to_gamma(tmp_path):
    problem, _ = pr.make_bidiagonal_problem(2)
    surr = sg.ConstraintSurrogate(sg.make_network(problem, (4,), 0), [1e-3, 2e-3], "bidiag:2", hbar=0.1)
    surr.save(tmp_path / "s.json")
    code = cli.main(["error-bound", "--problem", "bidiag:2", "--checkpoint", str(tmp_path / "s.json"), "--out",
                     str(tmp_path)])
    assert code == cli.EXIT_OK
    _, rows = cli.read_bound(tmp_path / cli.BOUND)
    assert rows[0]["status"].startswith("precondition-violation")
    assert rows[0]["bound"] == 2e-3
    assert np.isnan(rows[0]["P_norm"])


# -- report and bench ------------------------------------------------------------------


def test_report_renders_figures(scalar_run, tmp_path):
    out, _ = scalar_run
    dest, _ = run_optimize(scalar_run, tmp_path, "--refine", "none")
    for name in (cli.CURVES,):
        (dest / name).write_bytes((out / name).read_bytes())
    assert cli.main(["report", "--dir", str(dest)]) == cli.EXIT_OK
    assert (dest / "training_curves.png").stat().st_size > 0
    assert (dest / "landscape.png").stat().st_size > 0
    _, _, rows = cli.read_table(dest / "report.csv")
    assert {r["figure"] for r in rows} == {"training_curves.png", "landscape.png"}


def test_report_on_empty_directory(tmp_path):
    assert cli.main(["report", "--dir", str(tmp_path)]) == cli.EXIT_MISSING


def test_bench_writes_table(tmp_path, tiny_config):
    code = cli.main(["bench", "scalar", "--out", str(tmp_path), "--config", tiny_config, *TINY,
                     "--n-seeds", "10", "--max-iter", "5", "--refine", "none"])
    assert code == cli.EXIT_NOT_CONVERGED
    meta, rows = cli.read_bench(tmp_path / cli.BENCH_FILE)
    r = rows[0]
    assert meta["problem"] == "scalar"
    assert abs(float(r["p_oracle1"]) - -0.570610626948189) < 1e-8
    for k in ("train_seconds", "predict_seconds", "correct_seconds"):
        assert float(r[k]) >= 0


def test_bench_rejects_unknown_name(tmp_path):
    assert cli.main(["bench", "pendulum", "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
    assert not (tmp_path / "o").exists()


def test_bidiagonal_oracle_matches_closed_form_minimum():
    problem, obj = pr.get_problem("bidiag:2")
    p, J = cli.oracle_optimum("bidiag:2", problem, obj)
    np.testing.assert_allclose(p, [0.57206719, 0.4543842], atol=1e-7)
    assert J < 1e-20
