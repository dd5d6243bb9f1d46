import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daeopt import neural
from daeopt import problems as pr
from daeopt import surrogate as sg
from daeopt.surrogate import AnalyticModel, ConstraintSurrogate, GaConfig, TrainingDataset


def branch_stub():
    return AnalyticModel(lambda t, P: np.column_stack(pr.cantilever_branch(t, P[:, 0])), 2, 2)


@pytest.fixture(scope="module")
def cantilever_data():
    problem, _ = pr.make_cantilever_problem()
    ds, sols = sg.build_initial_dataset(problem, 3, 300, 0)
    return problem, ds, sols


# -- dataset ---------------------------------------------------------------------


def test_initial_records_use_initial_map():
    problem, _ = pr.make_scalar_problem()
    ds, _ = sg.build_initial_dataset(problem, 2, 10, 0)
    assert len(ds.I_t) == 2
    p = ds.I_p[:, 0]
    np.testing.assert_allclose(ds.I_x[:, 0], p - p**3 / 3, rtol=0, atol=1e-15)
    assert np.all(ds.I_t == 0.0)


def test_initial_dataset_is_seeded():
    problem, _ = pr.make_scalar_problem()
    a, _ = sg.build_initial_dataset(problem, 4, 20, 5)
    b, _ = sg.build_initial_dataset(problem, 4, 20, 5)
    for name in ("I_p", "I_x", "F_t", "F_p", "B_t", "B_x"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_latin_hypercube_draws_respect_box():
    problem, _ = pr.make_bidiagonal_problem(3)
    from scipy.stats import qmc

    P = qmc.scale(qmc.LatinHypercube(d=3, seed=0).random(100_000), problem.lower, problem.upper)
    assert np.all(P >= problem.lower) and np.all(P <= problem.upper)


def test_initial_dataset_rejects_single_draw():
    problem, _ = pr.make_scalar_problem()
    with pytest.raises(ValueError):
        sg.build_initial_dataset(problem, 1, 10, 0)


def test_degenerate_times_excluded_from_exact_records(cantilever_data):
    _, ds, sols = cantilever_data
    cfg = GaConfig()
    for sol in sols:
        assert sol.flagged
        for t in sol.record_t:
            assert min(abs(t - f) for f in sol.flagged) > cfg.exclusion_radius


def test_dataset_csv_round_trip(tmp_path, cantilever_data):
    problem, ds, _ = cantilever_data
    ds.to_csv(tmp_path / "ds.csv", problem)
    header = (tmp_path / "ds.csv").read_text().splitlines()[0]
    assert header == "set,t,p1,x1,x2,gen"
    back = TrainingDataset.read_csv(tmp_path / "ds.csv")
    for name in ("I_t", "I_p", "I_x", "F_t", "F_p", "B_t", "B_p", "B_x", "B_gen"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))


def test_dataset_check_rejects_out_of_box_parameter():
    problem, _ = pr.make_scalar_problem()
    ds = TrainingDataset.empty(1, 1)
    ds.add_exact([0.1], [0.5], [[0.0]], 0)
    with pytest.raises(ValueError):
        ds.check(problem)


# -- loss -------------------------------------------------------------------------


def test_branch_stub_has_vanishing_loss(cantilever_data):
    problem, ds, _ = cantilever_data
    total, parts = sg.composite_loss(branch_stub(), ds, problem=problem)
    assert parts["F"] < 1e-10
    assert parts["I"] < 1e-10
    assert parts["B"] < 1e-10
    assert total < 1e-10


def test_empty_collocation_set_leaves_data_terms(cantilever_data):
    problem, ds, _ = cantilever_data
    net = sg.make_network(problem, (8,), 0, ds.B_x)
    trimmed = TrainingDataset(**{**vars(ds), "F_t": np.empty(0), "F_p": np.empty((0, 1)), "F_gen": np.empty(0, int)})
    total, parts = sg.composite_loss(net, trimmed, (1.0, 123.0, 1.0), problem)
    assert parts["F"] == 0.0
    assert total == parts["I"] + parts["B"]


def test_loss_is_linear_in_exact_weight(cantilever_data):
    problem, ds, _ = cantilever_data
    net = sg.make_network(problem, (8,), 1, ds.B_x)
    one, parts = sg.composite_loss(net, ds, (1.0, 1.0, 1.0), problem)
    two, _ = sg.composite_loss(net, ds, (1.0, 1.0, 2.0), problem)
    assert two - one == pytest.approx(parts["B"], rel=1e-12)


def test_training_reduces_loss():
    problem, _ = pr.make_scalar_problem()
    ds, _ = sg.build_initial_dataset(problem, 5, 200, 0)
    net = sg.make_network(problem, (16, 16), 0, ds.B_x)
    before = sg.composite_loss(net, ds, problem=problem)[0]
    after = sg.train_epochs(net, problem, ds, neural.AdamState(lr=3e-3), 200, (1.0, 1.0, 1.0),
                            np.random.default_rng(0))
    assert after < 0.5 * before


# -- prediction error ------------------------------------------------------------------


def test_untrained_network_has_positive_error():
    problem, _ = pr.make_scalar_problem()
    net = sg.make_network(problem, (8,), 0)
    assert sg.prediction_error(net, problem, np.array([-0.6])) > 0


def test_branch_stub_prediction_error():
    problem, _ = pr.make_cantilever_problem()
    for p in (3.1, 3.55, 3.95):
        assert sg.prediction_error(branch_stub(), problem, np.array([p])) < 1e-10


def test_sup_error_ignores_grid_order():
    problem, _ = pr.make_scalar_problem()
    net = sg.make_network(problem, (8,), 3)
    sol = sg.solve_exact(problem, np.array([-0.4]), GaConfig())
    perm = np.random.default_rng(0).permutation(len(sol.error_t))
    shuffled = sg.ExactSolution(sol.p, sol.record_t, sol.record_x, sol.error_t[perm], sol.error_x[perm])
    assert sg.sup_error(net, shuffled) == sg.sup_error(net, sol)


# -- GA operators -----------------------------------------------------------------------


def test_parent_below_tolerance_never_selected():
    pairs = sg.select_parents([0.5, 0.0], 0.1, 200, 0)
    assert all(i == 0 and j == 0 for i, j in pairs)


def test_equal_errors_give_even_selection():
    pairs = sg.select_parents([0.2, 0.2], 0.1, 10_000, 1)
    first = np.array([i for i, _ in pairs])
    assert abs(np.mean(first == 0) - 0.5) < 0.03
    assert all(i != j for i, j in pairs)


def test_all_errors_below_tolerance_signals_convergence():
    assert sg.select_parents([1e-4, 2e-4], 1e-3, 5, 0) is None


def test_selection_frequency_proportional_to_error():
    pairs = sg.select_parents([0.3, 0.1, 0.0, 0.6], 0.05, 20_000, 2)
    first = np.bincount([i for i, _ in pairs], minlength=4) / 20_000
    np.testing.assert_allclose(first, [0.3, 0.1, 0.0, 0.6], atol=0.015)


def test_offspring_midpoint():
    child = sg.generate_offspring([0.2], [0.4], [0.0], [1.0], 0.0, 0, beta=0.5)
    assert child[0] == pytest.approx(0.3, abs=1e-15)


def test_offspring_degenerate_crossover():
    assert sg.generate_offspring([0.2], [0.4], [0.0], [1.0], 0.0, 0, beta=1.0)[0] == 0.2


def test_offspring_clamped():
    assert sg.generate_offspring([1.3], [1.3], [0.0], [1.0], 0.0, 0)[0] == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3),
       st.floats(0, 2), st.integers(0, 2**31))
def test_offspring_inside_box(p1, p2, sigma, seed):
    child = sg.generate_offspring(p1, p2, np.zeros(3), np.ones(3), sigma, seed)
    assert np.all(child >= 0) and np.all(child <= 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=2), st.integers(0, 2**31))
def test_identical_parents_without_mutation(p, seed):
    child = sg.generate_offspring(p, p, [-1, -1], [1, 1], 0.0, seed)
    np.testing.assert_array_equal(child, p)


def test_offspring_count_per_generation():
    assert GaConfig(per_generation=1000, exact_points=21).offspring_per_generation == 48
    assert GaConfig(per_generation=5, exact_points=21).offspring_per_generation == 1


@pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"population": 1}, {"sigma": -0.1}])
def test_ga_config_validation(kw):
    with pytest.raises(ValueError):
        GaConfig(**kw)


# -- training loop --------------------------------------------------------------------


SMALL = dict(population=6, per_generation=40, max_generations=3, monitor_points=5, epochs=30, n_colloc=100,
             hidden=(8, 8), exact_points=11, error_points=11, lr=3e-3)


def test_vacuous_tolerance_stops_at_generation_zero():
    problem, _ = pr.make_scalar_problem()
    surr = sg.ga_training_loop(problem, GaConfig(**{**SMALL, "alpha": 1e6}), 0)
    assert surr.converged
    assert len(surr.history) == 1
    assert np.all(surr.dataset.B_gen == 0)


def test_loop_history_and_best_checkpoint():
    problem, _ = pr.make_scalar_problem()
    surr = sg.ga_training_loop(problem, GaConfig(**{**SMALL, "alpha": 1e-9}), 0)
    assert not surr.converged
    best = [h["best_max_error"] for h in surr.history]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert best[-1] == min(h["max_error"] for h in surr.history)
    n_exact = [h["n_exact"] for h in surr.history]
    assert all(b > a for a, b in zip(n_exact, n_exact[1:]))
    # the returned network is the best one seen
    cfg = GaConfig(**SMALL)
    monitor = [sg.solve_exact(problem, p, cfg) for p in sg.uniform_param_grid(problem, cfg.monitor_points)]
    assert max(sg.sup_error(surr.net, s) for s in monitor) <= best[-1] + 1e-12
    assert surr.net.n_in == 2 and surr.net.n_out == 1


def test_loop_is_reproducible(tmp_path):
    problem, _ = pr.make_scalar_problem()
    cfg = GaConfig(**{**SMALL, "max_generations": 1, "alpha": 1e-9})
    a = sg.ga_training_loop(problem, cfg, 3)
    b = sg.ga_training_loop(problem, cfg, 3)
    sg.save_history(a.history, tmp_path / "a.csv")
    sg.save_history(b.history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert sg.read_history(tmp_path / "a.csv") == a.history


# -- gamma --------------------------------------------------------------------------------


def test_gamma_zero_for_zero_residuals():
    assert np.all(sg.gamma_from_samples(np.zeros((40, 2))).gamma == 0)


def test_gamma_formula():
    # samples with mean 0.001 and population std 0.002
    Z = np.array([0.001 - 0.002, 0.001 + 0.002] * 20)[:, None]
    g = sg.gamma_from_samples(Z).gamma
    assert g[0] == pytest.approx(0.007, rel=1e-12)


def test_gamma_needs_thirty_samples():
    with pytest.raises(ValueError):
        sg.gamma_from_samples(np.zeros((29, 1)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_gamma_non_negative_and_zero_only_for_zero(seed):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(40, 3)) * rng.uniform(0, 1, 3)
    g = sg.gamma_from_samples(Z).gamma
    assert np.all(g > 0)
    Z[:, 1] = 0.0
    assert sg.gamma_from_samples(Z).gamma[1] == 0.0


def test_estimate_gamma_on_stub_is_tiny():
    problem, _ = pr.make_cantilever_problem()
    surr = ConstraintSurrogate(branch_stub(), np.zeros(2))
    stats = sg.estimate_gamma(surr, problem, sg.fresh_params(problem, 3, 0), n_times=10)
    assert np.all(stats.gamma < 1e-9)
    np.testing.assert_array_equal(surr.gamma, stats.gamma)


def test_negative_gamma_rejected():
    with pytest.raises(ValueError):
        ConstraintSurrogate(branch_stub(), [-1.0, 0.0])


def test_checkpoint_round_trip(tmp_path):
    problem, _ = pr.make_scalar_problem()
    net = sg.make_network(problem, (6,), 0)
    surr = ConstraintSurrogate(net, [0.0123], "scalar", np.array([1e-4]), np.array([4e-3]),
                               [{"generation": 0, "loss": 0.1, "max_error": 0.2, "best_max_error": 0.2, "n_exact": 5}],
                               True, 0.045)
    surr.save(tmp_path / "s.json")
    back = ConstraintSurrogate.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.gamma, surr.gamma)
    assert back.hbar == 0.045 and back.converged and back.problem_name == "scalar"
    X = np.random.default_rng(0).uniform(-1, 1, (7, 2))
    np.testing.assert_array_equal(neural.forward(back.net, X), neural.forward(net, X))


def test_checkpoint_without_gamma_is_rejected(tmp_path):
    problem, _ = pr.make_scalar_problem()
    neural.save(sg.make_network(problem, (4,), 0), tmp_path / "net.json")
    with pytest.raises(KeyError):
        ConstraintSurrogate.load(tmp_path / "net.json")
