"""
比較手法（遺伝的アルゴリズム・ランダム探索）のテスト
"""
from pathlib import Path

import numpy as np
import pytest

from baselines import (
    GaConfig,
    Method,
    fom_objective,
    genetic_search,
    p2s_objective,
    random_search,
    results_row,
)
from env import OPAMP_SPECS, RFPA_SPECS, Fidelity, ParamSpace, circuit_setup, rng_stream

HERE = Path(__file__).resolve().parent


def _space(n=3, hi=10.0, integer=True, step=1.0):
    return ParamSpace(
        names=tuple((f"X{i}", "v") for i in range(n)),
        lo=np.zeros(n),
        hi=np.full(n, hi),
        step=np.full(n, step),
        integer=np.full(n, integer),
        init=np.zeros(n),
    )


def _quadratic(target):
    target = np.asarray(target, dtype=float)

    def objective(x):
        return -float(np.sum((x - target) ** 2))

    return objective


class RecordingObjective:
    """呼び出された点を記録する目的関数"""

    def __init__(self, space, inner):
        self.space = space
        self.inner = inner
        self.points = []

    def __call__(self, x):
        self.space.check(x)
        self.points.append(np.array(x))
        return self.inner(x)


# ============================================
# 遺伝的アルゴリズム
# ============================================

@pytest.mark.parametrize("seed", range(10))
def test_ga_finds_quadratic_optimum(seed):
    space = _space()
    config = GaConfig(generations=100, eval_budget_cap=500)
    result = genetic_search(_quadratic([3.0, 7.0, 5.0]), space, config,
                            rng_stream(seed, "baseline"), target=0.0)
    assert result.best_r >= -1e-2
    assert result.success
    assert result.evals_used <= 500
    np.testing.assert_array_equal(result.best_params, [3.0, 7.0, 5.0])


def test_ga_stays_in_bounds():
    space = _space(n=4, hi=1.0, integer=False, step=0.4)
    objective = RecordingObjective(space, _quadratic([2.0, -1.0, 0.5, 0.5]))
    result = genetic_search(objective, space, GaConfig(generations=10, mutation_rate=1.0),
                            np.random.default_rng(1), target=None)
    assert len(objective.points) == result.evals_used
    pts = np.array(objective.points)
    assert pts.min() >= 0.0 and pts.max() <= 1.0


def test_ga_respects_evaluation_cap():
    space = _space()
    config = GaConfig(population_size=20, generations=50, eval_budget_cap=30)
    objective = RecordingObjective(space, _quadratic([100.0, 100.0, 100.0]))
    result = genetic_search(objective, space, config, np.random.default_rng(2), target=None)
    assert result.evals_used == 30
    assert len(objective.points) == 30
    assert not result.success


def test_ga_history_tracks_cumulative_evaluations():
    space = _space()
    config = GaConfig(population_size=10, generations=5, eval_budget_cap=1000)
    result = genetic_search(_quadratic([100.0, 100.0, 100.0]), space, config,
                            np.random.default_rng(3), target=None)
    assert result.history_evals == [10, 19, 28, 37, 46]
    assert result.history_evals[-1] == result.evals_used
    assert all(b >= a for a, b in zip(result.history, result.history[1:]))
    assert result.history[-1] == result.best_r


def test_ga_is_reproducible():
    space = _space(n=5, hi=20.0)
    config = GaConfig(generations=10)
    a = genetic_search(_quadratic([1, 2, 3, 4, 5]), space, config, np.random.default_rng(4), None)
    b = genetic_search(_quadratic([1, 2, 3, 4, 5]), space, config, np.random.default_rng(4), None)
    np.testing.assert_array_equal(a.best_params, b.best_params)
    assert a.history == b.history


def test_ga_default_rng_uses_config_seed():
    space = _space()
    config = GaConfig(generations=3, seed=11)
    a = genetic_search(_quadratic([100.0] * 3), space, config, target=None)
    b = genetic_search(_quadratic([100.0] * 3), space, config, np.random.default_rng(11), None)
    assert a.history == b.history


def test_ga_parallel_evaluation_matches_serial():
    space = _space(n=4, hi=30.0)
    serial = genetic_search(_quadratic([5, 10, 15, 20]), space,
                            GaConfig(generations=8, max_workers=1), np.random.default_rng(5), None)
    parallel = genetic_search(_quadratic([5, 10, 15, 20]), space,
                              GaConfig(generations=8, max_workers=4), np.random.default_rng(5), None)
    np.testing.assert_array_equal(serial.best_params, parallel.best_params)
    assert serial.history == parallel.history


@pytest.mark.parametrize("overrides, field_name", [
    ({"population_size": 1}, "population_size"),
    ({"generations": 0}, "generations"),
    ({"tournament_k": 0}, "tournament_k"),
    ({"crossover_rate": 1.5}, "crossover_rate"),
    ({"mutation_step": 0}, "mutation_step"),
    ({"max_workers": 0}, "max_workers"),
])
def test_ga_config_validation(overrides, field_name):
    problems = GaConfig(**overrides).validate()
    assert field_name in [name for name, _ in problems]
    assert GaConfig().validate() == []


# ============================================
# ランダム探索
# ============================================

def test_random_search_budget_of_one():
    space = _space()
    result = random_search(_quadratic([5.0] * 3), space, 1, np.random.default_rng(0), target=None)
    assert result.evals_used == 1
    assert len(result.history) == 1
    assert result.history_evals == [1]
    assert result.best_r == result.history[0]


def test_random_search_rejects_empty_budget():
    with pytest.raises(ValueError):
        random_search(_quadratic([0.0] * 3), _space(), 0, np.random.default_rng(0))


def test_random_search_best_is_running_maximum():
    space = _space(n=2, hi=1.0, integer=False, step=0.1)
    objective = RecordingObjective(space, _quadratic([0.3, 0.6]))
    result = random_search(objective, space, 200, np.random.default_rng(6), target=None)
    assert result.evals_used == 200
    scores = [objective.inner(p) for p in objective.points]
    np.testing.assert_allclose(result.history, np.maximum.accumulate(scores))
    assert result.history_evals == list(range(1, 201))
    assert objective.inner(result.best_params) == result.best_r


def test_random_search_stops_at_target():
    space = _space()
    result = random_search(_quadratic([5.0] * 3), space, 100, np.random.default_rng(0),
                           target=-1e9)
    assert result.success
    assert result.evals_used == 1


def test_random_search_is_reproducible():
    space = _space(n=3, hi=50.0)
    a = random_search(_quadratic([10.0] * 3), space, 50, rng_stream(7, "baseline"), None)
    b = random_search(_quadratic([10.0] * 3), space, 50, rng_stream(7, "baseline"), None)
    np.testing.assert_array_equal(a.best_params, b.best_params)


# ============================================
# 目的関数と結果行
# ============================================

def test_p2s_objective_is_zero_when_goal_met():
    goal = np.array([400.0, 1e7, 57.0, 1e-3])
    met = p2s_objective(lambda p: np.array([1e4, 1e9, 89.0, 1e-6]), goal, OPAMP_SPECS)
    assert met(np.zeros(15)) == 0.0
    missed = p2s_objective(lambda p: np.array([200.0, 1e7, 57.0, 1e-3]), goal, OPAMP_SPECS)
    assert missed(np.zeros(15)) == pytest.approx(-1 / 3)


def test_fom_objective_on_rfpa_fixture():
    setup = circuit_setup("rfpa", (HERE / "netlists" / "rfpa.net").read_text(encoding="utf-8"))
    evaluator = setup.evaluator(Fidelity.FINE)
    objective = fom_objective(evaluator, RFPA_SPECS)
    x = setup.space.midpoint()
    p, e = evaluator(x)
    assert objective(x) == pytest.approx(p + 3 * e)


def test_results_row_columns():
    row = results_row(Method.GA, np.array([2.5, 0.55]), RFPA_SPECS, True, 42, 0.0, 1.5)
    assert list(row) == ["method", "goal_P", "goal_E", "success", "evals_used", "best_r",
                         "wall_secs"]
    assert row["method"] == "ga"
    assert row["evals_used"] == 42


def test_random_search_does_not_beat_ga_on_average():
    space = _space()
    objective = _quadratic([3.0, 7.0, 5.0])
    ga, rand = [], []
    for seed in range(10):
        ga_rng, random_rng = rng_stream(seed, "baseline").bit_generator.seed_seq.spawn(2)
        ga.append(genetic_search(objective, space, GaConfig(generations=100, eval_budget_cap=500),
                                 np.random.default_rng(ga_rng), target=None).best_r)
        rand.append(random_search(objective, space, 500, np.random.default_rng(random_rng),
                                  target=None).best_r)
    assert np.mean(ga) >= np.mean(rand)
